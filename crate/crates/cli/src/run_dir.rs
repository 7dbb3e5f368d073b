//! File layout of a run directory and the reproducibility manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG: &str = "config.resolved.toml";
pub const MANIFEST: &str = "manifest.json";
pub const SOURCE_VOCAB: &str = "vocab_source.txt";
pub const GLOSS_VOCAB: &str = "vocab_gloss.txt";
pub const PRIOR_DB: &str = "prior_db.json";
pub const TRAIN: &str = "train.jsonl";
pub const DEV: &str = "dev.jsonl";
pub const TEST: &str = "test.jsonl";
pub const SLUL: &str = "slul.ckpt";
pub const SLUL_NO_SAGM: &str = "slul_no_sagm.ckpt";
pub const SLUL_LOG: &str = "slul_loss.jsonl";
pub const SLUL_NO_SAGM_LOG: &str = "slul_no_sagm_loss.jsonl";
pub const GATE: &str = "gate.ckpt";
pub const GATE_NO_SAGM: &str = "gate_no_sagm.ckpt";
pub const GATE_LOG: &str = "gate_loss.jsonl";
pub const REPORT: &str = "eval_report.json";
pub const TABLE: &str = "eval_table.md";

pub fn slul_snapshot(steps: usize) -> String {
    format!("slul_step{steps}.ckpt")
}

pub fn gate_snapshot(steps: usize) -> String {
    format!("gate_step{steps}.ckpt")
}

#[derive(Default, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    /// File name relative to the run directory, then its SHA-256.
    files: BTreeMap<String, String>,
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        RunDir { root }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Contents of `name`, or a missing-artifact error naming it.
    pub fn read(&self, name: &str) -> Result<String, CliError> {
        read_file(&self.path(name))
    }

    /// Writes every file, then records their hashes in the manifest.
    pub fn write_all(&self, seed: u64, files: &[(String, String)]) -> Result<(), CliError> {
        let mut manifest: Manifest = match fs::read_to_string(self.path(MANIFEST)) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{MANIFEST}: {e}")))?,
            Err(_) => Manifest::default(),
        };
        manifest.seed = seed;
        for (name, body) in files {
            let path = self.path(name);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
            manifest.files.insert(name.clone(), hex(&Sha256::digest(body.as_bytes())));
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises") + "\n";
        fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        fs::write(self.path(MANIFEST), text).map_err(|e| CliError::io(self.path(MANIFEST), e))
    }
}

pub fn read_file(path: &Path) -> Result<String, CliError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::Missing(path.to_path_buf())),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
