use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use signer_core::checkpoint::Checkpoint;
use signer_core::config::RunConfig;
use signer_core::corpus::{language_tag, read_corpus, write_corpus, PosePriorDb, Vocab, Vocabularies};
use signer_core::evalkit::report_table;
use signer_core::pipeline::{
    build_dataset, parse_prompt, run_study, run_tokens, snapshot_gate_steps, train_gate_stage, train_slul_stage,
    without_sagm, Dataset, Models, PipelineError, TrainedSet,
};
use signer_core::slp_moe::{GateParams, GateRecord};
use signer_core::slul::{log_to_jsonl, quarter_steps, SlulParams};
use signer_core::stabilizer::{jerk_report, pose_from_json, pose_to_json, report_to_json, stabilize as solve};

use crate::run_dir::{self as names, read_file, RunDir};
use crate::{CliError, Common};

type Files = Vec<(String, String)>;

/// Config from `--config` (or defaults) with the flag overrides applied.
fn requested(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_toml(&read_file(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.to_string_lossy().into_owned();
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn run_dir(common: &Common) -> Result<RunDir, CliError> {
    Ok(RunDir::new(requested(common)?.out_dir.into()))
}

/// The configuration recorded by `gen-corpus`. Explicit `--config` or
/// `--seed` flags must agree with it.
fn stored(common: &Common) -> Result<(RunConfig, RunDir), CliError> {
    let req = requested(common)?;
    let dir = RunDir::new(req.out_dir.clone().into());
    let text = dir.read(names::CONFIG)?;
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| CliError::Format(format!("{}: {e}", names::CONFIG)))?;
    cfg.out_dir = req.out_dir.clone();
    if (common.config.is_some() || common.seed.is_some()) && req.resolved() != cfg {
        return Err(CliError::Usage(format!(
            "requested config differs from {}; generate a fresh run directory instead",
            dir.path(names::CONFIG).display()
        )));
    }
    Ok((cfg, dir))
}

fn load_vocabs(dir: &RunDir) -> Result<Vocabularies, CliError> {
    let vocab = |name| Vocab::from_text(&dir.read(name)?).map_err(|e| CliError::Format(format!("{name}: {e}")));
    Ok(Vocabularies {
        source: vocab(names::SOURCE_VOCAB)?,
        gloss: vocab(names::GLOSS_VOCAB)?,
    })
}

fn load_db(dir: &RunDir, vocabs: &Vocabularies) -> Result<PosePriorDb, CliError> {
    let db = PosePriorDb::from_json(&dir.read(names::PRIOR_DB)?).map_err(|e| CliError::Format(format!("{}: {e}", names::PRIOR_DB)))?;
    db.check_against(&vocabs.gloss).map_err(|e| CliError::Format(format!("{}: {e}", names::PRIOR_DB)))?;
    Ok(db)
}

fn load_data(dir: &RunDir) -> Result<Dataset, CliError> {
    let vocabs = load_vocabs(dir)?;
    let db = load_db(dir, &vocabs)?;
    let split = |name| read_corpus(&dir.read(name)?, &vocabs).map_err(|e| CliError::Format(format!("{name}: {e}")));
    let (train, dev, test) = (split(names::TRAIN)?, split(names::DEV)?, split(names::TEST)?);
    Ok(Dataset {
        vocabs,
        db,
        train,
        dev,
        test,
    })
}

fn checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::from_text(&read_file(path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn load_slul(path: &Path) -> Result<SlulParams, CliError> {
    SlulParams::from_checkpoint(&checkpoint(path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn load_gate(path: &Path) -> Result<GateParams, CliError> {
    GateParams::from_checkpoint(&checkpoint(path)?).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serialises") + "\n"
}

fn gate_log(log: &[GateRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).expect("record serialises") + "\n").collect()
}

pub fn gen_corpus(common: &Common) -> Result<(), CliError> {
    let cfg = requested(common)?.resolved();
    let dir = RunDir::new(cfg.out_dir.clone().into());
    let data = build_dataset(&cfg)?;
    // The recorded config refers to its own directory so a run can be moved.
    let recorded = RunConfig {
        out_dir: ".".into(),
        ..cfg.clone()
    };
    let files: Files = vec![
        (names::CONFIG.into(), recorded.to_toml()),
        (names::SOURCE_VOCAB.into(), data.vocabs.source.to_text()),
        (names::GLOSS_VOCAB.into(), data.vocabs.gloss.to_text()),
        (names::PRIOR_DB.into(), data.db.to_json()),
        (names::TRAIN.into(), write_corpus(&data.train, &data.vocabs)),
        (names::DEV.into(), write_corpus(&data.dev, &data.vocabs)),
        (names::TEST.into(), write_corpus(&data.test, &data.vocabs)),
    ];
    dir.write_all(cfg.seed, &files)?;
    println!(
        "wrote {} train / {} dev / {} test examples over {} glosses to {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        data.vocabs.gloss.lexicon().len(),
        dir.root().display()
    );
    Ok(())
}

pub fn train_slul(common: &Common) -> Result<(), CliError> {
    let (cfg, dir) = stored(common)?;
    let data = load_data(&dir)?;
    info!("training SLUL for {} steps", cfg.slul_opt.steps);
    let full = train_slul_stage(&cfg, &data, &cfg.loss, true)?;
    let mut files: Files = vec![
        (names::SLUL.into(), full.params.to_checkpoint().to_text()),
        (names::SLUL_LOG.into(), log_to_jsonl(&full.log)),
    ];
    for (steps, p) in &full.snapshots {
        files.push((names::slul_snapshot(*steps), p.to_checkpoint().to_text()));
    }
    if let Some(last) = full.log.last() {
        println!("SLUL step {}: combined loss {:.4}", last.step, last.combined);
    }
    if cfg.eval.ablations {
        info!("training the no-SAGM ablation");
        let plain = train_slul_stage(&cfg, &data, &without_sagm(&cfg.loss), false)?;
        files.push((names::SLUL_NO_SAGM.into(), plain.params.to_checkpoint().to_text()));
        files.push((names::SLUL_NO_SAGM_LOG.into(), log_to_jsonl(&plain.log)));
    }
    dir.write_all(cfg.seed, &files)
}

pub fn train_moe(common: &Common, slul_path: Option<&Path>) -> Result<(), CliError> {
    let dir = run_dir(common)?;
    let slul_path = slul_path.map(Path::to_path_buf).unwrap_or_else(|| dir.path(names::SLUL));
    if !slul_path.is_file() {
        return Err(CliError::Missing(slul_path));
    }
    let (cfg, dir) = stored(common)?;
    let slul = load_slul(&slul_path)?;
    let data = load_data(&dir)?;
    info!("training the gate for {} steps", cfg.gate_opt.steps);
    let full = train_gate_stage(&cfg, &data, &slul, None)?;
    let mut files: Files = vec![
        (names::GATE.into(), full.params.to_checkpoint().to_text()),
        (names::GATE_LOG.into(), gate_log(&full.log)),
    ];
    let total = cfg.slul_opt.steps;
    for steps in quarter_steps(total) {
        let snap = load_slul(&dir.path(&names::slul_snapshot(steps)))?;
        let g = train_gate_stage(&cfg, &data, &snap, Some(snapshot_gate_steps(&cfg, steps, total)))?;
        files.push((names::gate_snapshot(steps), g.params.to_checkpoint().to_text()));
    }
    if cfg.eval.ablations {
        let plain = load_slul(&dir.path(names::SLUL_NO_SAGM))?;
        let g = train_gate_stage(&cfg, &data, &plain, None)?;
        files.push((names::GATE_NO_SAGM.into(), g.params.to_checkpoint().to_text()));
    }
    if let Some(last) = full.log.last() {
        println!("gate step {}: l_moe {:.4}, l_ent {:.4}", last.step, last.l_moe, last.l_ent);
    }
    dir.write_all(cfg.seed, &files)
}

pub fn eval(common: &Common) -> Result<(), CliError> {
    let (cfg, dir) = stored(common)?;
    let slul = load_slul(&dir.path(names::SLUL))?;
    let gate = load_gate(&dir.path(names::GATE))?;
    let snapshots = quarter_steps(cfg.slul_opt.steps)
        .into_iter()
        .map(|s| {
            Ok((
                s,
                load_slul(&dir.path(&names::slul_snapshot(s)))?,
                load_gate(&dir.path(&names::gate_snapshot(s)))?,
            ))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let no_sagm = if cfg.eval.ablations {
        Some((load_slul(&dir.path(names::SLUL_NO_SAGM))?, load_gate(&dir.path(names::GATE_NO_SAGM))?))
    } else {
        None
    };
    let data = load_data(&dir)?;
    let set = TrainedSet {
        slul,
        gate,
        no_sagm,
        snapshots,
    };
    let study = run_study(&cfg, &data, &set)?;
    let table = report_table(&study.rows);
    print!("{table}");
    for (steps, r) in &study.trend {
        println!("DTW after {steps} steps: {:.4}", r.dtw);
    }
    println!("noise study jerk ratio (max): {:.4}", study.noise.max_ratio);
    dir.write_all(cfg.seed, &[(names::REPORT.into(), json(&study)), (names::TABLE.into(), table)])
}

pub fn stabilize(common: &Common, input: &Path) -> Result<(), CliError> {
    let dir = run_dir(common)?;
    let cfg = if dir.exists(names::CONFIG) { stored(common)?.0 } else { requested(common)? };
    let pose = pose_from_json(&read_file(input)?).map_err(|e| CliError::Format(format!("{}: {e}", input.display())))?;
    let out = solve(&pose, None, &cfg.stabilizer).map_err(PipelineError::from)?;
    let jerk = jerk_report(&pose, &out.poses).map_err(PipelineError::from)?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "pose".into());
    println!("jerk {:.6} -> {:.6} (ratio {:.4})", jerk.jerk_before, jerk.jerk_after, jerk.ratio);
    dir.write_all(
        cfg.seed,
        &[
            (format!("stabilize/{stem}.stabilized.json"), pose_to_json(&out.poses)),
            (format!("stabilize/{stem}.report.json"), report_to_json(&out)),
            (format!("stabilize/{stem}.jerk.json"), json(&jerk)),
        ],
    )
}

#[derive(Serialize)]
struct GateFile<'a> {
    lang: String,
    tagged: bool,
    gates: &'a [f64],
    chosen: usize,
}

pub fn pipeline(common: &Common, prompt: &str, slul_path: Option<&Path>) -> Result<(), CliError> {
    let (cfg, dir) = stored(common)?;
    let slul_path = slul_path.map(Path::to_path_buf).unwrap_or_else(|| dir.path(names::SLUL));
    let slul = load_slul(&slul_path)?;
    let gate = load_gate(&dir.path(names::GATE))?;
    let vocabs = load_vocabs(&dir)?;
    let db = load_db(&dir, &vocabs)?;
    let (lang, tokens, tagged) = parse_prompt(&vocabs, cfg.corpus.experts, prompt)?;
    if !tagged {
        warn!("prompt has no language tag; assuming {}", language_tag(0));
    }
    let m = Models {
        slul: &slul,
        gate: Some(&gate),
        vocabs: &vocabs,
        db: &db,
    };
    let out = run_tokens(&m, lang, &tokens, &cfg.eval, &cfg.stabilizer)?;
    let gloss = vocabs.gloss.detokenize(&out.gloss);
    println!("gloss: {gloss}");
    println!("chosen expert: {} {}", out.chosen, language_tag(out.chosen));
    println!("gates: {:?}", out.gates);
    println!("jerk ratio: {:.4}", out.jerk.ratio);
    let gates = GateFile {
        lang: vocabs.source.detokenize(&[lang]),
        tagged,
        gates: &out.gates,
        chosen: out.chosen,
    };
    dir.write_all(
        cfg.seed,
        &[
            ("pipeline/gloss.txt".into(), gloss + "\n"),
            ("pipeline/gates.json".into(), json(&gates)),
            ("pipeline/raw_pose.json".into(), pose_to_json(&out.raw)),
            ("pipeline/stabilized_pose.json".into(), pose_to_json(&out.stabilized.poses)),
            ("pipeline/stabilized_report.json".into(), report_to_json(&out.stabilized)),
            ("pipeline/jerk.json".into(), json(&out.jerk)),
        ],
    )
}
