//! Text container for named parameter arrays.
//!
//! ```text
//! signer-checkpoint 1
//! kind slul
//! meta d_model 64
//! tensor enc.attn.q 64 64
//! <one line per row, values in shortest round-trip exponent form>
//! end
//! ```
//!
//! Values are written with `{:e}`, which Rust guarantees to parse back to the
//! identical `f64`, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::diffkit::Tensor;

const MAGIC: &str = "signer-checkpoint 1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("checkpoint line {line}: {msg}")]
pub struct CheckpointError {
    pub line: usize,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError {
                line: 0,
                msg: format!("missing or malformed meta {key:?}"),
            })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "kind {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for (name, t) in &self.tensors {
            let _ = writeln!(out, "tensor {name} {} {}", t.rows(), t.cols());
            for r in 0..t.rows() {
                let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CheckpointError> {
        let err = |line: usize, msg: String| CheckpointError { line: line + 1, msg };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(err(0, format!("expected header {MAGIC:?}"))),
        }
        let kind = match lines.next() {
            Some((_, l)) if l.starts_with("kind ") => l[5..].to_string(),
            _ => return Err(err(1, "expected kind line".into())),
        };
        let mut ck = Self::new(&kind);
        loop {
            let Some((i, line)) = lines.next() else {
                return Err(err(usize::MAX - 1, "missing end marker".into()));
            };
            let mut parts = line.split(' ');
            match parts.next() {
                Some("end") => break,
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| err(i, "meta without key".into()))?;
                    let value = parts.collect::<Vec<_>>().join(" ");
                    ck.meta.insert(key.to_string(), value);
                }
                Some("tensor") => {
                    let fields: Vec<&str> = parts.collect();
                    let [name, rows, cols] = fields[..] else {
                        return Err(err(i, "tensor line needs name rows cols".into()));
                    };
                    let rows: usize = rows.parse().map_err(|_| err(i, "bad row count".into()))?;
                    let cols: usize = cols.parse().map_err(|_| err(i, "bad column count".into()))?;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (j, row) = lines.next().ok_or_else(|| err(i, "truncated tensor".into()))?;
                        let before = data.len();
                        for v in row.split_whitespace() {
                            data.push(v.parse::<f64>().map_err(|_| err(j, format!("bad value {v:?}")))?);
                        }
                        if data.len() - before != cols {
                            return Err(err(j, format!("expected {cols} values")));
                        }
                    }
                    let t = Tensor::from_vec(rows, cols, data).map_err(|e| err(i, e.to_string()))?;
                    ck.tensors.push((name.to_string(), t));
                }
                _ => return Err(err(i, format!("unexpected line {line:?}"))),
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let awkward = vec![0.1, -0.0, 1e-300, f64::MAX, 1.0 / 3.0, -2.5e17];
        let mut ck = Checkpoint::new("test").with_meta("d_model", 64);
        ck.tensors.push(("w".into(), Tensor::from_vec(2, 3, awkward).unwrap()));
        ck.tensors.push(("b".into(), Tensor::row_vector(vec![7.0])));
        let text = ck.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back.to_text(), text);
        for ((_, a), (_, b)) in ck.tensors.iter().zip(&back.tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.meta_parse::<usize>("d_model").unwrap(), 64);
    }

    #[test]
    fn rejects_damage() {
        let mut ck = Checkpoint::new("test");
        ck.tensors.push(("w".into(), Tensor::zeros(2, 2)));
        let text = ck.to_text();
        assert!(Checkpoint::from_text(&text.replace("signer-checkpoint 1", "other 1")).is_err());
        assert!(Checkpoint::from_text(&text.replace("end\n", "")).is_err());
        let short = text.replacen("0e0 0e0\n", "0e0\n", 1);
        assert!(Checkpoint::from_text(&short).is_err());
    }
}
