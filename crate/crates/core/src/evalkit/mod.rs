//! Sequence metrics and the retrieval back-translation oracle.

mod text;

pub use text::{bleu, corpus_bleu, lcs_len, rouge_l, BleuCounts, Smoothing};

use serde::{Deserialize, Serialize};

use crate::corpus::{PosePriorDb, PoseSequence, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Dynamic time warping with Euclidean frame cost, both ends aligned and steps
/// `(1,0)`, `(0,1)`, `(1,1)`. Returns the accumulated cost.
pub fn dtw(a: &PoseSequence, b: &PoseSequence) -> Result<f64, EvalError> {
    if a.joints() != b.joints() || a.hand_idx() != b.hand_idx() {
        return Err(EvalError::Shape(format!(
            "{} vs {} joints",
            a.joints(),
            b.joints()
        )));
    }
    Ok(dtw_frames(a, b, f64::INFINITY))
}

/// DTW that gives up (returning infinity) once every cell of a row exceeds `bound`.
fn dtw_frames(a: &PoseSequence, b: &PoseSequence, bound: f64) -> f64 {
    let (n, m) = (a.frames(), b.frames());
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for i in 0..n {
        let fa = a.frame(i);
        let mut row_min = f64::INFINITY;
        for j in 0..m {
            let c = frame_distance(fa, b.frame(j));
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = prev[j];
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = c + best;
            row_min = row_min.min(cur[j]);
        }
        if row_min > bound {
            return f64::INFINITY;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Splits `pose` into `segment_len`-frame pieces and names each by its nearest
/// database variant under DTW. A trailing remainder shorter than half a
/// segment is dropped; a longer one is padded with its last frame. Exact ties
/// go to the lexicographically smallest gloss.
pub fn back_translate(
    pose: &PoseSequence,
    db: &PosePriorDb,
    vocab: &Vocab,
    segment_len: usize,
) -> Result<Vec<TokenId>, EvalError> {
    if db.is_empty() {
        return Err(EvalError::Empty("pose prior database".into()));
    }
    if segment_len == 0 {
        return Err(EvalError::InvalidArgument("segment_len must be >= 1".into()));
    }
    if pose.joints() != db.joints() || pose.hand_idx() != db.hand_idx() {
        return Err(EvalError::Shape("pose skeleton differs from the database".into()));
    }
    let candidates: Vec<(&str, PoseSequence)> = db
        .iter()
        .flat_map(|(g, vs)| vs.iter().map(move |v| (g, v)))
        .map(|(g, v)| Ok((g, v.resample(segment_len).map_err(|e| EvalError::Shape(e.to_string()))?)))
        .collect::<Result<_, EvalError>>()?;
    let mut out = Vec::new();
    let full = pose.frames() / segment_len;
    let rem = pose.frames() % segment_len;
    let pieces = full + usize::from(rem > 0 && 2 * rem >= segment_len);
    for s in 0..pieces {
        let start = s * segment_len;
        let end = (start + segment_len).min(pose.frames());
        let mut seg = pose.slice(start, end).map_err(|e| EvalError::Shape(e.to_string()))?;
        if seg.frames() < segment_len {
            let last = seg.frame(seg.frames() - 1).to_vec();
            let pad = PoseSequence::constant(segment_len - seg.frames(), &last, seg.hand_idx().to_vec())
                .map_err(|e| EvalError::Shape(e.to_string()))?;
            seg = PoseSequence::concat(&[seg, pad]).map_err(|e| EvalError::Shape(e.to_string()))?;
        }
        // Candidates iterate in lexicographic gloss order, so strict `<` keeps
        // the smallest gloss on ties.
        let mut best: Option<(&str, f64)> = None;
        for (g, v) in &candidates {
            let bound = best.map_or(f64::INFINITY, |b| b.1);
            let d = dtw_frames(&seg, v, bound);
            if best.map_or(true, |b| d < b.1) {
                best = Some((g, d));
            }
        }
        let (g, _) = best.expect("non-empty database");
        out.push(vocab.id(g).ok_or_else(|| EvalError::InvalidArgument(format!("gloss {g:?} missing from vocab")))?);
    }
    Ok(out)
}

/// Aggregate scores over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// BLEU-1 through BLEU-4.
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    /// Mean DTW between produced and reference poses.
    pub dtw: f64,
    pub n: usize,
    /// Fraction of decoded glosses equal to the reference.
    pub gloss_exact: f64,
    /// Fraction of examples whose chosen expert equals the reference index.
    pub gate_accuracy: f64,
}

/// One row per approach, columns as in the ablation table.
pub fn report_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("| Approach | BLEU-4 | BLEU-3 | BLEU-2 | BLEU-1 | ROUGE |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "| {name} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            100.0 * r.bleu[3],
            100.0 * r.bleu[2],
            100.0 * r.bleu[1],
            100.0 * r.bleu[0],
            100.0 * r.rouge_l
        ));
    }
    out
}
