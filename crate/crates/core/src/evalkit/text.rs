use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// A zero match count at order n ≥ 2 becomes `1 / (c_n + 1)`.
    #[default]
    AddOne,
    /// The k-th zero-count order scores `1 / (2^k c_n)`.
    NistExp,
}

/// Clipped n-gram matches and totals for orders 1..4, plus lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BleuCounts {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub cand_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuCounts {
    pub fn new(candidate: &[TokenId], references: &[Vec<TokenId>]) -> Self {
        let mut c = Self {
            cand_len: candidate.len(),
            ..Self::default()
        };
        // Closest reference length; the shorter one on ties.
        c.ref_len = references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(candidate.len()), r))
            .unwrap_or(0);
        for n in 1..=4 {
            let cand = ngram_counts(candidate, n);
            let mut max_ref: HashMap<&[TokenId], usize> = HashMap::new();
            for r in references {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            c.matches[n - 1] = cand
                .iter()
                .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            c.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        c
    }

    pub fn add(&mut self, o: &BleuCounts) {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU-1..4. Orders with no candidate n-grams are left out of the
    /// geometric mean, so a two-token exact match scores 1 at every order.
    pub fn scores(&self, smoothing: Smoothing) -> [f64; 4] {
        let mut out = [0.0; 4];
        if self.cand_len == 0 {
            return out;
        }
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        let mut precisions = [0.0; 4];
        let mut zeros = 0;
        for i in 0..4 {
            let (m, c) = (self.matches[i], self.totals[i]);
            precisions[i] = if c == 0 {
                f64::NAN
            } else if m > 0 {
                m as f64 / c as f64
            } else {
                match smoothing {
                    Smoothing::None => 0.0,
                    Smoothing::AddOne if i >= 1 => 1.0 / (c as f64 + 1.0),
                    Smoothing::AddOne => 0.0,
                    Smoothing::NistExp => {
                        zeros += 1;
                        1.0 / (2f64.powi(zeros) * c as f64)
                    }
                }
            };
        }
        for n in 1..=4 {
            let used: Vec<f64> = precisions[..n].iter().copied().filter(|p| !p.is_nan()).collect();
            out[n - 1] = if used.iter().any(|&p| p == 0.0) {
                0.0
            } else {
                bp * (used.iter().map(|p| p.ln()).sum::<f64>() / used.len() as f64).exp()
            };
        }
        out
    }
}

/// Sentence-level BLEU-1..4 of `candidate` against `references`.
pub fn bleu(candidate: &[TokenId], references: &[Vec<TokenId>], smoothing: Smoothing) -> Result<[f64; 4], EvalError> {
    if candidate.is_empty() {
        return Err(EvalError::Empty("BLEU candidate".into()));
    }
    if references.is_empty() {
        return Err(EvalError::Empty("BLEU references".into()));
    }
    Ok(BleuCounts::new(candidate, references).scores(smoothing))
}

/// Corpus-level BLEU from summed counts. Empty candidates count as zero length.
pub fn corpus_bleu(pairs: &[(Vec<TokenId>, Vec<Vec<TokenId>>)], smoothing: Smoothing) -> [f64; 4] {
    let mut total = BleuCounts::default();
    for (c, refs) in pairs {
        total.add(&BleuCounts::new(c, refs));
    }
    total.scores(smoothing)
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure, `F = (1+β²)PR / (R + β²P)`. Zero when either side is empty.
pub fn rouge_l(candidate: &[TokenId], reference: &[TokenId], beta: f64) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}
