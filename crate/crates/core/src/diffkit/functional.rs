//! Stateless numeric kernels shared by the graph ops and by callers that only
//! need values.

use super::{DiffError, Tensor};

/// Log of the sum of exponentials, evaluated with max subtraction.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn check_finite(values: &[f64]) -> Result<(), DiffError> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite(format!("softmax input contains {v}")));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, DiffError> {
    check_finite(logits)?;
    Ok(softmax_unchecked(logits))
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>, DiffError> {
    check_finite(logits)?;
    Ok(log_softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub(crate) fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|v| v - lse).collect()
}

/// Row-wise log-softmax of a matrix.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = log_softmax_unchecked(logits.row(r));
        out.row_mut(r).copy_from_slice(&row);
    }
    out
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64, DiffError> {
    check_finite(logits)?;
    if target >= logits.len() {
        return Err(DiffError::Shape(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(logsumexp(logits) - logits[target])
}

/// Arithmetic mean over the rows of an `L×d` matrix.
pub fn mean_pool(states: &Tensor) -> Result<Vec<f64>, DiffError> {
    if states.rows() == 0 {
        return Err(DiffError::Shape("mean_pool over zero rows".into()));
    }
    let mut out = vec![0.0; states.cols()];
    for r in 0..states.rows() {
        for (o, v) in out.iter_mut().zip(states.row(r)) {
            *o += v;
        }
    }
    let n = states.rows() as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Mean over rows `i` of `-log softmax_j(<x_i, g_j> / tau)[i]`.
pub fn info_nce(x: &Tensor, g: &Tensor, tau: f64) -> Result<f64, DiffError> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(DiffError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if x.shape() != g.shape() || x.rows() == 0 {
        return Err(DiffError::Shape(format!(
            "info_nce needs matching non-empty batches, got {:?} and {:?}",
            x.shape(),
            g.shape()
        )));
    }
    let mut sims = x.matmul(&g.transpose())?;
    sims.scale(1.0 / tau);
    let b = sims.rows();
    let total: f64 = (0..b).map(|i| logsumexp(sims.row(i)) - sims.get(i, i)).sum();
    Ok(total / b as f64)
}

/// Shannon entropy `-Σ p log p` with `0 log 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `KL(p ‖ q) = Σ p (log p − log q)`, skipping zero-mass entries of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
