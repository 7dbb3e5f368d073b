//! Central finite-difference checker for graph-built scalar functions.

use super::{DiffError, Graph, Tensor, Var};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Magnitudes below this are compared absolutely rather than relatively.
/// Gradient entries of order 1e-6 carry finite-difference noise far above
/// 1e-4 relative error, so the denominator is floored here.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, for every element of every input tensor.
///
/// `f` receives a fresh graph and the input leaves in order, and returns the
/// scalar loss node. It must be a pure function of the input values.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, DiffError>,
{
    let analytic = evaluate_with_grads(inputs, &f)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = evaluate(&work, &f)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = evaluate(&work, &f)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[ei];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

fn evaluate_with_grads<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>, DiffError>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn assert_passes(report: GradCheckReport) {
        assert!(
            report.passes(1e-4),
            "max rel err {} (abs {}) at {:?}",
            report.max_rel_err,
            report.max_abs_err,
            report.worst
        );
    }

    #[test]
    fn every_op_passes_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..6 {
            let m = 2 + trial % 3;
            let n = 4;
            let inputs = vec![
                random(&mut rng, m, n),
                random(&mut rng, n, n),
                random(&mut rng, 1, n),
                random(&mut rng, 1, n),
                random(&mut rng, 5, n),
            ];
            let causal = trial % 2 == 0;
            let targets: Vec<usize> = (0..m).map(|i| (i * 3 + trial) % n).collect();
            let weights: Vec<f64> = (0..m).map(|i| 0.5 + i as f64).collect();
            let target_log = {
                let t = random(&mut rng, m, n);
                crate::diffkit::functional::log_softmax_rows(&t)
            };
            let report = check_gradients(
                &inputs,
                |g, v| {
                    let emb = g.gather(v[4], &[0, 3, 1, 4, 2][..m])?;
                    let x = g.add(v[0], emb)?;
                    let h = g.layer_norm(x, v[2], v[3])?;
                    let q = g.matmul(h, v[1])?;
                    let a = g.attention(q, h, x, 2, causal)?;
                    let a = g.add_row(a, v[3])?;
                    let a = g.gelu(a);
                    let ce = g.cross_entropy(a, &targets, &weights)?;
                    let kl = g.kl_to_target(a, target_log.clone(), &weights)?;
                    let ent = g.softmax_entropy(a);
                    let pooled = g.mean_rows(a)?;
                    let sq = g.sum_squares(pooled);
                    let half = g.scale(x, 0.5);
                    let nce = g.info_nce(a, half, 0.3)?;
                    g.weighted_sum(&[(1.0, ce), (0.7, kl), (-0.3, ent), (0.2, sq), (0.4, nce)])
                },
                FD_STEP,
            )
            .unwrap();
            assert_passes(report);
        }
    }

    #[test]
    fn info_nce_with_small_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4)];
        let report = check_gradients(
            &inputs,
            |g, v| {
                let rows: Vec<Var> = (0..3)
                    .map(|_| g.mean_rows(v[0]))
                    .collect::<Result<_, _>>()?;
                let stacked = g.stack_rows(&rows)?;
                let x = g.add(stacked, v[0])?;
                g.info_nce(x, v[1], 0.07)
            },
            FD_STEP,
        )
        .unwrap();
        assert_passes(report);
    }
}
