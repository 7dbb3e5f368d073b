use serde::{Deserialize, Serialize};

use super::{GateParams, MoeError, MoeWeights};
use crate::diffkit::{Adam, Graph, OptConfig, Tensor, Var};
use crate::slul::Batcher;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub step: usize,
    pub l_moe: f64,
    pub l_ent: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct GateTraining {
    pub params: GateParams,
    pub log: Vec<GateRecord>,
}

/// Batch means of `l_moe` and `l_ent` and the minimised objective
/// `lambda_moe * l_moe - entropy_bonus * l_ent`.
pub fn gate_objective_graph(
    g: &mut Graph<'_>,
    w: Var,
    x: Tensor,
    y: &[usize],
    weights: &MoeWeights,
) -> Result<(Var, Var, Var), MoeError> {
    if x.rows() != y.len() || y.is_empty() {
        return Err(MoeError::InvalidArgument("one label per query row required".into()));
    }
    let xv = g.constant(x);
    let z = g.matmul(xv, w)?;
    let inv = 1.0 / y.len() as f64;
    let l_moe = g.cross_entropy(z, y, &vec![inv; y.len()])?;
    let l_ent = g.softmax_entropy(z);
    let obj = g.weighted_sum(&[(weights.lambda_moe, l_moe), (-weights.entropy_bonus, l_ent)])?;
    Ok((l_moe, l_ent, obj))
}

/// Fits the gate to `(q, y)` pairs from a frozen encoder.
pub fn train_gate(
    data: &[(Vec<f64>, usize)],
    init: GateParams,
    weights: &MoeWeights,
    opt: &OptConfig,
) -> Result<GateTraining, MoeError> {
    if ![weights.lambda_moe, weights.entropy_bonus].iter().all(|v| v.is_finite() && *v >= 0.0) {
        return Err(MoeError::InvalidArgument("gate loss weights must be finite and >= 0".into()));
    }
    if opt.steps > 0 && data.is_empty() {
        return Err(MoeError::InvalidArgument("no gate training data".into()));
    }
    if opt.batch_size == 0 {
        return Err(MoeError::InvalidArgument("batch_size must be >= 1".into()));
    }
    let (d, k) = (init.dim(), init.experts());
    if let Some((q, y)) = data.iter().find(|(q, y)| q.len() != d || *y >= k) {
        return Err(MoeError::InvalidArgument(format!(
            "query of length {} or label {y} does not fit a {d}x{k} gate",
            q.len()
        )));
    }
    let mut params = init;
    let mut adam = Adam::new(opt.clone(), [params.w.shape()]);
    let mut batcher = Batcher::new(data.len(), opt.seed);
    let mut log = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let idx = batcher.next(opt.batch_size.min(data.len()));
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data[i].0.clone()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
        let x = Tensor::from_rows(&rows)?;
        let (rec, grad) = {
            let mut g = Graph::new();
            let w = g.param(&params.w);
            let (l_moe, l_ent, obj) = gate_objective_graph(&mut g, w, x, &y, weights)?;
            let rec = GateRecord {
                step,
                l_moe: g.value(l_moe).item(),
                l_ent: g.value(l_ent).item(),
                objective: g.value(obj).item(),
            };
            if !rec.objective.is_finite() {
                return Err(MoeError::Diverged { step });
            }
            g.backward(obj)?;
            (rec, g.take_grad(w).unwrap_or_else(|| Tensor::zeros(d, k)))
        };
        adam.step(&mut [&mut params.w], &[grad]);
        if !params.w.is_finite() {
            return Err(MoeError::Diverged { step });
        }
        log.push(rec);
    }
    Ok(GateTraining { params, log })
}
