use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{combined_graph, read_parts, LossWeights, MaskPlan};
use super::model::SlulParams;
use super::SlulError;
use crate::corpus::GlossExample;
use crate::diffkit::{Adam, Graph, OptConfig, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_slul: f64,
    pub l_sagm: f64,
    pub l_kl: f64,
    pub l_con: f64,
    pub combined: f64,
}

#[derive(Clone, Debug)]
pub struct SlulTraining {
    pub params: SlulParams,
    pub log: Vec<LossRecord>,
    /// `(steps completed, weights)` for every requested snapshot step.
    pub snapshots: Vec<(usize, SlulParams)>,
}

/// Steps at 25 %, 50 %, 75 % and 100 % of `steps`.
pub fn quarter_steps(steps: usize) -> Vec<usize> {
    (1..=4).map(|q| steps * q / 4).collect()
}

/// Epoch-shuffled minibatch order, seeded.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub(crate) fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub fn train_slul(
    train: &[GlossExample],
    init: SlulParams,
    weights: &LossWeights,
    opt: &OptConfig,
    snapshot_at: &[usize],
) -> Result<SlulTraining, SlulError> {
    weights.validate()?;
    if train.is_empty() && opt.steps > 0 {
        return Err(SlulError::InvalidArgument("empty training set".into()));
    }
    if opt.batch_size == 0 {
        return Err(SlulError::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut params = init;
    let mut adam = Adam::new(opt.clone(), params.tensors().iter().map(Tensor::shape));
    let mut batcher = Batcher::new(train.len(), opt.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5a5a_5a5a);
    let mut log = Vec::with_capacity(opt.steps);
    let mut snapshots = Vec::new();
    if snapshot_at.contains(&0) {
        snapshots.push((0, params.clone()));
    }
    for step in 0..opt.steps {
        let batch: Vec<GlossExample> = batcher
            .next(opt.batch_size)
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        let plan = MaskPlan::draw(&params, &batch, weights.rho, &mut mask_rng)?;
        let (parts, grads) = {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let nodes = combined_graph(&mut g, &b, &batch, &plan, weights)?;
            let parts = read_parts(&g, &nodes, Vec::new());
            if !parts.combined.is_finite() {
                return Err(SlulError::Diverged { step });
            }
            g.backward(nodes.combined)?;
            let grads: Vec<Tensor> = params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    g.take_grad(b.vars()[i])
                        .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
                })
                .collect();
            (parts, grads)
        };
        let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
        let norm = adam.step(&mut refs, &grads);
        if !norm.is_finite() || !params.is_finite() {
            return Err(SlulError::Diverged { step });
        }
        log.push(LossRecord {
            step,
            l_slul: parts.l_slul,
            l_sagm: parts.l_sagm,
            l_kl: parts.l_kl,
            l_con: parts.l_con,
            combined: parts.combined,
        });
        if step % 250 == 0 {
            log::info!(
                "slul step {step}: combined {:.4} (nll {:.4}, sagm {:.4}, kl {:.4}, con {:.4})",
                parts.combined,
                parts.l_slul,
                parts.l_sagm,
                parts.l_kl,
                parts.l_con
            );
        }
        if snapshot_at.contains(&(step + 1)) {
            snapshots.push((step + 1, params.clone()));
        }
    }
    Ok(SlulTraining {
        params,
        log,
        snapshots,
    })
}

/// Loss log as JSON lines.
pub fn log_to_jsonl(log: &[LossRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect()
}
