//! Gated selection over pose-prior experts.

mod train;

pub use train::{gate_objective_graph, train_gate, GateRecord, GateTraining};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{CorpusError, PosePriorDb, PoseSequence, TokenId, Vocab};
use crate::diffkit::{argmax, entropy, mean_pool, softmax, DiffError, Tensor};
use crate::slul::{encode, SlulError, SlulParams};

/// Floor applied to `w_y` before taking the log in the selection loss.
pub const GATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MoeError {
    #[error("gloss {0:?} has no entry in the pose prior database")]
    UnknownGloss(String),
    #[error("gloss id {0} is not in the vocabulary")]
    UnknownId(TokenId),
    #[error("empty gloss sequence")]
    EmptyGloss,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("gate training diverged at step {step}")]
    Diverged { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Slul(#[from] SlulError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeWeights {
    pub lambda_moe: f64,
    /// Weight of the gate entropy as a bonus: the trainer minimises
    /// `lambda_moe * l_moe - entropy_bonus * l_ent`.
    pub entropy_bonus: f64,
}

impl Default for MoeWeights {
    fn default() -> Self {
        Self {
            lambda_moe: 1.0,
            entropy_bonus: 0.01,
        }
    }
}

/// `W`, one column per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w: Tensor,
}

impl GateParams {
    pub fn zeros(d: usize, k: usize) -> Self {
        Self { w: Tensor::zeros(d, k) }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn experts(&self) -> usize {
        self.w.cols()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("gate")
            .with_meta("d", self.dim())
            .with_meta("k", self.experts());
        ck.tensors.push(("w".into(), self.w.clone()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, MoeError> {
        match (&ck.kind[..], &ck.tensors[..]) {
            ("gate", [(name, w)]) if name == "w" && w.is_finite() => Ok(Self { w: w.clone() }),
            _ => Err(MoeError::Checkpoint(format!(
                "expected a gate checkpoint with one tensor w, found kind {} with {} tensors",
                ck.kind,
                ck.tensors.len()
            ))),
        }
    }
}

/// `softmax(q^T W)`.
pub fn gate(q: &[f64], params: &GateParams) -> Result<Vec<f64>, MoeError> {
    if q.len() != params.dim() {
        return Err(MoeError::InvalidArgument(format!(
            "query of length {} for a {}-dimensional gate",
            q.len(),
            params.dim()
        )));
    }
    let z = Tensor::row_vector(q.to_vec()).matmul(&params.w)?;
    Ok(softmax(z.row(0))?)
}

/// Pooled encoder state used as the gate query.
pub fn query(slul: &SlulParams, lang: TokenId, prompt: &[TokenId]) -> Result<Vec<f64>, MoeError> {
    let h = encode(slul, lang, prompt)?;
    Ok(mean_pool(&h)?)
}

/// `(l_moe, l_ent) = (−log w_y, −Σ w log w)`.
pub fn moe_losses(gates: &[f64], y: usize) -> Result<(f64, f64), MoeError> {
    let w_y = *gates
        .get(y)
        .ok_or_else(|| MoeError::InvalidArgument(format!("expert {y} outside 0..{}", gates.len())))?;
    Ok((-w_y.max(GATE_EPS).ln(), entropy(gates)))
}

fn gloss_name<'a>(vocab: &'a Vocab, id: TokenId) -> Result<&'a str, MoeError> {
    vocab.token(id).ok_or(MoeError::UnknownId(id))
}

/// `φ_k(g)`: variant `k` of every gloss, each resampled to the database's
/// canonical length, concatenated in order.
pub fn retrieve(gloss: &[TokenId], k: usize, db: &PosePriorDb, vocab: &Vocab) -> Result<PoseSequence, MoeError> {
    if gloss.is_empty() {
        return Err(MoeError::EmptyGloss);
    }
    if k >= db.k() {
        return Err(MoeError::InvalidArgument(format!("expert {k} outside 0..{}", db.k())));
    }
    let parts = gloss
        .iter()
        .map(|&id| {
            let name = gloss_name(vocab, id)?;
            let variants = db.variants(name).ok_or_else(|| MoeError::UnknownGloss(name.to_string()))?;
            Ok(variants[k].resample(db.canonical_len())?)
        })
        .collect::<Result<Vec<_>, MoeError>>()?;
    Ok(PoseSequence::concat(&parts)?)
}

/// `Σ_k w_k φ_k(g)`, frame by frame and coordinate by coordinate.
pub fn blend(gloss: &[TokenId], gates: &[f64], db: &PosePriorDb, vocab: &Vocab) -> Result<PoseSequence, MoeError> {
    if gates.len() != db.k() {
        return Err(MoeError::InvalidArgument(format!("{} gates for {} experts", gates.len(), db.k())));
    }
    if gates.iter().any(|w| !(*w >= 0.0)) || (gates.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(MoeError::InvalidArgument("gates must be a probability vector".into()));
    }
    let experts = (0..db.k())
        .map(|k| retrieve(gloss, k, db, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    let first = &experts[0];
    let mut coords = vec![0.0; first.coords().len()];
    for (e, &w) in experts.iter().zip(gates) {
        assert_eq!(e.coords().len(), coords.len(), "experts resample to one length");
        for (c, v) in coords.iter_mut().zip(e.coords()) {
            *c += w * v;
        }
    }
    Ok(PoseSequence::new(first.frames(), first.joints(), coords, first.hand_idx().to_vec())?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeOutput {
    pub gates: Vec<f64>,
    pub blended: PoseSequence,
    /// Highest gate; the lowest index wins ties.
    pub chosen: usize,
    /// `φ_chosen(g)`.
    pub selected: PoseSequence,
}

/// Gates from `Pool(H)`, then blending and hard selection.
pub fn infer(
    gloss: &[TokenId],
    h: &Tensor,
    params: &GateParams,
    db: &PosePriorDb,
    vocab: &Vocab,
) -> Result<MoeOutput, MoeError> {
    let q = mean_pool(h)?;
    let gates = gate(&q, params)?;
    from_gates(gloss, gates, db, vocab)
}

pub fn from_gates(gloss: &[TokenId], gates: Vec<f64>, db: &PosePriorDb, vocab: &Vocab) -> Result<MoeOutput, MoeError> {
    let chosen = argmax(&gates);
    let blended = blend(gloss, &gates, db, vocab)?;
    let selected = retrieve(gloss, chosen, db, vocab)?;
    Ok(MoeOutput {
        gates,
        blended,
        chosen,
        selected,
    })
}
