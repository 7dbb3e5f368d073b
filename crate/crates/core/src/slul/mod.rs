//! Prompt-to-gloss encoder-decoder and its training objective.

mod losses;
mod model;
mod train;

pub use losses::{
    apply_mask, combined_graph, combined_loss, contrastive_loss, decode_greedy, encode,
    kl_consistency, nll_loss, reconstruction_logits, sagm_loss, sagm_mask, sagm_mask_with,
    teacher_forced_logits, LossNodes, LossWeights, MaskPlan, SlulLossParts,
};
pub use model::{positions, Bound, ModelConfig, SlulParams, BLOCKED_LOGIT};
pub use train::{log_to_jsonl, quarter_steps, train_slul, LossRecord, SlulTraining};
pub(crate) use train::Batcher;

use crate::diffkit::DiffError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SlulError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("gloss is empty")]
    EmptyGloss,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: non-finite loss or weights")]
    Diverged { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
