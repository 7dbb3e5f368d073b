//! Synthetic corpus, token tables, the pose prior database, and their file formats.

mod dataset;
mod pose;
mod prior;
mod vocab;

pub use dataset::{
    default_lexicon, gen_corpus, language_tag, parse_pose_ref, pose_ref_for, read_corpus,
    validate_example, write_corpus, GlossExample, Vocabularies, MAX_GLOSS_LEN, TEMPLATES,
};
pub use pose::PoseSequence;
pub use prior::{default_hand_idx, PosePriorDb, PriorRules};
pub use vocab::{is_reserved, TokenId, Vocab, BOS, EOS, MASK, NUM_RESERVED, PAD, RESERVED};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorpusError {
    #[error("empty lexicon")]
    EmptyLexicon,
    #[error("duplicate lexeme {0:?}")]
    DuplicateLexeme(String),
    #[error("invalid lexeme {0:?}")]
    InvalidLexeme(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("pose database: {0}")]
    Db(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("format: {0}")]
    Format(String),
}
