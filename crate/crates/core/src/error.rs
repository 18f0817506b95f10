use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("lookup of length {lookup} is not aligned with {tokens} tokens ({segment})")]
    Misaligned {
        segment: &'static str,
        tokens: usize,
        lookup: usize,
    },

    #[error("sequence already carries a target segment")]
    AlreadyAugmented,

    #[error("target of {target} tokens cannot fit in a sequence of at most {max_len}")]
    TargetTooLong { target: usize, max_len: usize },

    #[error("concept link from {source_index} points outside its segment")]
    DanglingLink { source_index: usize },

    #[error("invalid edge weight {weight} between {u} and {v}")]
    InvalidWeight { u: usize, v: usize, weight: f64 },

    #[error("node {0} has zero degree")]
    ZeroDegree(usize),

    #[error("stopword {0:?} must not be queried")]
    Stopword(String),

    #[error("empty token cannot be queried")]
    EmptyToken,

    #[error("concept source failed for token {token:?}: {message}")]
    Source { token: String, message: String },

    #[error("corpus lengths differ: {candidates} candidates vs {references} references")]
    LengthMismatch { candidates: usize, references: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFiniteLoss { step: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no forward state cached")]
    MissingCache,

    #[error("visual backend failure: {0}")]
    Backend(String),
}

pub type Result<T> = core::result::Result<T, CoreError>;
