use crate::data::DataError;
use crate::numkernel::KernelError;

/// Failure while fitting or applying a model.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot fit on an empty training set")]
    EmptyFit,
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("empty validation set")]
    EmptyValidation,
    #[error("embedding dimension {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("linear system is not positive definite")]
    Singular,
    #[error("sequence of {tokens} tokens exceeds the limit of {max}")]
    SequenceTooLong { tokens: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
}
