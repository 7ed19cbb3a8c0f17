use thiserror::Error;

/// Errors raised across the toolkit. Every variant maps to a stable
/// machine-readable kind through [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("layer `{0}` never activates positively on the calibration batch")]
    DeadLayer(String),
    #[error("unsupported nonlinearity `{0}`; retrain the baseline with nonlinearity = \"relu\" before converting")]
    UnsupportedNonlinearity(String),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("input of {len} tokens exceeds block size {block_size}")]
    SequenceTooLong { len: usize, block_size: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("training diverged at step {step} (loss {loss}); retry with a smaller learning rate")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidParam(_) => "invalid_param",
            Error::DeadLayer(_) => "dead_layer",
            Error::UnsupportedNonlinearity(_) => "unsupported_nonlinearity",
            Error::WrongKind { .. } => "wrong_kind",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::Diverged { .. } => "diverged",
            Error::Format(_) => "format",
            Error::Corpus(_) => "corpus",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
