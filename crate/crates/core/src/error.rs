use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported format: {field} {detail}")]
    UnsupportedFormat { field: &'static str, detail: String },

    #[error("empty result: {0}")]
    EmptyResult(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (largest parameter norm {param_norm:.4e} in `{param}`)")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param: String,
        param_norm: f64,
    },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("invalid trial set: {0}")]
    InvalidTrialSet(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_) | Error::Config(_) | Error::InvalidTrialSet(_)
        )
    }
}
