use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("prior generation failed after {attempts} attempts: {reason}")]
    PriorGeneration { attempts: usize, reason: String },

    #[error("invalid prior matrix: {0}")]
    InvalidPriors(String),

    #[error("singular test prior: class {class} has zero probability")]
    SingularPrior { class: usize },

    #[error("vector is not in the image of the transition map (residual {residual:e})")]
    NotInImage { residual: f64 },

    #[error("infeasible class allocation: {0}")]
    Allocation(String),

    #[error("idx format error at byte offset {offset}: {message}")]
    IdxFormat { offset: u64, message: String },

    #[error("client {client} diverged at round {round}, step {step}: {message}")]
    ClientDivergence {
        client: usize,
        round: usize,
        step: usize,
        message: String,
    },

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
