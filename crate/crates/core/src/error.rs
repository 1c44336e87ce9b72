use thiserror::Error;

pub type Result<T> = std::result::Result<T, SaeError>;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("duplicate unit id `{0}`")]
    DuplicateId(String),

    #[error("unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("domain `{0}` has no sampled units")]
    EmptyDomain(String),

    #[error("unknown stratum ({ind}, sc {sc})")]
    UnknownStratum { ind: String, sc: u8 },

    #[error("no allocation for stratum ({ind}, sc {sc})")]
    MissingAllocation { ind: String, sc: u8 },

    #[error("invalid allocation for stratum ({ind}, sc {sc}): {n}")]
    InvalidAllocation { ind: String, sc: u8, n: i64 },

    #[error("cell {0} is populated but has no sampled units; cannot calibrate")]
    EmptyCell(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("{0} requires at least two domains in the sample")]
    TooFewDomains(&'static str),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },

    #[error("degenerate residual scale: {0}")]
    DegenerateScale(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("reduction would empty stratum ({ind}, sc {sc})")]
    EmptiesStratum { ind: String, sc: u8 },
}

impl SaeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SaeError::InvalidArgument(msg.into())
    }
}
