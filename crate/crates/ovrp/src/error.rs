use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An occupied likelihood cell evaluated below 1e-300, signaling a
    /// degenerate parameter region. Optimizers treat this as -inf and
    /// backtrack.
    #[error("likelihood underflow: cell probability below 1e-300 at y={y}, r={r} (profile {profile})")]
    LikelihoodUnderflow { y: usize, r: usize, profile: usize },

    #[error("likelihood underflow: aggregate nonresponse mass vanished with n_miss > 0")]
    NonresponseMassUnderflow,

    #[error("degenerate stratum {id}: {reason}")]
    DegenerateStratum { id: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Stable machine-readable code, used by the CLI's structured stderr
    /// messages.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::LikelihoodUnderflow { .. } => "likelihood_underflow",
            Error::NonresponseMassUnderflow => "nonresponse_mass_underflow",
            Error::DegenerateStratum { .. } => "degenerate_stratum",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Internal(_) => "internal",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
