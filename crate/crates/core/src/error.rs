use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("row {what} does not sum to one (sum = {sum})")]
    NotNormalized { what: String, sum: f64 },

    #[error("positivity violation: no behavioral support for {0}")]
    Positivity(String),

    #[error("end of episode: augmented state {0} has no remaining time")]
    EndOfEpisode(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("enumeration of {count} trajectories exceeds the limit of {limit}")]
    TooLarge { count: f64, limit: u64 },

    #[error("dataset form error: {0}")]
    Form(String),

    #[error("unsupported environment: {0}")]
    Unsupported(String),

    #[error("fitted Q did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("certificate unavailable: {0}")]
    CertificateUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
