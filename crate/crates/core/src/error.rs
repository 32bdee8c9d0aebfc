use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate state: {0}")]
    Degenerate(String),

    #[error("infinite variance: {0}")]
    InfiniteVariance(String),

    #[error("malformed sequence: {0}")]
    Sequence(String),

    #[error("quantization error: {0}")]
    Quantization(String),

    #[error("extrapolation outside contrast table: T = {t} s not in [{lo}, {hi}]")]
    Extrapolation { t: f64, lo: f64, hi: f64 },

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fit error: {0}")]
    Fit(String),

    /// Nonlinear fit hit the iteration cap; carries the best parameters found.
    #[error("fit did not converge after {iterations} iterations (best {best:?})")]
    NoConvergence { iterations: usize, best: Vec<f64> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error report.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Degenerate(_) => "degenerate",
            Error::InfiniteVariance(_) => "infinite_variance",
            Error::Sequence(_) => "sequence",
            Error::Quantization(_) => "quantization",
            Error::Extrapolation { .. } => "extrapolation",
            Error::Pairing(_) => "pairing",
            Error::InsufficientData(_) => "insufficient_data",
            Error::Fit(_) => "fit",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Config(_) => "config",
            Error::UnknownKey(_) => "unknown_key",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
