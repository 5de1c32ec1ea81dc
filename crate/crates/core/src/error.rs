use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("step size underflow at t = {t:.6e} s (h = {h:.3e} s); the generator is too stiff for the requested tolerance")]
    Stiffness { t: f64, h: f64 },
    #[error("numerical error: {message} (residual {residual:.3e})")]
    Numerical { message: String, residual: f64 },
    #[error("compilation error: {0}")]
    Compile(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used in `error.json` and by the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Stiffness { .. } => "stiffness",
            Error::Numerical { .. } => "numerical",
            Error::Compile(_) => "compile",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
