use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("degenerate dynamics: no flow and no diffusion")]
    DegenerateDynamics,

    #[error("time step {dt} violates the stability bound; admissible dt <= {admissible}")]
    CflViolation { dt: f64, admissible: f64 },

    #[error("empty measure: no sample lies inside the grid bounds")]
    EmptyMeasure,

    #[error("disjoint supports: no cell where both densities exceed the floor")]
    DisjointSupport,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure: {what} (residual {residual:e})")]
    Numerical { what: String, residual: f64 },

    #[error("inconsistent state: {0}")]
    InconsistentState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown system tag: {0}")]
    UnknownTag(String),

    #[error("trajectory blow-up at step {step}")]
    BlowUp { step: usize },

    #[error("series too short: need more than {needed} samples, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
