use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rate matrix must be square with at least two sites, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("rate r({i},{j}) = {value} is negative or not finite")]
    NegativeRate { i: usize, j: usize, value: f64 },
    #[error("diagonal rate r({i},{i}) = {value} must be zero")]
    NonzeroDiagonal { i: usize, value: f64 },
    #[error("positive-rate graph is not strongly connected")]
    NotIrreducible,
    #[error("drift strength b = {0} must be >= 1 (condensing regime)")]
    BadB(f64),
    #[error("linear system is singular")]
    SingularSystem,
    #[error("invalid site set: {0}")]
    BadFace(String),
    #[error("face must contain at least two sites, got {0}")]
    DegenerateFace(usize),
    #[error("q = {q} must exceed b = {b}")]
    BadQ { q: f64, b: f64 },
    #[error("zero-range configuration holds no particles")]
    EmptyConfig,
    #[error("event budget of {0} exceeded before the horizon")]
    HorizonOverflow(u64),
    #[error("non-finite drift: active coordinate {0} is zero")]
    NonFiniteDrift(usize),
    #[error("adaptive step {dt:e} fell below floor {floor:e}")]
    StepUnderflow { dt: f64, floor: f64 },
    #[error("no admissible lambda for epsilon = {0}")]
    EmptyRegion(f64),
    #[error("checkpoint times differ between ensembles")]
    MismatchedCheckpoints,
    #[error("ensemble has {got} replicas, need at least {need}")]
    TooFewReplicas { got: usize, need: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Invalid(e.to_string())
    }
}
