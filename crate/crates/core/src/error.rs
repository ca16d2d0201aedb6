use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimError { expected: usize, got: usize },
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("brute-force oracle limited to {max} particles, got {got}")]
    OracleTooLarge { max: usize, got: usize },
    #[error("degenerate marginal at index {0}")]
    DegenerateMarginal(usize),
    #[error("invalid kernel at particle {0}: not a probability vector")]
    InvalidKernel(usize),
    #[error("unknown control atom {atom} (grid has {size} atoms)")]
    UnknownAtom { atom: usize, size: usize },
    #[error("response missing for particle {particle}, component {component}")]
    IncompleteResponse { particle: usize, component: usize },
    #[error("search space of size {size} exceeds cap {cap}")]
    SearchSpaceTooLarge { size: f64, cap: u64 },
    #[error("dynamics error: {0}")]
    DynamicsError(String),
    #[error("flow covers [{start}, {end}], requested [{from}, {to}]")]
    FlowDomainError {
        start: f64,
        end: f64,
        from: f64,
        to: f64,
    },
    #[error("step {h} too large for speed bound {speed} (C0*h must stay <= 0.5)")]
    StepTooLarge { h: f64, speed: f64 },
    #[error("plan does not couple the given measures: {0}")]
    PlanMismatch(String),
    #[error("time grid error: {0}")]
    GridError(String),
    #[error("reachable graph exceeds cap {cap} (layer sizes so far: {layers:?})")]
    GraphTooLarge { cap: usize, layers: Vec<usize> },
    #[error("value table incomplete: {0}")]
    TableIncomplete(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
