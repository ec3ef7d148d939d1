use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{func}: argument {value} outside domain")]
    Domain { func: &'static str, value: f64 },
    #[error("Green's function evaluated at coincident points ({x1}, {x2})")]
    Singular { x1: f64, x2: f64 },
    #[error("refinement failed: box {box_id} at level {level} exceeds max_levels {max_levels}")]
    Refinement { box_id: usize, level: u32, max_levels: u32 },
    #[error("quadrature did not converge (estimate {estimate:e})")]
    Quadrature { estimate: f64 },
    #[error("singular cross matrix at box {box_id} direction {dir:?}")]
    SingularCross { box_id: usize, dir: Option<u32> },
    #[error("singular diagonal block at indices {start}..{end}")]
    SingularBlock { start: usize, end: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in input at index {index}")]
    NonFinite { index: usize },
    #[error("point ({x1}, {x2}) lies outside the domain")]
    OutsideDomain { x1: f64, x2: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
