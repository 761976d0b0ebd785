use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate point pair: points coincide")]
    DegeneratePair,
    #[error("degenerate input: points are collinear or coincident")]
    DegenerateInput,
    #[error("degenerate triangle")]
    DegenerateTriangle,
    #[error("invalid depth {0} mm")]
    InvalidDepth(f64),
    #[error("insufficient support: {found} valid depth pixels, need 3")]
    InsufficientSupport { found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("descriptor dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("disconnected input: node {0} is unreachable from the reference")]
    Disconnected(usize),
    #[error("infeasible scene specification: {0}")]
    InfeasibleSpec(&'static str),
}
