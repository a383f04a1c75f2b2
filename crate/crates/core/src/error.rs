use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("scale {n} exceeds the cap ({cap}) for L^d = {base}")]
    ScaleCap { n: u32, cap: u32, base: u64 },

    #[error("vertex {vertex} is out of range at scale {n}")]
    VertexOutOfRange { vertex: u64, n: u32 },

    #[error("kernel is undefined on the diagonal")]
    Diagonal,

    #[error("time {t} outside [0, {t_max}]")]
    TimeOutOfRange { t: f64, t_max: f64 },

    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },

    #[error("ground set of {0} elements is too large for exact enumeration")]
    GroundSetTooLarge(usize),

    #[error("law is not normalized (total mass {0})")]
    Unnormalized(f64),

    #[error("missing moment: {0}")]
    MissingMoment(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("self-check failed: {0}")]
    SelfCheck(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParam(msg.into())
}
