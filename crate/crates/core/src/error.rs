use thiserror::Error;

/// Errors raised while building or stepping the cell and pack models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("parameter `{name}` = {value} is out of range: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("state of charge {0} is outside [0, 1]")]
    SocOutOfRange(f64),
    #[error("a pack needs at least two cells, got {0}")]
    TooFewCells(usize),
    #[error("cells disagree on {0}")]
    MismatchedCells(&'static str),
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cell {cell} current {current} A is outside [{min}, {max}] A")]
    CurrentOutOfBounds {
        cell: usize,
        current: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid pack limits: {0}")]
    InvalidLimits(&'static str),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// Errors from reading or writing cycle, log and trace files.
#[derive(Debug, Error)]
pub enum CycleError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column `{0}` in header")]
    MissingColumn(&'static str),
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("time stamps must be strictly increasing (line {line}: {prev} then {next})")]
    NonMonotonicTime { line: usize, prev: f64, next: f64 },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("net current is negative ({0} A·s); discharge must be positive")]
    NetCharging(f64),
    #[error("invalid sampling interval {0} s")]
    InvalidSampling(f64),
    #[error("series lengths differ: {0}")]
    LengthMismatch(String),
}

/// Errors from loading configuration files.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("could not parse config: {0}")]
    Parse(String),
    #[error("could not serialize config: {0}")]
    Serialize(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid search space: {0}")]
    SearchSpace(String),
    #[error("invalid swarm config: {0}")]
    Swarm(String),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("state diverged at step {step}: {what}")]
    Diverged { step: usize, what: &'static str },
}
