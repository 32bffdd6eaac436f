//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: non-finite value encountered{}", context.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        context: Option<String>,
    },

    #[error("no tangent rule registered for primitive `{0}`")]
    MissingTangentRule(&'static str),

    #[error("primitive `{0}` is not differentiable")]
    NonDifferentiable(&'static str),

    #[error("parameter structure mismatch: {0}")]
    StructureMismatch(String),

    #[error("time {t} outside schedule range [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("unknown noise schedule kind `{0}`")]
    UnknownSchedule(String),

    #[error("integration produced a non-finite state at step {step}")]
    DivergedAt { step: usize },

    #[error("training aborted at step {step}: non-finite loss (scm={scm}, dmd={dmd})")]
    NonFiniteLoss { step: u64, scm: f64, dmd: f64 },

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("clip too short: need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },

    #[error("real pool too small for mix: need {need} real records for {synthetic} synthetic at fraction {fraction}, pool has {have}")]
    MixInfeasible {
        need: usize,
        have: usize,
        synthetic: usize,
        fraction: f64,
    },

    #[error("checkpoint magic mismatch: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
