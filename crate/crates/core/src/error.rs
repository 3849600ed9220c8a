use std::ops::Range;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("{0}: input has zero norm")]
    ZeroNorm(&'static str),

    #[error("agent {agent} out of range (have {n_agents})")]
    AgentOutOfRange { agent: usize, n_agents: usize },

    #[error("rank mismatch: expected {expected}, got {got}")]
    RankMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer {layer}: attempt to overwrite shared rows {rows:?}")]
    Overwrite { layer: usize, rows: Range<usize> },

    #[error("plan/store inconsistency: {0}")]
    Plan(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
