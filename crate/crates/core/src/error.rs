use std::path::PathBuf;

use thiserror::Error;

use crate::divergence::DivergenceKind;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("divergence kind {0} has no measurement function")]
    UnsupportedKind(DivergenceKind),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("rejection sampler stalled: acceptance rate {rate:.3e} below 1e-6")]
    RejectionStall { rate: f64 },

    #[error("invalid correlation rho = {0}; need |rho| < 1")]
    InvalidRho(f64),

    #[error("invalid standard deviation {0}; need sigma > 0")]
    InvalidSigma(f64),

    #[error("quadrature supports d <= 2, got d = {0}")]
    DimensionTooHigh(usize),

    #[error("divergence is not finite: {0}")]
    NonIntegrable(String),

    #[error("{kind} requires a {needed} output transform")]
    TransformMismatch { kind: DivergenceKind, needed: &'static str },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("degenerate rate fit: {0}")]
    DegenerateFit(String),

    #[error("parse error at position {pos} in `{input}`: expected {expected}")]
    Parse { input: String, pos: usize, expected: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
