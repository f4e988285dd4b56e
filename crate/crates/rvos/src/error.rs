//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Numeric code reports
//! shape mismatches and non-finite values eagerly instead of letting NaNs
//! propagate; file formats report the first structural problem they hit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A spectrum expected to be conjugate-symmetric was not.
    #[error("spectrum violates conjugate symmetry: max imaginary residue {max_residue:.3e}")]
    Symmetry { max_residue: f64 },

    /// Attention was asked to attend over zero key/value rows.
    #[error("{op}: empty key/value context")]
    EmptyContext { op: &'static str },

    /// A ground-truth box with zero width or height cannot be matched.
    #[error("degenerate ground-truth box: width {w:.6}, height {h:.6}")]
    DegenerateBox { w: f64, h: f64 },

    /// Drift scores are undefined for singleton or zero-spread token sets.
    #[error("drift score undefined: {0}")]
    UndefinedSpread(String),

    /// Evaluation was asked for a score without any ground truth.
    #[error("evaluation requires at least one ground-truth instance")]
    NoGroundTruth,

    /// A parameter name was requested that the store does not hold.
    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    /// A text token id outside the vocabulary.
    #[error("unknown token id {0}")]
    UnknownToken(u32),

    /// Scene generation could not place objects without overlap.
    #[error("scene generation failed after {0} placement attempts")]
    Generation(usize),

    /// Invalid configuration key or value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file contents (tensor container, checkpoint, PGM/PPM, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Any other numeric failure (non-scalar backward seed, divergence, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
