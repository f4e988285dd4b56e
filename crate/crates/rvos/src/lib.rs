//! Desk-scale referring video object segmentation.
//!
//! The crate trains and runs a small end-to-end pipeline that segments the
//! object a short text expression refers to across the frames of a synthetic
//! video. Everything — the autodiff engine, the Fourier-domain text/vision
//! fusion, the query decoder, the patch-kernel mask head, the multi-scale
//! mask refiner, the set-matching losses, and the evaluation metrics — is
//! implemented in this crate on top of plain `f64` vectors, so results are
//! deterministic given a seed and every gradient can be verified against
//! finite differences.

pub mod decoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod multi;
pub mod patch;
pub mod refine;
pub mod tensor;

pub use error::{Error, Result};
