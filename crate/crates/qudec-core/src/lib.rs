//! Confidence-guided multi-scale single-image de-raining.
//!
//! The crate provides:
//! - a small CPU tensor/autodiff engine (`tensor`, `tape`) with a rayon-backed
//!   data-parallel core and a sequential fallback (feature `parallel`),
//! - the de-raining network family (`model`): shared encoder, residual decoder
//!   with per-scale confidence taps, patch-quality decoder, label confidence
//!   network, refinement network and the patch label generator network,
//! - a from-scratch no-reference quality scorer (`niqe`) and the score-driven
//!   patch labeling pipeline (`labeling`),
//! - the confidence-weighted loss family (`losses`) and training loops
//!   (`training`),
//! - dataset ingestion and synthetic rain generation (`data`),
//! - PSNR/SSIM evaluation and cycle-spinning inference (`metrics`,
//!   `inference`).

pub mod checkpoint;
pub mod data;
pub mod inference;
pub mod labeling;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod niqe;
pub mod par;
pub mod tape;
pub mod tensor;
pub mod training;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape/channel/range contract was violated. The message names the
    /// operation or block that detected the violation.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid or inconsistent input data (missing files, malformed formats).
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
