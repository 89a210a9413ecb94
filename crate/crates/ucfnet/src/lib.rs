//! Infrared small object segmentation with a U-shaped network built from
//! central-difference convolutions (CDC) and fast Fourier convolutions (FFC).
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: 4-D tensors, a reverse-mode gradient tape, the layer
//!   primitives (conv, batchnorm, pooling, resampling, FFT), and a
//!   finite-difference gradient checker.
//! - [`cdc`]: the central-difference convolution operator, both the fast
//!   decomposed form used by the model and a literal per-window reference.
//! - [`ffc`]: the Fourier unit and the two-branch fast Fourier convolution.
//! - [`model`]: the U-shaped encoder/decoder assembly.
//! - [`loss`], [`optim`]: BCE + soft-IoU training loss, AdamW with a cosine
//!   learning-rate schedule.
//! - [`metrics`]: pixel and object-level evaluation (IoU, nIoU, Pd, Fa,
//!   ROC/PR curves, AUC, F-score).
//! - [`data`]: dataset loading, deterministic synthetic scene generation,
//!   checkpoint serialization.
//! - [`train`], [`eval`], [`config`]: the training/evaluation pipelines and
//!   the JSON run configuration shared by the CLI.
//! - [`verify`]: the named finite-difference gradient suite run by the
//!   `gradcheck` command.
//!
//! Everything is deterministic given a seed: parameter init, data shuffling,
//! and synthetic generation all draw from explicitly seeded ChaCha streams,
//! and the math kernels give bitwise-identical results run to run.

pub mod cdc;
pub mod config;
pub mod data;
pub mod eval;
pub mod ffc;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use tensor::{Scalar, Tensor4};

/// Crate-wide error type. Variants carry human-readable context; shape and
/// config errors name the offending dimension or field.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("gradient error: {0}")]
    Grad(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
