//! Diffusion-based temporal action segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`]: dense tensors, a reverse-mode tape and Adam.
//! - [`nn`]: parameter storage and small layer helpers.
//! - [`encoder`]: the temporal dilation perception (TDP) encoder.
//! - [`diffusion`]: noise schedule, label codec, forward corruption and losses.
//! - [`masking`]: conditional masks applied to encoder features.
//! - [`decoder`]: the conditional denoising decoder.
//! - [`sampler`]: DDIM iteration with fixed and similarity-driven adaptive skips.
//! - [`metrics`]: frame accuracy, edit score and segmental F1.
//! - [`dataset`]: synthetic videos, file formats and inference-time augmentation.
//! - [`model`], [`config`], [`checkpoint`]: training and persistence.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rank;
pub mod sampler;
pub mod svg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::SeqTensor;
