//! Joint RGB-D image inpainting: a late-fusion encoder/decoder generator
//! trained against global and local WGAN-GP critics, on a small reverse-mode
//! autodiff engine.

pub mod error;
pub mod gradcheck;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{grad, no_grad, with_grad_mode, DType, Element, Tensor};
pub mod cli;
pub mod data;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod trainer;
