//! Optic-disc segmentation toolkit: a from-scratch valid-padding U-Net,
//! disc-centered patch sampling, stochastic class-weighted losses,
//! sliding-window inference, morphological cleanup and overlap metrics.

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
mod fpenv;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod morphology;
pub mod ops;
pub mod pipeline;
pub mod sampler;
#[cfg(target_arch = "x86_64")]
mod simd;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use mask::SegMask;
pub use tensor::{Real, Tensor};
