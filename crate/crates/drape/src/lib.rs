//! drape: structure-preserving appearance transfer with guided diffusion.
//!
//! Given a structure image (a shape on a background) and an appearance image
//! (a texture), the pipeline produces an output that keeps the structure
//! image's foreground silhouette while adopting the appearance image's
//! texture. Everything runs on the CPU in double precision: a small
//! tape-based autodiff engine, a conditional denoiser, a patch-transformer
//! feature extractor, label-difference mask generation, and the mask-guided
//! sampler.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod guidance;
pub mod maskgen;
pub mod metrics;
pub mod netpbm;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
