//! Joint multi-scale tone mapping and DCT-domain denoising for HDR images.
//!
//! A patch is split into a four-level Laplacian pyramid. Each detail level
//! passes through a conditional tone-mapping network and a learned DCT
//! multiplier denoiser (in either order), the base level is only
//! tone-mapped, and the levels are recombined. Full images are processed as
//! half-overlapping 224×224 patches merged with a raised-cosine window.

pub mod error;
pub mod imageio;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod pyramid;
pub mod training;
pub mod transforms;

#[cfg(any(test, feature = "testing"))]
pub mod testing;

pub use error::{CheckpointError, Error, Result};
pub use numerics::{Tape, Tensor, Var};
