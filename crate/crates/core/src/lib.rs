//! Invertible U-Net diffusion engine.
//!
//! The crate trains a denoising diffusion model whose backbone is a fully
//! invertible 3-D U-Net. Activations of invertible blocks are reconstructed
//! on the backward pass instead of being stored, and every tensor buffer is
//! metered so the resulting memory savings can be measured exactly.

mod binio;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod invblocks;
pub mod iunet;
pub mod metrics;
pub mod revgraph;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Prng, Scalar, Tensor};
