//! Numerical laboratory for drift in chunked latent generation.
//!
//! The crate models chunk-by-chunk generation on synthetic latent sequences and
//! compares carry-over strategies: re-encoding decoded frames between chunks
//! versus propagating latents directly, with fields trained by plain or
//! restorative flow matching.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the experiment harness.

// `!(x > 0)` style guards are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod codec;
pub mod error;
pub mod field;
pub mod flow;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Chunk, Frame};

pub type LatentFrame<T> = Frame<T>;
pub type PixelFrame<T> = Frame<T>;
pub type LatentChunk<T> = Chunk<T>;
pub type PixelChunk<T> = Chunk<T>;
pub type PoseChunk<T> = Chunk<T>;

pub type LatentChunk64 = LatentChunk<f64>;
pub type LatentChunk32 = LatentChunk<f32>;
pub type LossyCodec64 = codec::LossyCodec<f64>;
pub type Scene64 = world::Scene<f64>;
