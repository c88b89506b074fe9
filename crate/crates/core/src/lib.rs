//! Deterministic building blocks for conditional 3D latent diffusion.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! dense voxel tensors and the operations a small diffusion stack needs
//! (convolution, pooling, normalization, attention, hand-derived backward
//! passes, the noise schedule and sampler, evaluation metrics, and a
//! procedural lung-phantom generator). There is no IO and no threading in
//! here; file formats and the CLI live in the companion `land-cli` crate.
//!
//! The crate is `no_std` (with `alloc`). All floating point math goes through
//! `libm`, so results are bitwise reproducible across platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod diffusion;
pub mod error;
pub mod mask;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod phantom;
pub mod rng;
pub mod unet;
pub mod vae;
pub mod volume;

pub use error::{Error, Result};
pub use rng::Rng;
pub use volume::{Shape4, Volume};
