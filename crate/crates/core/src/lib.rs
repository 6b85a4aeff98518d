//! Volumetric MRI-to-CT synthesis.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! parallel convolution/shifted-window-attention generator ([`generator`]), a
//! Haar-wavelet patch discriminator ([`discriminator`]), the composite training
//! objective ([`losses`]), Adam training ([`optim`], [`train`]), volume handling
//! and phantom generation ([`volume`]), sliding-window inference
//! ([`inference`]) and masked image-quality metrics ([`metrics`]).

pub mod checkpoint;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod swin;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
