//! Compressive image recovery with denoising-based approximate message
//! passing (D-AMP), its thresholding cousin (D-IT), and their unrolled,
//! trainable counterparts (LDAMP / LDIT) built on residual CNN denoisers.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). Signals and
//! solvers default to `f64`; CNN weights and activations are `f32`.

pub mod amp;
pub mod denoise;
pub mod eval;
pub mod error;
pub mod measure;
pub mod rng;
pub mod scalar;
pub mod se;
pub mod tensor;
pub mod unrolled;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Storage type of CNN weights and activations.
pub type Real = f32;
