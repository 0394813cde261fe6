//! Minimal tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The whole crate trains one desk-scale transformer, so the surface here is
//! deliberately small: dense row-major tensors, a tape of primitive ops with
//! hand-written backward rules, an Adam optimizer with linear warm-up, and a
//! flat binary checkpoint container. No broadcasting beyond what the model
//! needs, no views, no GPU.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! speed and in `f64` for finite-difference gradient checks.

mod adam;
mod checkpoint;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamParams, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};

/// Scalar element type for tensors: `f32` (default precision) or `f64`
/// (gradient-check precision).
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Send
    + Sync
    + Default
    + Debug
    + Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Shorthand for lifting an `f64` constant into the working precision.
#[inline]
pub fn real<F: Real>(x: f64) -> F {
    F::from_f64(x)
}
