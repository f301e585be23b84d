//! Minimal neural-network primitives with explicit forward caches and
//! hand-written backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training and in f64 for finite-difference gradient verification.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod optim;
pub mod param;

pub use conv::{conv_ref, Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm1d, BatchNorm2d, Bn1dCache, Bn2dCache};
pub use optim::{cosine_lr, SgdMomentum};
pub use param::{Param, ParamGroup};

/// Floating-point element type for network math.
pub trait Scalar: ndarray::NdFloat {
    fn from64(x: f64) -> Self;
    fn into64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into64(self) -> f64 {
        self
    }
}
