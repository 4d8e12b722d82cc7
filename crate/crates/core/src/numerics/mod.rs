//! Dense tensors, a reverse-mode tape over the operations the model needs, and
//! the Adam optimiser.
//!
//! Everything is generic over [`Real`] so that the same forward/backward code
//! runs in `f32` for training and in `f64` for gradient checks.

mod adam;
mod graph;
mod kernels;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Candidates, Graph, Var};
pub use graph::softmax_in_place as softmax_rows_in_place;
pub use kernels::{dot, matmul_nn, matmul_nt, matmul_tn};
pub use tensor::Tensor;

use num_traits::Float;
use std::fmt::Debug;

/// Guard added to denominators and norms throughout the crate.
pub const DIV_EPS: f64 = 1e-8;

/// Floating-point element type used by tensors.
pub trait Real:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// `x / (denom + 1e-8)`.
#[inline]
pub fn stable_divide<F: Real>(x: F, denom: F) -> F {
    x / (denom + F::of(DIV_EPS))
}
