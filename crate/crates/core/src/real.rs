use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point element type of the differentiable graph.
///
/// Training runs in `f32`; the finite-difference checks run in `f64`.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Reuse (or convert) a shared `f32` buffer without copying when `Self == f32`.
    fn share_f32(data: &Arc<Vec<f32>>) -> Arc<Vec<Self>>;
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
    fn share_f32(data: &Arc<Vec<f32>>) -> Arc<Vec<Self>> {
        Arc::clone(data)
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
    fn share_f32(data: &Arc<Vec<f32>>) -> Arc<Vec<Self>> {
        Arc::new(data.iter().map(|&v| v as f64).collect())
    }
}
