use core::fmt::Debug;
use core::iter::Sum;

use num_traits::Float;

/// Floating-point element type usable by tensors and the autodiff graph.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Scalar: Float + Debug + Default + Sum + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
