use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating point element type of network weights.
///
/// Production weights are `f32`; gradient checks instantiate the same code
/// paths with `f64`.
pub trait Real: NdFloat + FromPrimitive + Sum + Default {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
