use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};

/// Element type of a tensor: f32 for training, f64 for oracle and gradient
/// checks. Everything an op needs funnels through this trait so the whole
/// graph can be instantiated at either precision.
pub trait Scalar:
    Float + NumAssign + Copy + Send + Sync + Debug + Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}
