//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type usable by tensors, models and solvers.
///
/// Implemented for `f32` and `f64`. Model code is written against this trait;
/// the crate root exposes `f64` aliases, which is what training and the CLI use.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless widening used by file formats.
    fn to_f64_lossless(self) -> f64;

    /// Conversion from a literal; panics only on values the type cannot represent.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal out of range")
    }
}

impl Scalar for f64 {
    fn to_f64_lossless(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
}
