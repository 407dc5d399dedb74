//! Floating-point abstraction the numeric kernels are generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type accepted by the loss and model kernels: `f32` or `f64`.
///
/// The training pipeline itself is pinned to [`crate::Real`]; the kernels stay
/// generic so they can be checked at both precisions.
pub trait Scalar:
    Float
    + NumAssign
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` constant; panics only for values outside the
    /// target type's range, which never happens for the constants used here.
    fn cast(value: f64) -> Self {
        Self::from_f64(value).expect("constant representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
