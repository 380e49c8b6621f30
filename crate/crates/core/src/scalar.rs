//! Scalar abstraction: every numeric kernel in this crate is generic over
//! [`Scalar`], instantiated as `f32` or `f64`. The concrete aliases at the
//! crate root pin `f64`, which the finite-difference gradient checks require.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable as a matrix element.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum<Self> + Default + Debug + Display + Send + Sync + 'static
{
    /// Convert an `f64` constant, panicking only on non-finite input.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }

    /// Lossy view as `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
