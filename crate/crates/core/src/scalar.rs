//! Scalar abstraction for the tensor and network math.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::Rng;

/// Floating-point scalar the core math is generic over.
///
/// Implemented for `f32` and `f64`; the rest of the crate pins `f64`
/// through the aliases at the crate root.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Uniform draw in `[lo, hi)`, always consuming one `f64` from the
    /// stream so f32 and f64 networks share seed behaviour.
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        let u = Self::from_f64(rng.gen::<f64>()).unwrap();
        lo + (hi - lo) * u
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
