use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar the numerical core is written against: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("count representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion to f64")
    }

    /// A tolerance of `x`, widened to a small multiple of machine epsilon when the
    /// type cannot resolve `x` (only matters for `f32`).
    fn tol(x: f64) -> Self {
        let floor = Self::epsilon() * Self::of(64.0);
        Self::of(x).max(floor)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
