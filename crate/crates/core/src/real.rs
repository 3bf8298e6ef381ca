//! Scalar abstraction shared by every numeric routine in this crate.
//!
//! [`Real`] is implemented for `f32` and `f64`. All transcendental
//! functions come from `num-traits`' `libm` backend (the `std` intrinsics
//! are never used), which keeps results identical across platforms and
//! build configurations — a prerequisite for the byte-identical
//! reproducibility the harness promises.

use core::cmp::Ordering;
use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

/// Floating-point scalar with the extras the algorithms need beyond
/// [`num_traits::Float`]: an exact error function, a deterministic total
/// order for sorting, and explicit `f64` conversions for constants and
/// reporting.
pub trait Real:
    Float + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Exact Gauss error function (used by the Gaussian-CDF activation).
    fn erf(self) -> Self;

    /// IEEE-754 `totalOrder` comparison; keeps sorts deterministic even if
    /// a NaN slips through an unguarded path.
    fn total_order(self, other: Self) -> Ordering;

    /// Conversion from an `f64` constant; lossy for `f32` by design.
    fn of(v: f64) -> Self;

    /// Widening conversion for serialization and reporting.
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn total_order(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }

    fn of(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn total_order(self, other: Self) -> Ordering {
        self.total_cmp(&other)
    }

    fn of(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
