//! Scalar abstraction shared by the signal-processing and loss kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type usable by the numeric kernels: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `ln(exp(a) + exp(b))` without overflow; `-inf` is the identity.
    fn log_add_exp(self, other: Self) -> Self {
        if self == Self::neg_infinity() {
            return other;
        }
        if other == Self::neg_infinity() {
            return self;
        }
        let (hi, lo) = if self > other { (self, other) } else { (other, self) };
        hi + (lo - hi).exp().ln_1p()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `ln Σ exp(x_i)`; returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
