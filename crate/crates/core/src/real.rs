use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type of the numeric kernels. Training and inference run in `f32`;
/// gradient checks run in `f64`.
pub trait Real:
    Float
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Norms at or below this value are treated as zero.
    const EPS_NORM: Self;
    /// Variance offset used by layer normalization.
    const EPS_LN: Self;

    fn erf(self) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    #[inline]
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const EPS_NORM: Self = 1e-12;
    const EPS_LN: Self = 1e-5;

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const EPS_NORM: Self = 1e-12;
    const EPS_LN: Self = 1e-5;

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
