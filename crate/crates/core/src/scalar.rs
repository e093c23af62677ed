//! Floating point abstraction shared by the theory modules.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::sync::OnceLock;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

use crate::scalar_kernel::quadrature::Rules;

/// Real scalar the asymptotic engine is generic over.
///
/// Implemented for `f32` and `f64`. Each implementation owns a lazily built
/// set of quadrature rules converted to its own precision.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Sum
    + Send
    + Sync
    + 'static
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
{
    /// Quadrature rules at this precision.
    fn rules() -> &'static Rules<Self>;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn erfc(self) -> Self {
        Self::c(libm::erfc(self.f64()))
    }

    fn erf(self) -> Self {
        Self::c(libm::erf(self.f64()))
    }

    /// Standard normal CDF.
    fn norm_cdf(self) -> Self {
        Self::c(0.5 * libm::erfc(-self.f64() / std::f64::consts::SQRT_2))
    }
}

impl Scalar for f64 {
    fn rules() -> &'static Rules<f64> {
        static R: OnceLock<Rules<f64>> = OnceLock::new();
        R.get_or_init(Rules::build)
    }
}

impl Scalar for f32 {
    fn rules() -> &'static Rules<f32> {
        static R: OnceLock<Rules<f32>> = OnceLock::new();
        R.get_or_init(Rules::build)
    }
}
