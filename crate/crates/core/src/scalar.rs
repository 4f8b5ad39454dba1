use std::fmt::{Debug, Display};
use std::iter::Sum;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the estimators are generic over.
///
/// In practice this is `f32` or `f64`. The estimators need a real field with
/// decompositions (Cholesky, symmetric eigen) so exact rational types do not
/// qualify.
pub trait Real:
    RealField + Copy + Debug + Display + FromPrimitive + ToPrimitive + Sum + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    /// Conversion from a count.
    #[inline]
    fn of_usize(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count is representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the scalar type.
    #[inline]
    fn eps() -> Self {
        Self::default_epsilon()
    }

    #[inline]
    fn finite(self) -> bool {
        self.to_f64_lossy().is_finite()
    }
}

impl<T> Real for T where
    T: RealField + Copy + Debug + Display + FromPrimitive + ToPrimitive + Sum + Send + Sync + 'static
{
}
