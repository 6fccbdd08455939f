//! Scalar abstraction for the numeric core.
//!
//! Geometry, rendering, losses, fusion, and metrics are written against
//! [`Scalar`] so the same code instantiates at `f32` and `f64`. The pipeline
//! itself runs at [`crate::Real`].

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    RealField + FromPrimitive + ToPrimitive + Copy + Default + Send + Sync + 'static
{
    /// Lossy conversion from a literal. Panics only for values outside the
    /// target type's range, which never happens for the constants used here.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Conversion to `f64` for I/O and reporting.
    #[inline]
    fn to_double(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
