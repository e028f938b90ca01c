use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for matrices, distances and weights.
///
/// Implemented for `f32` (the storage type of library-resident adapters) and
/// `f64` (the type all merge and evaluation arithmetic runs in).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless for `f32 -> f64`, round-to-nearest for `f64 -> f32`.
    #[inline]
    fn cast<U: Scalar>(self) -> U {
        U::from_f64(self.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan)
    }

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn casts_between_widths() {
        let x: f32 = 0.1;
        let y: f64 = x.cast();
        assert_eq!(y, 0.1f32 as f64);
        let z: f32 = y.cast();
        assert_eq!(z.to_bits(), x.to_bits());
        assert_eq!(f64::of(2.5), 2.5);
    }
}
