//! Scalar abstraction over the numeric kernels.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the numeric kernels are generic over.
///
/// `f32` is the shipping factor type (it matches the on-disk model format);
/// `f64` is what the metric pipeline and the finite-difference oracles use.
pub trait Real:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Conversion from `f64` for constants and configuration values.
    /// Values outside the target range saturate like an `as` cast.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to any Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("any Real converts to f64")
    }
}

impl<T> Real for T where
    T: Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}
