//! Scalar abstraction so the numeric core runs in f32 (storage precision)
//! or f64 (gradient-check precision) without duplicated code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps, ToPrimitive};

/// Element type accepted by tensors and the training graph.
pub trait Scalar:
    Float + ToPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64, used when seeding generic code with
    /// literals or RNG output.
    fn from_f64(v: f64) -> Self;

    /// Widening (or identity) conversion to f64 for reporting.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}
