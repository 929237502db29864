use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable by the similarity and statistics routines.
pub trait Scalar: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {
    /// Absolute tolerance under which two similarity scores count as tied.
    fn tie_tolerance() -> Self {
        Self::epsilon() * Self::from_f64(1024.0).unwrap()
    }

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {}
