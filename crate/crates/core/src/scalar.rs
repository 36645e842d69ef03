//! Scalar abstraction for the numeric core.
//!
//! Everything math-bearing (boxes, grids, scoring, pooling, solvers) is
//! generic over [`Real`] so the same code runs in f32 or f64. The pipeline
//! defaults to f64 (see the crate-root aliases); file formats fix their own
//! width independently of the in-memory type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Lossy construction from an f64 literal. Panics on non-finite input,
    /// which in this crate only ever means a programming error.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal must convert")
    }

    /// Widening (or identity) conversion to f64.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
