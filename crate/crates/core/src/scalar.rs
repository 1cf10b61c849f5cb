//! Scalar abstraction shared by every numeric kernel in the crate.
//!
//! Everything that computes is written against [`Scalar`] so the same code
//! path runs in `f32`, `f64`, and under the reverse-mode tape variable
//! [`crate::ad::Var`]. Tests and the training loop instantiate `f64`; the
//! tolerances quoted throughout the crate assume double precision.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar usable by the geometry, encoder, recurrent, and ODE
/// kernels.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + 'static {
    /// Lifts a double-precision constant into this scalar type.
    ///
    /// For tape variables this produces a constant (no tape node), which is
    /// what every literal inside a kernel should be.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must convert")
    }

    /// Extracts the numeric value as `f64` (dropping any derivative
    /// information).
    #[inline]
    fn to_double(self) -> f64 {
        self.to_f64().expect("scalar value must convert to f64")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Debug + Display + Default + 'static {}
