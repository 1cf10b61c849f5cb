//! Continuous-time recurrent modeling of multivariate time series on the
//! Cholesky manifold.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`] — packed lower-triangular points with positive diagonals,
//!   the log-Cholesky metric, exponential/logarithmic maps, closed-form
//!   (weighted) Fréchet means, and the commutative translation group used by
//!   the recurrent cell.
//! * [`spd`] — a dense symmetric-eigendecomposition reference path on SPD
//!   matrices (affine-invariant maps, Karcher flow, complexity benchmark).
//!   Test and benchmark code only; the training path never goes through it.
//! * [`ad`] — a minimal reverse-mode differentiation engine with a scalar
//!   variable type that plugs into the same generic numeric code as `f32`
//!   and `f64`.
//! * [`encoder`] — sliding-window (or per-timepoint) covariance descriptors:
//!   1-D conv feature maps, OAS shrinkage, Cholesky factorization.
//! * [`rgru`] — the gated recurrent cell operating directly on Cholesky
//!   points.
//! * [`ode`] — tangent-space vector field and a fixed-step manifold Euler
//!   solver with unrolled and adjoint backward passes.
//! * [`model`] — the assembled encoder/ODE/RGRU sequence model, losses,
//!   whole-model gradients, Adam training loop, and checkpointing.
//! * [`data`] — CSV datasets, observation dropping, a synthetic
//!   geodesic-covariance generator, and evaluation metrics.
//! * [`verify`] — the self-check battery behind `logchol verify` and the
//!   acceptance test target.
//!
//! Numeric kernels are generic over [`scalar::Scalar`] (any IEEE float plus
//! the tape variable [`ad::Var`]); the aliases below fix the concrete
//! scalar for code that doesn't need the generics.

pub mod ad;
pub mod config;
pub mod data;
pub mod encoder;
pub mod geometry;
pub mod model;
pub mod ode;
pub mod rgru;
pub mod scalar;
pub mod spd;
pub mod verify;

/// Double-precision Cholesky-manifold point.
pub type CholeskyPoint64 = geometry::CholeskyPoint<f64>;
/// Single-precision Cholesky-manifold point.
pub type CholeskyPoint32 = geometry::CholeskyPoint<f32>;
/// Double-precision packed lower-triangular tangent vector.
pub type TangentLower64 = geometry::TangentLower<f64>;
/// Single-precision packed lower-triangular tangent vector.
pub type TangentLower32 = geometry::TangentLower<f32>;
/// Double-precision dense SPD point.
pub type SpdPoint64 = spd::SpdPoint<f64>;
/// Double-precision dense symmetric tangent.
pub type SymmetricTangent64 = spd::SymmetricMatrix<f64>;
