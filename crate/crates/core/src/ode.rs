//! Continuous hidden-state evolution between observations.
//!
//! The hidden state is pulled back to the tangent space at the identity
//! (a global flat chart, since the manifold is diffeomorphic to a linear
//! space), advanced there by a fixed-step explicit Euler solve of a learned
//! vector field, and pushed back. Two backward modes: unrolled reverse mode
//! through the discrete steps (exact for the discrete forward), and the
//! adjoint method (reverse-time integration of state, sensitivity, and
//! parameter gradient, matching unrolled up to discretization error).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, tri_len, CholeskyPoint, GeometryError, Lower, TangentLower};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("field parameter length {got} does not match the field shape (needs {expected})")]
    ParamLength { expected: usize, got: usize },
    #[error("state length {got} does not match dimension {dim} (needs {expected})")]
    StateLength { dim: usize, expected: usize, got: usize },
    #[error("interval end {t_end} precedes start {t_start}")]
    BackwardInterval { t_start: f64, t_end: f64 },
    #[error("non-finite state at solver step {step}")]
    NonFiniteState { step: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T> = std::result::Result<T, OdeError>;

/// The dynamics model. `Zero` pins the field to the constant zero function
/// (no parameters); it is the ablation that turns the model into a plain
/// recurrent cell, and doubles as the analytically known do-nothing flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FieldKind {
    Zero,
    /// Multilayer perceptron on (packed tangent coordinates, normalized
    /// time): tanh hidden layers of the given widths, linear output back
    /// to packed coordinates.
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    EulerManifold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardMode {
    Unrolled,
    Adjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeConfig {
    /// Euler steps per unit of time; the solve takes
    /// `max(1, ceil(interval * n_steps_per_unit))` steps.
    pub n_steps_per_unit: usize,
    pub solver: Solver,
    pub backward: BackwardMode,
    /// Divisor applied to the time value fed into the field.
    pub time_normalization: f64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            n_steps_per_unit: 16,
            solver: Solver::EulerManifold,
            backward: BackwardMode::Unrolled,
            time_normalization: 1.0,
        }
    }
}

/// Layer widths of the field MLP at state dimension `dim`: packed input
/// plus one time channel, hidden widths, packed output.
fn layer_sizes(kind: &FieldKind, dim: usize) -> Vec<usize> {
    let n = tri_len(dim);
    match kind {
        FieldKind::Zero => vec![],
        FieldKind::Mlp { hidden } => {
            let mut sizes = Vec::with_capacity(hidden.len() + 2);
            sizes.push(n + 1);
            sizes.extend_from_slice(hidden);
            sizes.push(n);
            sizes
        }
    }
}

/// Number of scalars in the field parameter vector.
pub fn field_param_count(kind: &FieldKind, dim: usize) -> usize {
    let sizes = layer_sizes(kind, dim);
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Fresh field parameters: hidden layers uniform in `(-1/sqrt(fan_in),
/// 1/sqrt(fan_in))`, output layer all zeros, so the field starts as the
/// zero function and training grows the dynamics from nothing.
pub fn init_field_params(kind: &FieldKind, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let sizes = layer_sizes(kind, dim);
    let mut out = Vec::with_capacity(field_param_count(kind, dim));
    for (layer, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let last = layer == sizes.len() - 2;
        let s = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(fan_in * fan_out + fan_out) {
            out.push(if last { 0.0 } else { rng.gen_range(-s..s) });
        }
    }
    out
}

fn check_params<T>(kind: &FieldKind, dim: usize, params: &[T]) -> Result<()> {
    let expected = field_param_count(kind, dim);
    if params.len() != expected {
        return Err(OdeError::ParamLength { expected, got: params.len() });
    }
    Ok(())
}

fn check_state<T>(dim: usize, u: &[T]) -> Result<()> {
    let expected = tri_len(dim);
    if u.len() != expected {
        return Err(OdeError::StateLength { dim, expected, got: u.len() });
    }
    Ok(())
}

/// Field evaluation on packed coordinates. `t` is divided by
/// `time_normalization` before entering the network.
pub fn eval_field<T: Scalar>(
    kind: &FieldKind,
    dim: usize,
    params: &[T],
    u: &[T],
    t: f64,
    time_normalization: f64,
) -> Result<Vec<T>> {
    check_params(kind, dim, params)?;
    check_state(dim, u)?;
    match kind {
        FieldKind::Zero => Ok(vec![T::zero(); u.len()]),
        FieldKind::Mlp { .. } => {
            let sizes = layer_sizes(kind, dim);
            let mut act: Vec<T> = Vec::with_capacity(sizes[0]);
            act.extend_from_slice(u);
            act.push(T::of(t / time_normalization));
            let mut offset = 0;
            for (layer, w) in sizes.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = &params[offset..offset + fan_in * fan_out];
                let biases = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
                offset += fan_in * fan_out + fan_out;
                let last = layer == sizes.len() - 2;
                let mut next = Vec::with_capacity(fan_out);
                for o in 0..fan_out {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    let mut s = biases[o];
                    for (wv, av) in row.iter().zip(&act) {
                        s = s + *wv * *av;
                    }
                    next.push(if last { s } else { s.tanh() });
                }
                act = next;
            }
            Ok(act)
        }
    }
}

/// Field evaluation in tangent-vector clothing.
pub fn vector_field<T: Scalar>(
    kind: &FieldKind,
    params: &[T],
    u: &TangentLower<T>,
    t: f64,
    cfg: &OdeConfig,
) -> Result<TangentLower<T>> {
    let out = eval_field(kind, u.dim(), params, u.packed(), t, cfg.time_normalization)?;
    TangentLower::from_packed(u.dim(), out).map_err(OdeError::from)
}

/// Steps taken over `[t_start, t_end]`.
pub fn step_count(cfg: &OdeConfig, t_start: f64, t_end: f64) -> usize {
    let span = t_end - t_start;
    ((span * cfg.n_steps_per_unit as f64).ceil() as usize).max(1)
}

/// Fixed-step explicit Euler on packed coordinates:
/// `u <- u + eps * f(u, t)`. A zero-length interval returns `u0`
/// unchanged, taking no steps.
pub fn ode_solve_packed<T: Scalar>(
    kind: &FieldKind,
    dim: usize,
    params: &[T],
    u0: &[T],
    t_start: f64,
    t_end: f64,
    cfg: &OdeConfig,
) -> Result<Vec<T>> {
    check_params(kind, dim, params)?;
    check_state(dim, u0)?;
    if t_end < t_start {
        return Err(OdeError::BackwardInterval { t_start, t_end });
    }
    if t_end == t_start {
        return Ok(u0.to_vec());
    }
    let n = step_count(cfg, t_start, t_end);
    let eps = T::of((t_end - t_start) / n as f64);
    let mut u = u0.to_vec();
    for k in 0..n {
        let t_k = t_start + (t_end - t_start) * k as f64 / n as f64;
        let f = eval_field(kind, dim, params, &u, t_k, cfg.time_normalization)?;
        for (uv, fv) in u.iter_mut().zip(&f) {
            *uv = *uv + eps * *fv;
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFiniteState { step: k });
        }
    }
    Ok(u)
}

/// [`ode_solve_packed`] in tangent-vector clothing.
pub fn ode_solve<T: Scalar>(
    kind: &FieldKind,
    params: &[T],
    u0: &TangentLower<T>,
    t_start: f64,
    t_end: f64,
    cfg: &OdeConfig,
) -> Result<TangentLower<T>> {
    let out = ode_solve_packed(kind, u0.dim(), params, u0.packed(), t_start, t_end, cfg)?;
    TangentLower::from_packed(u0.dim(), out).map_err(OdeError::from)
}

/// Evolves a hidden state across an observation gap: pull back to the
/// identity chart, solve, push forward. The zero field and the zero-length
/// interval both reduce to the exp/log round trip of `h_prev`.
pub fn evolve_hidden<T: Scalar>(
    kind: &FieldKind,
    params: &[T],
    h_prev: &CholeskyPoint<T>,
    t_prev: f64,
    t_now: f64,
    cfg: &OdeConfig,
) -> Result<CholeskyPoint<T>> {
    let identity = CholeskyPoint::identity(h_prev.dim());
    let u0 = geometry::log_map(&identity, h_prev)?;
    let u1 = ode_solve(kind, params, &u0, t_prev, t_now, cfg)?;
    geometry::exp_map(&identity, &u1).map_err(OdeError::from)
}

/// Gradients of a solve's output with respect to its initial state and
/// field parameters.
#[derive(Debug, Clone)]
pub struct SolveGradients {
    pub u0: Vec<f64>,
    pub params: Vec<f64>,
}

/// Exact reverse mode through the discrete Euler steps: re-runs the solve
/// on a private tape segment and sweeps it.
// The argument list is the boundary-value tuple of the forward solve; a
// struct would just move the same list to every call site.
#[allow(clippy::too_many_arguments)]
pub fn backward_unrolled(
    kind: &FieldKind,
    dim: usize,
    params: &[f64],
    u0: &[f64],
    t_start: f64,
    t_end: f64,
    cfg: &OdeConfig,
    upstream: &[f64],
) -> Result<SolveGradients> {
    use crate::ad::{self, Var};
    check_params(kind, dim, params)?;
    check_state(dim, u0)?;
    check_state(dim, upstream)?;

    let (built, recording) = ad::record(|| -> Result<_> {
        let u_vars: Vec<Var> = u0.iter().map(|&v| ad::var(v)).collect();
        let p_vars: Vec<Var> = params.iter().map(|&v| ad::var(v)).collect();
        let out = ode_solve_packed(kind, dim, &p_vars, &u_vars, t_start, t_end, cfg)?;
        Ok((u_vars, p_vars, out))
    });
    let (u_vars, p_vars, out) = built?;

    let seeds: Vec<(Var, f64)> = out.iter().copied().zip(upstream.iter().copied()).collect();
    let grads = recording.backward(&seeds);
    Ok(SolveGradients {
        u0: u_vars.iter().map(|&v| grads.wrt(v)).collect(),
        params: p_vars.iter().map(|&v| grads.wrt(v)).collect(),
    })
}

/// Adjoint-method backward: integrates state, sensitivity, and parameter
/// gradient jointly in reverse time with the same step grid as the
/// forward solve. The state is reconstructed by reverse Euler, so the
/// result matches [`backward_unrolled`] up to one order of discretization
/// error; agreement tightens as the step count grows.
#[allow(clippy::too_many_arguments)] // same boundary-value tuple as backward_unrolled
pub fn backward_adjoint(
    kind: &FieldKind,
    dim: usize,
    params: &[f64],
    u_end: &[f64],
    t_start: f64,
    t_end: f64,
    cfg: &OdeConfig,
    upstream: &[f64],
) -> Result<SolveGradients> {
    use crate::ad::{self, Var};
    check_params(kind, dim, params)?;
    check_state(dim, u_end)?;
    check_state(dim, upstream)?;
    if t_end < t_start {
        return Err(OdeError::BackwardInterval { t_start, t_end });
    }

    let mut adjoint = upstream.to_vec();
    let mut grad_params = vec![0.0; params.len()];
    if t_end == t_start || matches!(kind, FieldKind::Zero) {
        // Zero Jacobians: the sensitivity rides through unchanged.
        return Ok(SolveGradients { u0: adjoint, params: grad_params });
    }

    let n = step_count(cfg, t_start, t_end);
    let eps = (t_end - t_start) / n as f64;
    let mut u = u_end.to_vec();

    for k in (0..n).rev() {
        let t_next = t_start + (t_end - t_start) * (k + 1) as f64 / n as f64;
        let t_k = t_start + (t_end - t_start) * k as f64 / n as f64;

        // Reconstruct the pre-step state by reverse Euler.
        let f_here = eval_field(kind, dim, params, &u, t_next, cfg.time_normalization)?;
        for (uv, fv) in u.iter_mut().zip(&f_here) {
            *uv -= eps * fv;
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFiniteState { step: k });
        }

        // Vector-Jacobian product of the field at the reconstructed state:
        // one private tape segment per step.
        let (built, recording) = ad::record(|| -> Result<_> {
            let u_vars: Vec<Var> = u.iter().map(|&v| ad::var(v)).collect();
            let p_vars: Vec<Var> = params.iter().map(|&v| ad::var(v)).collect();
            let f = eval_field(kind, dim, &p_vars, &u_vars, t_k, cfg.time_normalization)?;
            Ok((u_vars, p_vars, f))
        });
        let (u_vars, p_vars, f) = built?;
        let seeds: Vec<(Var, f64)> = f.iter().copied().zip(adjoint.iter().copied()).collect();
        let vjp = recording.backward(&seeds);

        for (a, uv) in adjoint.iter_mut().zip(&u_vars) {
            *a += eps * vjp.wrt(*uv);
        }
        for (g, pv) in grad_params.iter_mut().zip(&p_vars) {
            *g += eps * vjp.wrt(*pv);
        }
        if adjoint.iter().any(|v| !v.is_finite()) {
            return Err(OdeError::NonFiniteState { step: k });
        }
    }

    Ok(SolveGradients { u0: adjoint, params: grad_params })
}

/// Dispatches on the configured backward mode. The adjoint branch first
/// re-runs the forward solve to obtain the terminal state it integrates
/// back from.
#[allow(clippy::too_many_arguments)] // same boundary-value tuple as backward_unrolled
pub fn solve_backward(
    kind: &FieldKind,
    dim: usize,
    params: &[f64],
    u0: &[f64],
    t_start: f64,
    t_end: f64,
    cfg: &OdeConfig,
    upstream: &[f64],
) -> Result<SolveGradients> {
    match cfg.backward {
        BackwardMode::Unrolled => {
            backward_unrolled(kind, dim, params, u0, t_start, t_end, cfg, upstream)
        }
        BackwardMode::Adjoint => {
            let u_end = ode_solve_packed(kind, dim, params, u0, t_start, t_end, cfg)?;
            backward_adjoint(kind, dim, params, &u_end, t_start, t_end, cfg, upstream)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A single-layer (no hidden) MLP is an affine field; this builds
    /// f(u, t) = A u + w_t * (t / T_norm) + b explicitly.
    fn affine_params(dim: usize, a: &dyn Fn(usize, usize) -> f64, w_t: f64, b: f64) -> Vec<f64> {
        let n = tri_len(dim);
        let mut params = Vec::with_capacity(n * (n + 1) + n);
        for o in 0..n {
            for i in 0..n {
                params.push(a(o, i));
            }
            params.push(w_t);
        }
        for _ in 0..n {
            params.push(b);
        }
        params
    }

    fn mlp0() -> FieldKind {
        FieldKind::Mlp { hidden: vec![] }
    }

    #[test]
    fn param_count_matches_layer_arithmetic() {
        // dim 2: packed 3, input 4. Hidden [5]: 4*5+5 + 5*3+3 = 43.
        assert_eq!(field_param_count(&FieldKind::Mlp { hidden: vec![5] }, 2), 43);
        assert_eq!(field_param_count(&mlp0(), 2), 4 * 3 + 3);
        assert_eq!(field_param_count(&FieldKind::Zero, 2), 0);
    }

    #[test]
    fn zero_initialized_output_layer_gives_the_zero_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for kind in [mlp0(), FieldKind::Mlp { hidden: vec![6, 4] }] {
            let params = init_field_params(&kind, 3, &mut rng);
            for _ in 0..20 {
                let u = crate::geometry::tests_support::random_tangent_f64(&mut rng, 3);
                let f = vector_field(&kind, &params, &u, rng.gen_range(0.0..1.0), &OdeConfig::default())
                    .unwrap();
                assert!(f.packed().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn dead_time_channel_makes_the_field_time_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let kind = mlp0();
        // Random A and b, but zero weight on the time input.
        let n = tri_len(2);
        let vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params = affine_params(2, &|o, i| vals[o * n + i], 0.0, 0.3);
        let u = crate::geometry::tests_support::random_tangent_f64(&mut rng, 2);
        let cfg = OdeConfig::default();
        let f1 = vector_field(&kind, &params, &u, 0.1, &cfg).unwrap();
        let f2 = vector_field(&kind, &params, &u, 0.9, &cfg).unwrap();
        assert_eq!(f1.packed(), f2.packed());
    }

    #[test]
    fn zero_field_solve_returns_u0_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let u0 = crate::geometry::tests_support::random_tangent_f64(&mut rng, 3);
        let cfg = OdeConfig::default();
        let out = ode_solve(&FieldKind::Zero, &[], &u0, 0.0, 1.0, &cfg).unwrap();
        assert_eq!(out.packed(), u0.packed());
        // Zero-length interval takes the early exit.
        let out = ode_solve(&mlp0(), &vec![0.5; field_param_count(&mlp0(), 3)], &u0, 0.3, 0.3, &cfg)
            .unwrap();
        assert_eq!(out.packed(), u0.packed());
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        // Dyadic constant and interval: every Euler increment is exact in
        // binary floating point, so the result is bit-exact.
        let dim = 2;
        let c = 0.375;
        let params = affine_params(dim, &|_, _| 0.0, 0.0, c);
        let u0 = TangentLower::from_packed(dim, vec![0.5, -0.25, 1.0]).unwrap();
        let cfg = OdeConfig::default();
        let out = ode_solve(&mlp0(), &params, &u0, 0.0, 1.0, &cfg).unwrap();
        for (o, u) in out.packed().iter().zip(u0.packed()) {
            assert_eq!(*o, u + c);
        }
        // Non-dyadic constants still land within roundoff.
        let c = 0.3;
        let params = affine_params(dim, &|_, _| 0.0, 0.0, c);
        let out = ode_solve(&mlp0(), &params, &u0, 0.0, 1.0, &cfg).unwrap();
        for (o, u) in out.packed().iter().zip(u0.packed()) {
            assert!((o - (u + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_additivity_on_aligned_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let dim = 2;
        let n = tri_len(dim);
        let vals: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let params = affine_params(dim, &|o, i| vals[o * n + i], 0.2, 0.1);
        let u0 = crate::geometry::tests_support::random_tangent_f64(&mut rng, dim);
        let cfg = OdeConfig::default();

        let whole = ode_solve(&mlp0(), &params, &u0, 0.0, 1.0, &cfg).unwrap();
        let first = ode_solve(&mlp0(), &params, &u0, 0.0, 0.5, &cfg).unwrap();
        let second = ode_solve(&mlp0(), &params, &first, 0.5, 1.0, &cfg).unwrap();
        assert_eq!(whole.packed(), second.packed());
    }

    #[test]
    fn euler_error_halves_when_steps_double() {
        // f(u) = -u over one unit: analytic solution e^-1 * u0.
        let dim = 2;
        let n = tri_len(dim);
        let params = affine_params(dim, &|o, i| if o == i { -1.0 } else { 0.0 }, 0.0, 0.0);
        let u0 = TangentLower::from_packed(dim, vec![1.0, -0.5, 0.75]).unwrap();
        let err_at = |steps: usize| -> f64 {
            let cfg = OdeConfig { n_steps_per_unit: steps, ..OdeConfig::default() };
            let out = ode_solve(&mlp0(), &params, &u0, 0.0, 1.0, &cfg).unwrap();
            out.packed()
                .iter()
                .zip(u0.packed())
                .map(|(o, u)| (o - u * (-1.0f64).exp()).abs())
                .fold(0.0, f64::max)
        };
        let _ = n;
        let ratio = err_at(8) / err_at(16);
        assert!((1.6..2.4).contains(&ratio), "error ratio {ratio} not close to 2");
    }

    #[test]
    fn evolve_is_identity_on_empty_intervals_and_zero_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let cfg = OdeConfig::default();
        for _ in 0..50 {
            let h = crate::geometry::tests_support::random_point_f64(&mut rng, 3);
            let same_t = evolve_hidden(&FieldKind::Zero, &[], &h, 0.4, 0.4, &cfg).unwrap();
            let spanning = evolve_hidden(&FieldKind::Zero, &[], &h, 0.0, 1.7, &cfg).unwrap();
            for out in [&same_t, &spanning] {
                for (a, b) in out.packed().iter().zip(h.packed()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn evolve_keeps_positive_diagonals_under_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let kind = FieldKind::Mlp { hidden: vec![4] };
        let cfg = OdeConfig::default();
        for _ in 0..100 {
            let mut params = init_field_params(&kind, 2, &mut rng);
            // Random output layer too, not just the zero-initialized one.
            for p in params.iter_mut() {
                *p += rng.gen_range(-0.8..0.8);
            }
            let h = crate::geometry::tests_support::random_point_f64(&mut rng, 2);
            let (t0, span) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..1.0));
            let out = evolve_hidden(&kind, &params, &h, t0, t0 + span, &cfg).unwrap();
            for i in 0..2 {
                assert!(out.diag(i) > 0.0);
            }
        }
    }

    #[test]
    fn unrolled_backward_of_the_zero_field_passes_gradients_through() {
        let dim = 2;
        let u0 = vec![0.3, -0.2, 0.9];
        let upstream = vec![1.0, 2.0, -3.0];
        let cfg = OdeConfig { n_steps_per_unit: 1, ..OdeConfig::default() };
        let g = backward_unrolled(&FieldKind::Zero, dim, &[], &u0, 0.0, 1.0, &cfg, &upstream)
            .unwrap();
        assert_eq!(g.u0, upstream);
        assert!(g.params.is_empty());
    }

    #[test]
    fn unrolled_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let dim = 2;
        let kind = FieldKind::Mlp { hidden: vec![4] };
        let mut params = init_field_params(&kind, dim, &mut rng);
        for p in params.iter_mut() {
            *p += rng.gen_range(-0.5..0.5);
        }
        let u0: Vec<f64> = (0..tri_len(dim)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..tri_len(dim)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = OdeConfig::default();
        let g = backward_unrolled(&kind, dim, &params, &u0, 0.0, 1.0, &cfg, &upstream).unwrap();

        let objective = |params: &[f64], u0: &[f64]| -> f64 {
            let out = ode_solve_packed(&kind, dim, params, u0, 0.0, 1.0, &cfg).unwrap();
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for k in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (objective(&plus, &u0) - objective(&minus, &u0)) / (2.0 * h);
            let an = g.params[k];
            let denom = fd.abs().max(an.abs());
            if denom > 1e-6 {
                assert!(((fd - an) / denom).abs() < 1e-4, "theta {k}: {fd} vs {an}");
            }
        }
        for k in 0..u0.len() {
            let mut plus = u0.clone();
            let mut minus = u0.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (objective(&params, &plus) - objective(&params, &minus)) / (2.0 * h);
            let an = g.u0[k];
            let denom = fd.abs().max(an.abs());
            if denom > 1e-6 {
                assert!(((fd - an) / denom).abs() < 1e-4, "u0 {k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn adjoint_agrees_with_unrolled_at_fine_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let dim = 2;
        let kind = FieldKind::Mlp { hidden: vec![4] };
        let mut params = init_field_params(&kind, dim, &mut rng);
        for p in params.iter_mut() {
            *p += rng.gen_range(-0.4..0.4);
        }
        let u0: Vec<f64> = (0..tri_len(dim)).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let upstream: Vec<f64> = (0..tri_len(dim)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = OdeConfig { n_steps_per_unit: 128, ..OdeConfig::default() };

        let unrolled =
            backward_unrolled(&kind, dim, &params, &u0, 0.0, 1.0, &cfg, &upstream).unwrap();
        let u_end = ode_solve_packed(&kind, dim, &params, &u0, 0.0, 1.0, &cfg).unwrap();
        let adj =
            backward_adjoint(&kind, dim, &params, &u_end, 0.0, 1.0, &cfg, &upstream).unwrap();

        let rel = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = (x - y).abs();
                    let m = x.abs().max(y.abs());
                    if m > 1e-6 {
                        d / m
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        };
        assert!(rel(&unrolled.u0, &adj.u0) < 1e-3, "u0 gradient mismatch");
        assert!(rel(&unrolled.params, &adj.params) < 1e-3, "theta gradient mismatch");
    }

    #[test]
    fn adjoint_of_the_zero_field_is_constant() {
        let upstream = vec![0.5, -1.5, 2.0];
        let cfg = OdeConfig::default();
        let g = backward_adjoint(&FieldKind::Zero, 2, &[], &[0.0; 3], 0.0, 2.5, &cfg, &upstream)
            .unwrap();
        assert_eq!(g.u0, upstream);
        assert!(g.params.is_empty());
    }

    #[test]
    fn backward_interval_is_rejected() {
        let u0 = vec![0.0; 3];
        let cfg = OdeConfig::default();
        assert!(matches!(
            ode_solve_packed(&FieldKind::Zero, 2, &[], &u0, 1.0, 0.0, &cfg),
            Err(OdeError::BackwardInterval { .. })
        ));
    }

    #[test]
    fn shape_errors_are_reported() {
        let cfg = OdeConfig::default();
        assert!(matches!(
            eval_field(&mlp0(), 2, &[0.0; 3], &[0.0; 3], 0.0, cfg.time_normalization),
            Err(OdeError::ParamLength { .. })
        ));
        assert!(matches!(
            ode_solve_packed(&FieldKind::Zero, 2, &[], &[0.0; 2], 0.0, 1.0, &cfg),
            Err(OdeError::StateLength { .. })
        ));
    }
}
