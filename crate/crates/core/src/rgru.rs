//! Gated recurrent cell whose state, gates, and parameters live on the
//! lower-triangular manifold.
//!
//! Each step mixes the input point and previous state with weighted Fréchet
//! means, shifts them by bias translation, squashes through sigmoid gates,
//! and blends entrywise. Diagonal positivity survives every stage: sigmoids
//! are strictly inside (0, 1), the candidate activation has positive range,
//! and convex blends of positive numbers stay positive.
//!
//! Parameters are stored raw and unconstrained; [`reparameterize`] derives
//! the effective values (absolute value plus a small floor on diagonals
//! that must stay positive) without mutating storage, so the optimizer can
//! move freely in flat coordinates.

use rand::Rng;
use thiserror::Error;

use crate::geometry::{
    self, tri_index, tri_len, CholeskyPoint, GeometryError, Lower, TangentLower, EPS_POS,
};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum RgruError {
    #[error("{gate} gate produced a non-finite value")]
    NonFinite { gate: &'static str },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T> = std::result::Result<T, RgruError>;

/// Positive-range activation applied to candidate diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagActivation {
    Softplus,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RgruConfig {
    /// Reparameterize weight diagonals to be positive (biases always are).
    pub positive_weight_diag: bool,
    pub diag_activation: DiagActivation,
}

impl Default for RgruConfig {
    fn default() -> Self {
        RgruConfig { positive_weight_diag: true, diag_activation: DiagActivation::Softplus }
    }
}

/// Raw cell parameters: one weight per mean argument (input and hidden) for
/// each of the three gates, plus one bias per gate. All nine live in packed
/// lower-triangular layout, unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct RgruParams<T> {
    pub dim: usize,
    pub w_zx: Vec<T>,
    pub w_zh: Vec<T>,
    pub w_rx: Vec<T>,
    pub w_rh: Vec<T>,
    pub w_lx: Vec<T>,
    pub w_lh: Vec<T>,
    pub b_z: Vec<T>,
    pub b_r: Vec<T>,
    pub b_l: Vec<T>,
}

/// Number of raw scalars in [`RgruParams`] at dimension `dim`.
pub fn param_count(dim: usize) -> usize {
    9 * tri_len(dim)
}

impl<T: Scalar> RgruParams<T> {
    /// Reads parameters from one flat slice in field-declaration order.
    pub fn from_flat(dim: usize, flat: &[T]) -> Self {
        let n = tri_len(dim);
        assert_eq!(flat.len(), param_count(dim), "flat parameter length mismatch");
        let grab = |k: usize| flat[k * n..(k + 1) * n].to_vec();
        RgruParams {
            dim,
            w_zx: grab(0),
            w_zh: grab(1),
            w_rx: grab(2),
            w_rh: grab(3),
            w_lx: grab(4),
            w_lh: grab(5),
            b_z: grab(6),
            b_r: grab(7),
            b_l: grab(8),
        }
    }

    /// Concatenates the nine blocks in field-declaration order.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(param_count(self.dim));
        for block in [
            &self.w_zx, &self.w_zh, &self.w_rx, &self.w_rh, &self.w_lx, &self.w_lh, &self.b_z,
            &self.b_r, &self.b_l,
        ] {
            out.extend_from_slice(block);
        }
        out
    }
}

/// Weights and biases after reparameterization: weights act entrywise
/// inside the means, biases are valid manifold points for translation.
#[derive(Debug, Clone)]
pub struct EffectiveParams<T> {
    pub w_zx: TangentLower<T>,
    pub w_zh: TangentLower<T>,
    pub w_rx: TangentLower<T>,
    pub w_rh: TangentLower<T>,
    pub w_lx: TangentLower<T>,
    pub w_lh: TangentLower<T>,
    pub b_z: CholeskyPoint<T>,
    pub b_r: CholeskyPoint<T>,
    pub b_l: CholeskyPoint<T>,
}

/// Maps raw storage to effective parameters: strict-lower entries pass
/// through; diagonals that must stay positive become `|raw| + EPS_POS`.
/// Differentiable except at zero, where the absolute value contributes
/// subgradient zero.
pub fn reparameterize<T: Scalar>(raw: &RgruParams<T>, cfg: &RgruConfig) -> EffectiveParams<T> {
    let dim = raw.dim;
    let floor = T::of(EPS_POS);
    let positive_diag = |v: &[T]| -> Vec<T> {
        let mut out = v.to_vec();
        for i in 0..dim {
            let p = tri_index(i, i);
            out[p] = out[p].abs() + floor;
        }
        out
    };
    let weight = |v: &[T]| -> TangentLower<T> {
        let entries = if cfg.positive_weight_diag { positive_diag(v) } else { v.to_vec() };
        TangentLower::from_packed(dim, entries).expect("finite raw weights stay finite")
    };
    let bias = |v: &[T]| -> CholeskyPoint<T> {
        CholeskyPoint::from_packed(dim, positive_diag(v))
            .expect("reparameterized bias diagonal is positive by construction")
    };
    EffectiveParams {
        w_zx: weight(&raw.w_zx),
        w_zh: weight(&raw.w_zh),
        w_rx: weight(&raw.w_rx),
        w_rh: weight(&raw.w_rh),
        w_lx: weight(&raw.w_lx),
        w_lh: weight(&raw.w_lh),
        b_z: bias(&raw.b_z),
        b_r: bias(&raw.b_r),
        b_l: bias(&raw.b_l),
    }
}

/// Fresh raw parameters: strict-lower weight entries uniform in
/// `(-1/sqrt(d), 1/sqrt(d))`, every diagonal raw-valued so its effective
/// value is one, bias strict-lower entries zero. The cell starts as an
/// unweighted geometric averager with near-identity translation.
pub fn init_params(dim: usize, rng: &mut impl Rng) -> RgruParams<f64> {
    let n = tri_len(dim);
    let s = 1.0 / (dim as f64).sqrt();
    let mut weight = || -> Vec<f64> {
        let mut v = vec![0.0; n];
        for i in 0..dim {
            for j in 0..i {
                v[tri_index(i, j)] = rng.gen_range(-s..s);
            }
            v[tri_index(i, i)] = 1.0 - EPS_POS;
        }
        v
    };
    let w_zx = weight();
    let w_zh = weight();
    let w_rx = weight();
    let w_rh = weight();
    let w_lx = weight();
    let w_lh = weight();
    let bias = || -> Vec<f64> {
        let mut v = vec![0.0; n];
        for i in 0..dim {
            v[tri_index(i, i)] = 1.0 - EPS_POS;
        }
        v
    };
    RgruParams {
        dim,
        w_zx,
        w_zh,
        w_rx,
        w_rh,
        w_lx,
        w_lh,
        b_z: bias(),
        b_r: bias(),
        b_l: bias(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgruState<T> {
    pub h: CholeskyPoint<T>,
    pub step_index: usize,
}

/// Initial state: the identity matrix.
pub fn init_state<T: Scalar>(dim: usize) -> RgruState<T> {
    RgruState { h: CholeskyPoint::identity(dim), step_index: 0 }
}

/// Entrywise convex blend `(1 - z) * h_prev + z * candidate` over the
/// stored lower triangle. Takes the gate as a plain lower-triangular value
/// so the exact endpoints zero and one are expressible in tests.
pub fn gate_blend<T: Scalar>(
    z: &impl Lower<T>,
    h_prev: &CholeskyPoint<T>,
    candidate: &CholeskyPoint<T>,
) -> Result<CholeskyPoint<T>> {
    if z.dim() != h_prev.dim() || h_prev.dim() != candidate.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: h_prev.dim(),
            got: if z.dim() != h_prev.dim() { z.dim() } else { candidate.dim() },
        }
        .into());
    }
    let one = T::one();
    let entries: Vec<T> = z
        .packed()
        .iter()
        .zip(h_prev.packed())
        .zip(candidate.packed())
        .map(|((&g, &h), &c)| (one - g) * h + g * c)
        .collect();
    CholeskyPoint::from_packed(h_prev.dim(), entries).map_err(|e| match e {
        GeometryError::NonFinite { .. } => RgruError::NonFinite { gate: "blend" },
        other => other.into(),
    })
}

fn stage<T>(gate: &'static str, r: geometry::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        GeometryError::NonFinite { .. } => RgruError::NonFinite { gate },
        other => other.into(),
    })
}

fn candidate_activation<T: Scalar>(
    l: &CholeskyPoint<T>,
    cfg: &RgruConfig,
) -> geometry::Result<CholeskyPoint<T>> {
    match cfg.diag_activation {
        DiagActivation::Softplus => geometry::split_activation(l),
        DiagActivation::Sigmoid => {
            // tanh off the diagonal, floored sigmoid on it.
            let dim = l.dim();
            let floor = T::of(EPS_POS);
            let mut entries = l.packed().to_vec();
            for i in 0..dim {
                for j in 0..=i {
                    let p = tri_index(i, j);
                    entries[p] = if i == j {
                        let v = entries[p];
                        let s = if v >= T::zero() {
                            T::one() / (T::one() + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (T::one() + e)
                        };
                        s.max(floor)
                    } else {
                        entries[p].tanh()
                    };
                }
            }
            CholeskyPoint::from_packed(dim, entries)
        }
    }
}

/// One recurrent update. Pure in `(state, x, params)`; the returned state
/// is always a valid manifold point.
pub fn step<T: Scalar>(
    state: &RgruState<T>,
    x: &CholeskyPoint<T>,
    params: &EffectiveParams<T>,
    cfg: &RgruConfig,
) -> Result<RgruState<T>> {
    let h = &state.h;

    let mix = |wx: &TangentLower<T>,
               wh: &TangentLower<T>,
               other: &CholeskyPoint<T>,
               bias: &CholeskyPoint<T>|
     -> geometry::Result<CholeskyPoint<T>> {
        let mean = geometry::weighted_frechet_mean(
            &[x.clone(), other.clone()],
            &[wx.clone(), wh.clone()],
        )?;
        geometry::translate(&mean, bias)
    };

    let z = stage("z", mix(&params.w_zx, &params.w_zh, h, &params.b_z).and_then(|p| geometry::sigmoid_gate(&p)))?;
    let r = stage("r", mix(&params.w_rx, &params.w_rh, h, &params.b_r).and_then(|p| geometry::sigmoid_gate(&p)))?;
    let gated = stage("r", geometry::hadamard(&r, h))?;
    let l = stage("candidate", mix(&params.w_lx, &params.w_lh, &gated, &params.b_l))?;
    let candidate = stage("candidate", candidate_activation(&l, cfg))?;
    let h_new = gate_blend(&z, h, &candidate)?;

    Ok(RgruState { h: h_new, step_index: state.step_index + 1 })
}

/// Gradients of one step with respect to its inputs and raw parameters.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    /// Laid out like [`RgruParams::to_flat`].
    pub params: Vec<f64>,
}

/// Reverse-mode gradients of a single step: records the step on a private
/// tape segment and sweeps it with the upstream gradient of the new hidden
/// state (packed layout).
pub fn step_backward(
    state: &RgruState<f64>,
    x: &CholeskyPoint<f64>,
    raw: &RgruParams<f64>,
    cfg: &RgruConfig,
    upstream_h: &[f64],
) -> Result<StepGradients> {
    use crate::ad::{self, Var};

    let dim = raw.dim;
    assert_eq!(upstream_h.len(), tri_len(dim), "upstream gradient length mismatch");

    let (built, recording) = ad::record(|| -> Result<_> {
        let x_vars: Vec<Var> = x.packed().iter().map(|&v| ad::var(v)).collect();
        let h_vars: Vec<Var> = state.h.packed().iter().map(|&v| ad::var(v)).collect();
        let p_vars: Vec<Var> = raw.to_flat().iter().map(|&v| ad::var(v)).collect();

        let x_pt = CholeskyPoint::from_packed(dim, x_vars.clone())?;
        let h_pt = CholeskyPoint::from_packed(dim, h_vars.clone())?;
        let raw_v = RgruParams::from_flat(dim, &p_vars);
        let eff = reparameterize(&raw_v, cfg);
        let st = RgruState { h: h_pt, step_index: state.step_index };
        let new = step(&st, &x_pt, &eff, cfg)?;
        Ok((x_vars, h_vars, p_vars, new))
    });
    let (x_vars, h_vars, p_vars, new) = built?;

    let seeds: Vec<(Var, f64)> =
        new.h.packed().iter().copied().zip(upstream_h.iter().copied()).collect();
    let grads = recording.backward(&seeds);

    Ok(StepGradients {
        x: x_vars.iter().map(|&v| grads.wrt(v)).collect(),
        h_prev: h_vars.iter().map(|&v| grads.wrt(v)).collect(),
        params: p_vars.iter().map(|&v| grads.wrt(v)).collect(),
    })
}
