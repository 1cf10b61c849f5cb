//! Dense symmetric-matrix support: classical SPD geometry, eigendecomposition,
//! Cholesky factorization, Karcher flows, and the scaling benchmark.
//!
//! Apart from [`cholesky_decompose`], which the encoder uses to factor
//! covariance estimates, this module is test and benchmark machinery: it
//! cross-checks the packed triangular operations against their dense
//! matrix counterparts and times the two against each other. The training
//! path never leaves packed coordinates.

use thiserror::Error;

use crate::geometry::{self, tri_index, CholeskyPoint};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SpdError {
    #[error("matrix data length {got} does not match dimension {dim} (needs {expected})")]
    DataLength { dim: usize, expected: usize, got: usize },
    #[error("{op}: non-finite entry at ({row}, {col})")]
    NonFinite { op: &'static str, row: usize, col: usize },
    #[error("asymmetry {max_abs:.3e} at ({row}, {col}) exceeds 1e-12")]
    Asymmetric { row: usize, col: usize, max_abs: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mean of an empty point list")]
    EmptyMean,
    #[error("mean flow did not converge in {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("dimension must be at least 1")]
    ZeroDim,
}

type Result<T> = std::result::Result<T, SpdError>;

/// Dense symmetric matrix, row-major, exactly symmetric in storage: the
/// constructor mirrors the lower triangle upward after validating the input,
/// so `get(i, j)` and `get(j, i)` are bitwise identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

/// Symmetric positive definite matrix, validated by a Cholesky attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdPoint<T> {
    mat: SymmetricMatrix<T>,
}

/// Tangents to the SPD manifold are symmetric matrices.
pub type SymmetricTangent<T> = SymmetricMatrix<T>;

impl<T: Scalar> SymmetricMatrix<T> {
    /// Validates a dense row-major matrix: finite entries and asymmetry at
    /// most `1e-12`, then stores the lower triangle mirrored so symmetry is
    /// exact. Comparisons run on plain values, so this never grows an
    /// autodiff tape.
    pub fn from_dense(dim: usize, data: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(SpdError::ZeroDim);
        }
        if data.len() != dim * dim {
            return Err(SpdError::DataLength { dim, expected: dim * dim, got: data.len() });
        }
        for i in 0..dim {
            for j in 0..dim {
                if !data[i * dim + j].is_finite() {
                    return Err(SpdError::NonFinite { op: "symmetric_matrix", row: i, col: j });
                }
            }
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j].to_double();
                let b = data[j * dim + i].to_double();
                let diff = (a - b).abs();
                if diff > 1e-12 {
                    return Err(SpdError::Asymmetric { row: i, col: j, max_abs: diff });
                }
            }
        }
        let mut data = data;
        for i in 0..dim {
            for j in (i + 1)..dim {
                data[i * dim + j] = data[j * dim + i];
            }
        }
        Ok(SymmetricMatrix { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        let mut data = vec![T::zero(); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = T::one();
        }
        SymmetricMatrix { dim, data }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(SpdError::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(SymmetricMatrix { dim: self.dim, data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(SpdError::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(SymmetricMatrix { dim: self.dim, data })
    }

    pub fn scale(&self, s: T) -> Self {
        SymmetricMatrix { dim: self.dim, data: self.data.iter().map(|&a| a * s).collect() }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt()
    }

    pub fn trace(&self) -> T {
        (0..self.dim).fold(T::zero(), |acc, i| acc + self.data[i * self.dim + i])
    }
}

impl<T: Scalar> SpdPoint<T> {
    /// Validates positive definiteness by attempting a Cholesky
    /// factorization.
    pub fn from_symmetric(mat: SymmetricMatrix<T>) -> Result<Self> {
        cholesky_decompose(&mat)?;
        Ok(SpdPoint { mat })
    }

    pub fn identity(dim: usize) -> Self {
        SpdPoint { mat: SymmetricMatrix::identity(dim) }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mat.dim()
    }

    #[inline]
    pub fn as_symmetric(&self) -> &SymmetricMatrix<T> {
        &self.mat
    }

    pub fn into_symmetric(self) -> SymmetricMatrix<T> {
        self.mat
    }
}

/// Plain dense matmul; `a`, `b`, and the result are `dim x dim` row-major.
fn matmul<T: Scalar>(dim: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); dim * dim];
    for i in 0..dim {
        for k in 0..dim {
            let aik = a[i * dim + k];
            if aik == T::zero() {
                continue;
            }
            let row = &b[k * dim..(k + 1) * dim];
            let dst = &mut out[i * dim..(i + 1) * dim];
            for j in 0..dim {
                dst[j] = dst[j] + aik * row[j];
            }
        }
    }
    out
}

/// Eigendecomposition of a symmetric matrix.
pub struct Eigh<T> {
    /// Eigenvalues, unordered.
    pub values: Vec<T>,
    /// Row-major matrix whose column `k` is the eigenvector for
    /// `values[k]`.
    pub vectors: Vec<T>,
}

/// Cyclic Jacobi eigensolver. Converges quadratically for symmetric input;
/// panics only if the off-diagonal mass fails to shrink within a generous
/// sweep budget, which would indicate corrupted input.
pub fn eigh<T: Scalar>(m: &SymmetricMatrix<T>) -> Eigh<T> {
    let dim = m.dim();
    let mut a = m.data().to_vec();
    let mut v = vec![T::zero(); dim * dim];
    for i in 0..dim {
        v[i * dim + i] = T::one();
    }
    if dim == 1 {
        return Eigh { values: vec![a[0]], vectors: v };
    }

    let norm = m.frobenius_norm();
    let tol = norm * T::of(1e-15) + T::of(f64::MIN_POSITIVE);

    let off = |a: &[T]| -> T {
        let mut s = T::zero();
        for i in 0..dim {
            for j in (i + 1)..dim {
                let e = a[i * dim + j];
                s = s + e * e;
            }
        }
        s.sqrt()
    };

    let max_sweeps = 64;
    for sweep in 0..=max_sweeps {
        if off(&a) <= tol {
            break;
        }
        assert!(sweep < max_sweeps, "eigensolver failed to converge");
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[p * dim + q];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[q * dim + q] - a[p * dim + p]) / (T::of(2.0) * apq);
                let t = {
                    let s = if theta >= T::zero() { T::one() } else { -T::one() };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;

                // Rotate rows and columns p, q of A.
                for k in 0..dim {
                    let akp = a[k * dim + p];
                    let akq = a[k * dim + q];
                    a[k * dim + p] = c * akp - s * akq;
                    a[k * dim + q] = s * akp + c * akq;
                }
                for k in 0..dim {
                    let apk = a[p * dim + k];
                    let aqk = a[q * dim + k];
                    a[p * dim + k] = c * apk - s * aqk;
                    a[q * dim + k] = s * apk + c * aqk;
                }
                // Accumulate the rotation into V.
                for k in 0..dim {
                    let vkp = v[k * dim + p];
                    let vkq = v[k * dim + q];
                    v[k * dim + p] = c * vkp - s * vkq;
                    v[k * dim + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let values = (0..dim).map(|i| a[i * dim + i]).collect();
    Eigh { values, vectors: v }
}

/// Applies `f` to the eigenvalues: returns `V f(L) V^T`, symmetrized in
/// storage.
pub fn map_eigenvalues<T: Scalar>(m: &SymmetricMatrix<T>, f: impl Fn(T) -> T) -> SymmetricMatrix<T> {
    let dim = m.dim();
    let Eigh { values, vectors } = eigh(m);
    let mapped: Vec<T> = values.into_iter().map(f).collect();
    // V f(L): scale column k of V by mapped[k].
    let mut scaled = vectors.clone();
    for r in 0..dim {
        for k in 0..dim {
            scaled[r * dim + k] = scaled[r * dim + k] * mapped[k];
        }
    }
    // (V f(L)) V^T, then average the halves to keep storage exactly
    // symmetric despite rounding.
    let mut vt = vec![T::zero(); dim * dim];
    for r in 0..dim {
        for c in 0..dim {
            vt[r * dim + c] = vectors[c * dim + r];
        }
    }
    let prod = matmul(dim, &scaled, &vt);
    let half = T::of(0.5);
    let mut data = prod.clone();
    for i in 0..dim {
        for j in 0..dim {
            data[i * dim + j] = (prod[i * dim + j] + prod[j * dim + i]) * half;
        }
    }
    SymmetricMatrix { dim, data }
}

/// Matrix exponential of a symmetric matrix; the result is positive
/// definite.
pub fn sym_exp<T: Scalar>(m: &SymmetricMatrix<T>) -> SpdPoint<T> {
    SpdPoint { mat: map_eigenvalues(m, |l| l.exp()) }
}

/// Matrix logarithm of an SPD matrix.
pub fn spd_matrix_log<T: Scalar>(p: &SpdPoint<T>) -> SymmetricMatrix<T> {
    map_eigenvalues(p.as_symmetric(), |l| {
        assert!(l > T::zero(), "logarithm of a non-positive eigenvalue");
        l.ln()
    })
}

fn spd_power<T: Scalar>(p: &SpdPoint<T>, e: f64) -> SymmetricMatrix<T> {
    map_eigenvalues(p.as_symmetric(), |l| {
        assert!(l > T::zero(), "power of a non-positive eigenvalue");
        l.powf(T::of(e))
    })
}

/// Exponential map on the SPD manifold at `base`:
/// `B^(1/2) exp(B^(-1/2) V B^(-1/2)) B^(1/2)`.
pub fn spd_exp<T: Scalar>(base: &SpdPoint<T>, v: &SymmetricTangent<T>) -> Result<SpdPoint<T>> {
    if base.dim() != v.dim() {
        return Err(SpdError::DimensionMismatch { expected: base.dim(), got: v.dim() });
    }
    let dim = base.dim();
    let half = spd_power(base, 0.5);
    let neg_half = spd_power(base, -0.5);
    let inner = matmul(dim, neg_half.data(), &matmul(dim, v.data(), neg_half.data()));
    let inner = symmetrize(dim, inner);
    let e = map_eigenvalues(&inner, |l| l.exp());
    let outer = matmul(dim, half.data(), &matmul(dim, e.data(), half.data()));
    Ok(SpdPoint { mat: symmetrize(dim, outer) })
}

/// Logarithmic map at `base`, inverse of [`spd_exp`]:
/// `B^(1/2) log(B^(-1/2) P B^(-1/2)) B^(1/2)`.
pub fn spd_log<T: Scalar>(base: &SpdPoint<T>, p: &SpdPoint<T>) -> Result<SymmetricTangent<T>> {
    if base.dim() != p.dim() {
        return Err(SpdError::DimensionMismatch { expected: base.dim(), got: p.dim() });
    }
    let dim = base.dim();
    let half = spd_power(base, 0.5);
    let neg_half = spd_power(base, -0.5);
    let inner = matmul(dim, neg_half.data(), &matmul(dim, p.as_symmetric().data(), neg_half.data()));
    let inner = symmetrize(dim, inner);
    let logged = map_eigenvalues(&inner, |l| {
        assert!(l > T::zero(), "logarithm of a non-positive eigenvalue");
        l.ln()
    });
    let outer = matmul(dim, half.data(), &matmul(dim, logged.data(), half.data()));
    Ok(symmetrize(dim, outer))
}

fn symmetrize<T: Scalar>(dim: usize, data: Vec<T>) -> SymmetricMatrix<T> {
    let half = T::of(0.5);
    let mut out = data.clone();
    for i in 0..dim {
        for j in 0..dim {
            out[i * dim + j] = (data[i * dim + j] + data[j * dim + i]) * half;
        }
    }
    SymmetricMatrix { dim, data: out }
}

/// Affine-invariant geodesic distance between SPD matrices, with the
/// conventional one-half prefactor:
/// `(1/2) * ||log(P1^(-1/2) P2 P1^(-1/2))||_F`.
pub fn affine_invariant_distance<T: Scalar>(p1: &SpdPoint<T>, p2: &SpdPoint<T>) -> Result<T> {
    if p1.dim() != p2.dim() {
        return Err(SpdError::DimensionMismatch { expected: p1.dim(), got: p2.dim() });
    }
    let dim = p1.dim();
    let neg_half = spd_power(p1, -0.5);
    let inner = matmul(dim, neg_half.data(), &matmul(dim, p2.as_symmetric().data(), neg_half.data()));
    let inner = symmetrize(dim, inner);
    let logged = map_eigenvalues(&inner, |l| {
        assert!(l > T::zero(), "logarithm of a non-positive eigenvalue");
        l.ln()
    });
    Ok(logged.frobenius_norm() * T::of(0.5))
}

/// Cholesky factorization of a symmetric positive definite matrix. Runs on
/// any scalar, including autodiff variables, so the factor can carry
/// gradients. Fails with the index of the first non-positive pivot.
// `!(s > 0)` instead of `s <= 0`: the negation also rejects NaN pivots.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn cholesky_decompose<T: Scalar>(m: &SymmetricMatrix<T>) -> Result<CholeskyPoint<T>> {
    let dim = m.dim();
    let mut l = vec![T::zero(); geometry::tri_len(dim)];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s = s - l[tri_index(i, k)] * l[tri_index(j, k)];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return Err(SpdError::NotPositiveDefinite { pivot: i, value: s.to_double() });
                }
                l[tri_index(i, i)] = s.sqrt();
            } else {
                l[tri_index(i, j)] = s / l[tri_index(j, j)];
            }
        }
    }
    CholeskyPoint::from_packed(dim, l).map_err(|_| SpdError::NotPositiveDefinite {
        pivot: dim,
        value: f64::NAN,
    })
}

/// Recomposes `L L^T` from a triangular factor; exact symmetry by
/// construction.
pub fn cholesky_compose<T: Scalar>(l: &CholeskyPoint<T>) -> SymmetricMatrix<T> {
    use crate::geometry::Lower;
    let dim = l.dim();
    let mut data = vec![T::zero(); dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = T::zero();
            for k in 0..=j.min(i) {
                s = s + l.entry(i, k) * l.entry(j, k);
            }
            data[i * dim + j] = s;
            data[j * dim + i] = s;
        }
    }
    SymmetricMatrix { dim, data }
}

/// Iterative mean settings: flow until the mean tangent norm drops to
/// `tol`, at most `max_iter` steps of size `step`.
#[derive(Debug, Clone, Copy)]
pub struct KarcherOpts {
    pub max_iter: usize,
    pub tol: f64,
    pub step: f64,
}

impl Default for KarcherOpts {
    fn default() -> Self {
        KarcherOpts { max_iter: 100, tol: 1e-10, step: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct KarcherOutcome<P> {
    pub mean: P,
    /// Flow updates applied before the residual dropped below tolerance.
    pub iterations: usize,
    pub residual: f64,
}

/// Karcher flow in triangular coordinates, seeded at the entrywise
/// arithmetic mean. Exists to cross-check the closed-form mean; the flow
/// lands on it in an iteration or two.
pub fn karcher_flow_cholesky<T: Scalar>(
    points: &[CholeskyPoint<T>],
    opts: KarcherOpts,
) -> Result<KarcherOutcome<CholeskyPoint<T>>> {
    use crate::geometry::Lower;
    if points.is_empty() {
        return Err(SpdError::EmptyMean);
    }
    let dim = points[0].dim();
    let len = geometry::tri_len(dim);
    let inv_n = T::of(1.0 / points.len() as f64);

    let mut init = vec![T::zero(); len];
    for p in points {
        if p.dim() != dim {
            return Err(SpdError::DimensionMismatch { expected: dim, got: p.dim() });
        }
        for (acc, &e) in init.iter_mut().zip(p.packed()) {
            *acc = *acc + e * inv_n;
        }
    }
    let mut mean = CholeskyPoint::from_packed(dim, init)
        .expect("arithmetic mean of valid points is a valid point");

    for it in 0..=opts.max_iter {
        let mut g = vec![T::zero(); len];
        for p in points {
            let l = geometry::log_map(&mean, p).expect("dimensions already checked");
            for (acc, &e) in g.iter_mut().zip(l.packed()) {
                *acc = *acc + e * inv_n;
            }
        }
        let residual = g.iter().fold(T::zero(), |a, &e| a + e * e).sqrt().to_double();
        if residual <= opts.tol {
            return Ok(KarcherOutcome { mean, iterations: it, residual });
        }
        if it == opts.max_iter {
            return Err(SpdError::NonConvergence { iterations: it, residual });
        }
        let scaled: Vec<T> = g.iter().map(|&e| e * T::of(opts.step)).collect();
        let tangent = crate::geometry::TangentLower::from_packed(dim, scaled)
            .expect("flow tangent entries are finite");
        mean = geometry::exp_map(&mean, &tangent).expect("exp of finite tangent");
    }
    unreachable!("loop returns on convergence or exhaustion");
}

/// Karcher flow under the affine-invariant metric, seeded at the entrywise
/// arithmetic mean.
pub fn karcher_flow_affine<T: Scalar>(
    points: &[SpdPoint<T>],
    opts: KarcherOpts,
) -> Result<KarcherOutcome<SpdPoint<T>>> {
    if points.is_empty() {
        return Err(SpdError::EmptyMean);
    }
    let dim = points[0].dim();
    let inv_n = T::of(1.0 / points.len() as f64);

    let mut init = SymmetricMatrix::identity(dim).scale(T::zero());
    for p in points {
        if p.dim() != dim {
            return Err(SpdError::DimensionMismatch { expected: dim, got: p.dim() });
        }
        init = init.add(&p.as_symmetric().scale(inv_n))?;
    }
    let mut mean = SpdPoint::from_symmetric(init)
        .expect("arithmetic mean of SPD matrices is SPD");

    for it in 0..=opts.max_iter {
        let mut g = SymmetricMatrix::identity(dim).scale(T::zero());
        for p in points {
            g = g.add(&spd_log(&mean, p)?.scale(inv_n))?;
        }
        let residual = g.frobenius_norm().to_double();
        if residual <= opts.tol {
            return Ok(KarcherOutcome { mean, iterations: it, residual });
        }
        if it == opts.max_iter {
            return Err(SpdError::NonConvergence { iterations: it, residual });
        }
        mean = spd_exp(&mean, &g.scale(T::of(opts.step)))?;
    }
    unreachable!("loop returns on convergence or exhaustion");
}

/// One benchmark measurement: averaging `n_points` matrices of dimension
/// `d` by the closed-form triangular mean versus the iterative SPD flow.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub d: usize,
    pub n_points: usize,
    pub t_closed_ns: u64,
    pub t_karcher_ns: u64,
}

/// Times the closed-form weighted mean in packed triangular coordinates
/// against the affine-invariant Karcher flow on the recomposed SPD
/// matrices. Inputs are matched: the triangular side averages factors
/// `L_i`, the flow averages `L_i L_i^T`. Short operations are looped until
/// each timed region runs at least a millisecond; each row reports the
/// fastest of `repeats` trials.
pub fn complexity_benchmark(dims: &[usize], n_points: usize, repeats: usize, seed: u64) -> Vec<BenchRow> {
    use rand::{Rng, SeedableRng};
    use std::time::Instant;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(dims.len());
    for &d in dims {
        // A tight cloud around the identity keeps the flow's iteration
        // count flat across dimensions, so the scaling comparison is fair.
        let spread = 0.05;
        let identity = CholeskyPoint::<f64>::identity(d);
        let mut factors = Vec::with_capacity(n_points);
        let mut weights = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let entries: Vec<f64> =
                (0..geometry::tri_len(d)).map(|_| rng.gen_range(-spread..spread)).collect();
            let k = crate::geometry::TangentLower::from_packed(d, entries).unwrap();
            factors.push(geometry::exp_map(&identity, &k).unwrap());
            let w: Vec<f64> =
                (0..geometry::tri_len(d)).map(|_| rng.gen_range(0.5..1.5)).collect();
            weights.push(crate::geometry::TangentLower::from_packed(d, w).unwrap());
        }
        let composed: Vec<SpdPoint<f64>> = factors
            .iter()
            .map(|l| SpdPoint::from_symmetric(cholesky_compose(l)).unwrap())
            .collect();

        let time_block = |f: &mut dyn FnMut()| -> u64 {
            // Calibrate an inner repetition count: one probe run, then
            // enough repetitions to fill about a millisecond.
            let probe = Instant::now();
            f();
            let once = probe.elapsed().as_nanos().max(1);
            let reps = (1_000_000 / once).clamp(1, 1_000_000) as u32;
            let mut best = u64::MAX;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                for _ in 0..reps {
                    f();
                }
                let per_call = (start.elapsed().as_nanos() / reps as u128) as u64;
                best = best.min(per_call);
            }
            best
        };

        let t_closed_ns = time_block(&mut || {
            let m = geometry::weighted_frechet_mean(&factors, &weights).unwrap();
            std::hint::black_box(&m);
        });
        let t_karcher_ns = time_block(&mut || {
            let opts = KarcherOpts { tol: 1e-9, ..KarcherOpts::default() };
            let out = karcher_flow_affine(&composed, opts).unwrap();
            std::hint::black_box(&out.mean);
        });
        rows.push(BenchRow { d, n_points, t_closed_ns, t_karcher_ns });
    }
    rows
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert!(xs.len() == ys.len() && xs.len() >= 2, "need at least two points");
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|&x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Lower;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> SymmetricMatrix<f64> {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v = rng.gen_range(-scale..scale);
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        SymmetricMatrix::from_dense(dim, data).unwrap()
    }

    fn random_spd(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> SpdPoint<f64> {
        sym_exp(&random_symmetric(rng, dim, scale))
    }

    fn max_abs_diff(a: &SymmetricMatrix<f64>, b: &SymmetricMatrix<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn constructor_validates() {
        assert!(matches!(
            SymmetricMatrix::from_dense(2, vec![1.0, 0.5, 0.4, 1.0]),
            Err(SpdError::Asymmetric { .. })
        ));
        assert!(matches!(
            SymmetricMatrix::from_dense(2, vec![1.0, f64::NAN, f64::NAN, 1.0]),
            Err(SpdError::NonFinite { .. })
        ));
        assert!(matches!(
            SymmetricMatrix::from_dense(2, vec![1.0; 3]),
            Err(SpdError::DataLength { .. })
        ));
        // Asymmetry within the tolerance is mirrored away, exactly.
        let m = SymmetricMatrix::from_dense(2, vec![1.0, 0.5 + 1e-13, 0.5, 1.0]).unwrap();
        assert_eq!(m.get(0, 1), m.get(1, 0));
        assert_eq!(m.get(0, 1), 0.5);
    }

    #[test]
    fn eigh_reconstructs_and_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for dim in [1usize, 2, 3, 5, 8] {
            let m = random_symmetric(&mut rng, dim, 2.0);
            let Eigh { values, vectors } = eigh(&m);
            // V L V^T == M.
            let mut scaled = vectors.clone();
            for r in 0..dim {
                for k in 0..dim {
                    scaled[r * dim + k] *= values[k];
                }
            }
            let mut vt = vec![0.0; dim * dim];
            for r in 0..dim {
                for c in 0..dim {
                    vt[r * dim + c] = vectors[c * dim + r];
                }
            }
            let recon = matmul(dim, &scaled, &vt);
            for (a, b) in recon.iter().zip(m.data()) {
                assert!((a - b).abs() < 1e-12, "reconstruction off by {}", (a - b).abs());
            }
            // V^T V == I.
            let vtv = matmul(dim, &vt, &vectors);
            for i in 0..dim {
                for j in 0..dim {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((vtv[i * dim + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eigh_on_diagonal_matrix_is_exact() {
        let m = SymmetricMatrix::from_dense(3, vec![
            3.0, 0.0, 0.0,
            0.0, -1.0, 0.0,
            0.0, 0.0, 0.5,
        ])
        .unwrap();
        let mut values = eigh(&m).values;
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(values, vec![-1.0, 0.5, 3.0]);
    }

    #[test]
    fn exp_and_log_are_mutually_inverse_on_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let s = random_symmetric(&mut rng, 4, 1.0);
            let p = sym_exp(&s);
            let back = spd_matrix_log(&p);
            assert!(max_abs_diff(&s, &back) < 1e-10);
        }
    }

    #[test]
    fn cholesky_round_trips_and_reports_failures() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..50 {
            let p = random_spd(&mut rng, 4, 0.8);
            let l = cholesky_decompose(p.as_symmetric()).unwrap();
            let back = cholesky_compose(&l);
            assert!(max_abs_diff(p.as_symmetric(), &back) < 1e-12);
        }
        // Factor then recompose is the identity on factors too, because the
        // positive-diagonal Cholesky factor is unique.
        let l = CholeskyPoint::from_packed(3, vec![1.5f64, -0.3, 0.8, 0.1, 0.4, 2.0]).unwrap();
        let l2 = cholesky_decompose(&cholesky_compose(&l)).unwrap();
        for (a, b) in l2.packed().iter().zip(l.packed()) {
            assert!((a - b).abs() < 1e-14);
        }
        // Indefinite matrix: eigenvalues 3 and -1, pivot failure at row 1.
        let ind = SymmetricMatrix::from_dense(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(
            cholesky_decompose(&ind),
            Err(SpdError::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn spd_exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let base = random_spd(&mut rng, 3, 0.6);
            let v = random_symmetric(&mut rng, 3, 0.7);
            let moved = spd_exp(&base, &v).unwrap();
            let back = spd_log(&base, &moved).unwrap();
            assert!(max_abs_diff(&v, &back) < 1e-9);
            // And the other composition order.
            let q = random_spd(&mut rng, 3, 0.6);
            let tangent = spd_log(&base, &q).unwrap();
            let reached = spd_exp(&base, &tangent).unwrap();
            assert!(max_abs_diff(q.as_symmetric(), reached.as_symmetric()) < 1e-9);
        }
    }

    #[test]
    fn spd_exp_at_identity_is_matrix_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let v = random_symmetric(&mut rng, 3, 0.9);
        let a = spd_exp(&SpdPoint::identity(3), &v).unwrap();
        let b = sym_exp(&v);
        assert!(max_abs_diff(a.as_symmetric(), b.as_symmetric()) < 1e-12);
    }

    #[test]
    fn affine_distance_reference_value() {
        // d(I, diag(e^2, 1)) = (1/2) ||diag(2, 0)||_F = 1.
        let p = SpdPoint::from_symmetric(
            SymmetricMatrix::from_dense(2, vec![(2.0f64).exp(), 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let d = affine_invariant_distance(&SpdPoint::identity(2), &p).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_distance_is_congruence_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let p = random_spd(&mut rng, 3, 0.5);
        let q = random_spd(&mut rng, 3, 0.5);
        let d0 = affine_invariant_distance(&p, &q).unwrap();

        // Congruence by a random triangular factor A: X -> A X A^T.
        let a = crate::geometry::tests_support::random_point_f64(&mut rng, 3);
        let dense_a = a.to_dense();
        let congruence = |x: &SpdPoint<f64>| -> SpdPoint<f64> {
            let dim = 3;
            let mut at = vec![0.0; dim * dim];
            for r in 0..dim {
                for c in 0..dim {
                    at[r * dim + c] = dense_a[c * dim + r];
                }
            }
            let prod = matmul(dim, &dense_a, &matmul(dim, x.as_symmetric().data(), &at));
            SpdPoint::from_symmetric(symmetrize(dim, prod)).unwrap()
        };
        let d1 = affine_invariant_distance(&congruence(&p), &congruence(&q)).unwrap();
        assert!((d0 - d1).abs() < 1e-9, "distance moved from {d0} to {d1}");
    }

    #[test]
    fn two_point_flow_lands_on_the_geodesic_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let p = random_spd(&mut rng, 3, 0.5);
        let q = random_spd(&mut rng, 3, 0.5);
        // Midpoint in closed form: Exp_P((1/2) Log_P(Q)).
        let half_log = spd_log(&p, &q).unwrap().scale(0.5);
        let midpoint = spd_exp(&p, &half_log).unwrap();
        let flowed = karcher_flow_affine(&[p, q], KarcherOpts::default()).unwrap();
        assert!(max_abs_diff(midpoint.as_symmetric(), flowed.mean.as_symmetric()) < 1e-8);
    }

    #[test]
    fn triangular_flow_matches_closed_form_fast() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let points: Vec<CholeskyPoint<f64>> = (0..5)
            .map(|_| {
                let entries: Vec<f64> =
                    (0..crate::geometry::tri_len(3)).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut e = entries;
                for i in 0..3 {
                    e[tri_index(i, i)] = e[tri_index(i, i)].exp();
                }
                CholeskyPoint::from_packed(3, e).unwrap()
            })
            .collect();
        let closed = crate::geometry::frechet_mean(&points).unwrap();
        let flowed = karcher_flow_cholesky(&points, KarcherOpts::default()).unwrap();
        assert!(flowed.iterations <= 2, "took {} iterations", flowed.iterations);
        for (a, b) in flowed.mean.packed().iter().zip(closed.packed()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn nonconvergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let points: Vec<SpdPoint<f64>> = (0..3).map(|_| random_spd(&mut rng, 2, 0.8)).collect();
        let opts = KarcherOpts { max_iter: 0, tol: 1e-16, step: 1.0 };
        assert!(matches!(
            karcher_flow_affine(&points, opts),
            Err(SpdError::NonConvergence { .. })
        ));
    }

    #[test]
    fn loglog_slope_recovers_exact_power_laws() {
        let xs = [1.0f64, 2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(1.17)).collect();
        assert!((fit_loglog_slope(&xs, &ys) - 1.17).abs() < 1e-12);
    }

    #[test]
    fn benchmark_smoke() {
        let rows = complexity_benchmark(&[2, 3], 3, 1, 99);
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.t_closed_ns > 0);
            assert!(row.t_karcher_ns > 0);
        }
    }
}
