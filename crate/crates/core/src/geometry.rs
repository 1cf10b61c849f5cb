//! Lower-triangular manifold primitives.
//!
//! Points are lower-triangular matrices with strictly positive diagonals,
//! stored packed row-major (length `d(d+1)/2`), so every operation here is
//! linear in the entry count; nothing materializes a dense matrix except
//! the explicit conversion helpers. The metric treats the strict lower
//! triangle as flat Euclidean space and the diagonal logarithmically, which
//! makes the exponential/logarithmic maps, distances, and Fréchet means
//! closed-form.
//!
//! Failure policy: constructors and operations validate dimensions and
//! reject non-finite values instead of letting NaN/Inf propagate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Floor applied to positive-range activations and to reparameterized
/// diagonal parameters, keeping effective diagonals strictly positive.
pub const EPS_POS: f64 = 1e-12;

/// Packed length of a `d x d` lower triangle.
#[inline]
pub fn tri_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Packed index of entry `(i, j)`, requiring `j <= i`.
#[inline]
pub fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("packed length {got} does not match dimension {dim} (needs {expected})")]
    PackedLength { dim: usize, expected: usize, got: usize },
    #[error("{op}: non-finite entry at packed index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: diagonal entry {row} is not strictly positive ({value})")]
    NonPositiveDiagonal { op: &'static str, row: usize, value: f64 },
    #[error("{op}: dense upper triangle must be exactly zero (row {row}, col {col})")]
    DenseNotLower { op: &'static str, row: usize, col: usize },
    #[error("mean of an empty point list")]
    EmptyMean,
    #[error("weight count {weights} does not match point count {points}")]
    WeightCount { points: usize, weights: usize },
    #[error("dimension must be at least 1")]
    ZeroDim,
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Read access shared by points and tangents: a dimension plus packed
/// row-major lower-triangular entries.
pub trait Lower<T: Scalar> {
    fn dim(&self) -> usize;
    fn packed(&self) -> &[T];

    /// Entry `(i, j)` for `j <= i`.
    #[inline]
    fn entry(&self, i: usize, j: usize) -> T {
        self.packed()[tri_index(i, j)]
    }
}

fn check_finite<T: Scalar>(op: &'static str, entries: &[T]) -> Result<()> {
    for (index, e) in entries.iter().enumerate() {
        if !e.is_finite() {
            return Err(GeometryError::NonFinite { op, index });
        }
    }
    Ok(())
}

fn check_len<T>(dim: usize, entries: &[T]) -> Result<()> {
    if dim == 0 {
        return Err(GeometryError::ZeroDim);
    }
    let expected = tri_len(dim);
    if entries.len() != expected {
        return Err(GeometryError::PackedLength { dim, expected, got: entries.len() });
    }
    Ok(())
}

fn check_same_dim<T: Scalar>(expected: &impl Lower<T>, got: &impl Lower<T>) -> Result<()> {
    if expected.dim() != got.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: expected.dim(),
            got: got.dim(),
        });
    }
    Ok(())
}

/// Lower-triangular matrix with a strictly positive, finite diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholeskyPoint<T> {
    dim: usize,
    entries: Vec<T>,
}

/// Packed lower-triangular tangent vector; entries are only required to be
/// finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentLower<T> {
    dim: usize,
    entries: Vec<T>,
}

impl<T: Scalar> Lower<T> for CholeskyPoint<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn packed(&self) -> &[T] {
        &self.entries
    }
}

impl<T: Scalar> Lower<T> for TangentLower<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn packed(&self) -> &[T] {
        &self.entries
    }
}

impl<T: Scalar> CholeskyPoint<T> {
    /// Validates and wraps packed row-major lower-triangular entries.
    // `!(v > 0)` instead of `v <= 0`: the negation also rejects NaN diagonals.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn from_packed(dim: usize, entries: Vec<T>) -> Result<Self> {
        check_len(dim, &entries)?;
        check_finite("cholesky_point", &entries)?;
        for i in 0..dim {
            let v = entries[tri_index(i, i)];
            if !(v > T::zero()) {
                return Err(GeometryError::NonPositiveDiagonal {
                    op: "cholesky_point",
                    row: i,
                    value: v.to_double(),
                });
            }
        }
        Ok(CholeskyPoint { dim, entries })
    }

    /// The identity matrix, the base point of the global chart.
    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        let mut entries = vec![T::zero(); tri_len(dim)];
        for i in 0..dim {
            entries[tri_index(i, i)] = T::one();
        }
        CholeskyPoint { dim, entries }
    }

    /// Diagonal entry `i`.
    #[inline]
    pub fn diag(&self, i: usize) -> T {
        self.entries[tri_index(i, i)]
    }

    /// Dense `d x d` row-major materialization (upper triangle zero).
    pub fn to_dense(&self) -> Vec<T> {
        packed_to_dense(self.dim, &self.entries)
    }

    /// Reads a dense row-major lower-triangular matrix; the upper triangle
    /// must be exactly zero.
    pub fn from_dense(dim: usize, dense: &[T]) -> Result<Self> {
        let entries = dense_to_packed("cholesky_point", dim, dense)?;
        Self::from_packed(dim, entries)
    }

    /// Converts the scalar type entrywise (used to lift `f64` data onto the
    /// tape as constants).
    pub fn map_scalar<U: Scalar>(&self, f: impl Fn(T) -> U) -> CholeskyPoint<U> {
        CholeskyPoint { dim: self.dim, entries: self.entries.iter().map(|&e| f(e)).collect() }
    }
}

impl<T: Scalar> TangentLower<T> {
    /// Validates and wraps packed row-major lower-triangular entries.
    pub fn from_packed(dim: usize, entries: Vec<T>) -> Result<Self> {
        check_len(dim, &entries)?;
        check_finite("tangent_lower", &entries)?;
        Ok(TangentLower { dim, entries })
    }

    /// The zero tangent.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        TangentLower { dim, entries: vec![T::zero(); tri_len(dim)] }
    }

    /// Dense `d x d` row-major materialization (upper triangle zero).
    pub fn to_dense(&self) -> Vec<T> {
        packed_to_dense(self.dim, &self.entries)
    }

    /// Reads a dense row-major lower-triangular matrix; the upper triangle
    /// must be exactly zero.
    pub fn from_dense(dim: usize, dense: &[T]) -> Result<Self> {
        let entries = dense_to_packed("tangent_lower", dim, dense)?;
        Self::from_packed(dim, entries)
    }

    /// Euclidean norm of the packed coordinates.
    pub fn frobenius_norm(&self) -> T {
        self.entries.iter().fold(T::zero(), |a, &e| a + e * e).sqrt()
    }

    /// Converts the scalar type entrywise.
    pub fn map_scalar<U: Scalar>(&self, f: impl Fn(T) -> U) -> TangentLower<U> {
        TangentLower { dim: self.dim, entries: self.entries.iter().map(|&e| f(e)).collect() }
    }
}

fn packed_to_dense<T: Scalar>(dim: usize, entries: &[T]) -> Vec<T> {
    let mut dense = vec![T::zero(); dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            dense[i * dim + j] = entries[tri_index(i, j)];
        }
    }
    dense
}

fn dense_to_packed<T: Scalar>(op: &'static str, dim: usize, dense: &[T]) -> Result<Vec<T>> {
    if dim == 0 {
        return Err(GeometryError::ZeroDim);
    }
    if dense.len() != dim * dim {
        return Err(GeometryError::PackedLength { dim, expected: dim * dim, got: dense.len() });
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            if dense[i * dim + j] != T::zero() {
                return Err(GeometryError::DenseNotLower { op, row: i, col: j });
            }
        }
    }
    let mut entries = Vec::with_capacity(tri_len(dim));
    for i in 0..dim {
        for j in 0..=i {
            entries.push(dense[i * dim + j]);
        }
    }
    Ok(entries)
}

/// Iterates packed indices together with an is-diagonal flag.
#[inline]
fn for_each_entry(dim: usize, mut f: impl FnMut(usize, bool)) {
    let mut p = 0;
    for i in 0..dim {
        for j in 0..=i {
            f(p, i == j);
            p += 1;
        }
    }
}

/// Copy with the diagonal zeroed: the strict lower triangle as a tangent.
pub fn strict_lower<T: Scalar>(x: &impl Lower<T>) -> TangentLower<T> {
    let mut entries = x.packed().to_vec();
    for_each_entry(x.dim(), |p, diag| {
        if diag {
            entries[p] = T::zero();
        }
    });
    TangentLower { dim: x.dim(), entries }
}

/// The diagonal as a vector.
pub fn diag_part<T: Scalar>(x: &impl Lower<T>) -> Vec<T> {
    (0..x.dim()).map(|i| x.entry(i, i)).collect()
}

/// Riemannian inner product of two tangents at `base`: flat on the strict
/// lower triangle, diagonal terms weighted by `base` diagonal inverse
/// squares.
pub fn metric<T: Scalar>(
    base: &CholeskyPoint<T>,
    u: &TangentLower<T>,
    v: &TangentLower<T>,
) -> Result<T> {
    check_same_dim(base, u)?;
    check_same_dim(base, v)?;
    let (bu, uu, vv) = (base.packed(), u.packed(), v.packed());
    let mut acc = T::zero();
    for_each_entry(base.dim(), |p, diag| {
        if diag {
            let b = bu[p];
            acc = acc + uu[p] * vv[p] / (b * b);
        } else {
            acc = acc + uu[p] * vv[p];
        }
    });
    Ok(acc)
}

/// Geodesic distance: Euclidean on strict lower entries, log-Euclidean on
/// diagonals. Symmetric bit-for-bit in its arguments.
pub fn distance<T: Scalar>(l: &CholeskyPoint<T>, k: &CholeskyPoint<T>) -> Result<T> {
    check_same_dim(l, k)?;
    let (lp, kp) = (l.packed(), k.packed());
    let mut acc = T::zero();
    for_each_entry(l.dim(), |p, diag| {
        let d = if diag { lp[p].ln() - kp[p].ln() } else { lp[p] - kp[p] };
        acc = acc + d * d;
    });
    Ok(acc.sqrt())
}

/// Exponential map at `x`: strict lower entries translate, diagonals scale
/// exponentially. Closed under the manifold for all finite inputs.
pub fn exp_map<T: Scalar>(x: &CholeskyPoint<T>, k: &TangentLower<T>) -> Result<CholeskyPoint<T>> {
    check_same_dim(x, k)?;
    let (xp, kp) = (x.packed(), k.packed());
    let mut entries = vec![T::zero(); xp.len()];
    for_each_entry(x.dim(), |p, diag| {
        entries[p] = if diag { xp[p] * (kp[p] / xp[p]).exp() } else { xp[p] + kp[p] };
    });
    CholeskyPoint::from_packed(x.dim(), entries)
}

/// Logarithmic map at base `k`: the inverse of [`exp_map`] at the same base.
pub fn log_map<T: Scalar>(k: &CholeskyPoint<T>, x: &CholeskyPoint<T>) -> Result<TangentLower<T>> {
    check_same_dim(k, x)?;
    let (kp, xp) = (k.packed(), x.packed());
    let mut entries = vec![T::zero(); kp.len()];
    for_each_entry(k.dim(), |p, diag| {
        entries[p] = if diag { kp[p] * (xp[p] / kp[p]).ln() } else { xp[p] - kp[p] };
    });
    TangentLower::from_packed(k.dim(), entries)
}

/// Closed-form Fréchet mean: arithmetic on strict lower entries, geometric
/// on diagonals.
pub fn frechet_mean<T: Scalar>(points: &[CholeskyPoint<T>]) -> Result<CholeskyPoint<T>> {
    if points.is_empty() {
        return Err(GeometryError::EmptyMean);
    }
    let first = &points[0];
    for p in &points[1..] {
        check_same_dim(first, p)?;
    }
    let inv_n = T::of(1.0 / points.len() as f64);
    let mut entries = vec![T::zero(); tri_len(first.dim())];
    for_each_entry(first.dim(), |p, diag| {
        let mut acc = T::zero();
        for pt in points {
            let e = pt.packed()[p];
            acc = acc + if diag { e.ln() } else { e };
        }
        entries[p] = if diag { (acc * inv_n).exp() } else { acc * inv_n };
    });
    CholeskyPoint::from_packed(first.dim(), entries)
}

/// Fréchet mean with one lower-triangular weight matrix per point, applied
/// entrywise inside both the arithmetic and the geometric part.
pub fn weighted_frechet_mean<T: Scalar, W: Lower<T>>(
    points: &[CholeskyPoint<T>],
    weights: &[W],
) -> Result<CholeskyPoint<T>> {
    if points.is_empty() {
        return Err(GeometryError::EmptyMean);
    }
    if points.len() != weights.len() {
        return Err(GeometryError::WeightCount { points: points.len(), weights: weights.len() });
    }
    let first = &points[0];
    for p in &points[1..] {
        check_same_dim(first, p)?;
    }
    for w in weights {
        check_same_dim(first, w)?;
        check_finite("weighted_frechet_mean", w.packed())?;
    }
    let inv_n = T::of(1.0 / points.len() as f64);
    let mut entries = vec![T::zero(); tri_len(first.dim())];
    for_each_entry(first.dim(), |p, diag| {
        let mut acc = T::zero();
        for (pt, w) in points.iter().zip(weights) {
            let e = pt.packed()[p];
            let wp = w.packed()[p];
            acc = acc + if diag { wp * e.ln() } else { wp * e };
        }
        entries[p] = if diag { (acc * inv_n).exp() } else { acc * inv_n };
    });
    CholeskyPoint::from_packed(first.dim(), entries)
}

/// Commutative group operation: strict lower entries add, diagonals
/// multiply.
pub fn translate<T: Scalar>(x: &CholeskyPoint<T>, y: &CholeskyPoint<T>) -> Result<CholeskyPoint<T>> {
    check_same_dim(x, y)?;
    let (xp, yp) = (x.packed(), y.packed());
    let mut entries = vec![T::zero(); xp.len()];
    for_each_entry(x.dim(), |p, diag| {
        entries[p] = if diag { xp[p] * yp[p] } else { xp[p] + yp[p] };
    });
    CholeskyPoint::from_packed(x.dim(), entries)
}

/// Group inverse of [`translate`]: `translate(x, translate_inverse(x))` is
/// the identity up to roundoff.
pub fn translate_inverse<T: Scalar>(x: &CholeskyPoint<T>) -> Result<CholeskyPoint<T>> {
    let xp = x.packed();
    let mut entries = vec![T::zero(); xp.len()];
    for_each_entry(x.dim(), |p, diag| {
        entries[p] = if diag { xp[p].recip() } else { -xp[p] };
    });
    CholeskyPoint::from_packed(x.dim(), entries)
}

fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Candidate-state activation: `tanh` on the strict lower triangle,
/// `softplus` floored at [`EPS_POS`] on the diagonal, so the result is
/// always a valid point.
pub fn split_activation<T: Scalar>(x: &impl Lower<T>) -> Result<CholeskyPoint<T>> {
    check_finite("split_activation", x.packed())?;
    let xp = x.packed();
    let floor = T::of(EPS_POS);
    let mut entries = vec![T::zero(); xp.len()];
    for_each_entry(x.dim(), |p, diag| {
        entries[p] = if diag { softplus(xp[p]).max(floor) } else { xp[p].tanh() };
    });
    CholeskyPoint::from_packed(x.dim(), entries)
}

/// Gate activation: numerically stable logistic sigmoid on every stored
/// entry, diagonal included.
pub fn sigmoid_gate<T: Scalar>(x: &impl Lower<T>) -> Result<CholeskyPoint<T>> {
    check_finite("sigmoid_gate", x.packed())?;
    let xp = x.packed();
    let mut entries = vec![T::zero(); xp.len()];
    for p in 0..xp.len() {
        entries[p] = sigmoid(xp[p]);
    }
    CholeskyPoint::from_packed(x.dim(), entries)
}

/// Entrywise complement `1 - x` over the stored lower triangle. Returned as
/// a tangent because saturated gates may complement to exactly zero.
pub fn one_minus<T: Scalar>(x: &impl Lower<T>) -> Result<TangentLower<T>> {
    check_finite("one_minus", x.packed())?;
    let entries = x.packed().iter().map(|&e| T::one() - e).collect();
    TangentLower::from_packed(x.dim(), entries)
}

/// Entrywise product of two points. Valid whenever both diagonals are
/// positive, which products preserve.
pub fn hadamard<T: Scalar>(x: &CholeskyPoint<T>, y: &CholeskyPoint<T>) -> Result<CholeskyPoint<T>> {
    check_same_dim(x, y)?;
    let entries = x.packed().iter().zip(y.packed()).map(|(&a, &b)| a * b).collect();
    CholeskyPoint::from_packed(x.dim(), entries)
}
