//! Front end: raw multivariate series in, manifold-point sequences out.
//!
//! Each window (or single timepoint, for irregular data) passes through a
//! small 1-D convolution stack, its features become a covariance estimate
//! shrunk toward a scaled identity, and the Cholesky factor of that
//! estimate is the emitted point. Shrinkage plus a diagonal jitter make the
//! estimate positive definite for any input, including all-zero and
//! rank-deficient windows, so the factorization cannot fail. The whole
//! pipeline is differentiable in the stack parameters: the factorization
//! runs the standard algorithm on whatever scalar type flows in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CholeskyPoint, GeometryError};
use crate::scalar::Scalar;
use crate::spd::{self, SpdError, SymmetricMatrix};

/// Relative diagonal jitter applied to covariance estimates.
const JITTER_RELATIVE: f64 = 1e-6;
/// Absolute jitter floor, the sole diagonal mass for all-zero features.
const JITTER_ABSOLUTE: f64 = 1e-8;
/// Lower clamp for the shrinkage intensity.
const RHO_MIN: f64 = 0.01;
/// Negative slope of the leaky rectifier between convolution layers.
const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid sequence: {reason}")]
    InvalidSequence { reason: String },
    #[error("sequence length {len} is shorter than window length {window}")]
    TooShort { len: usize, window: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("window stride must be at least 1")]
    ZeroStride,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Spd(#[from] SpdError),
}

type Result<T> = std::result::Result<T, EncoderError>;

/// One observation: a timestamp, one value per channel, and per-channel
/// observed flags. Values at unobserved channels are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

/// A validated multivariate series: strictly increasing timestamps, fixed
/// channel count, at least one observed channel per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedSequence {
    channels: usize,
    samples: Vec<Sample>,
}

impl TimedSequence {
    // `!(a > b)` instead of `a <= b`: the negation also rejects NaN timestamps.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(channels: usize, samples: Vec<Sample>) -> Result<Self> {
        if channels == 0 {
            return Err(EncoderError::InvalidSequence { reason: "zero channels".into() });
        }
        if samples.is_empty() {
            return Err(EncoderError::InvalidSequence { reason: "no samples".into() });
        }
        for (i, s) in samples.iter().enumerate() {
            if s.values.len() != channels || s.mask.len() != channels {
                return Err(EncoderError::InvalidSequence {
                    reason: format!(
                        "sample {i} has {} values and {} mask entries for {channels} channels",
                        s.values.len(),
                        s.mask.len()
                    ),
                });
            }
            if !s.t.is_finite() {
                return Err(EncoderError::InvalidSequence {
                    reason: format!("sample {i} has non-finite timestamp"),
                });
            }
            if !s.mask.iter().any(|&m| m) {
                return Err(EncoderError::InvalidSequence {
                    reason: format!("sample {i} has no observed channel"),
                });
            }
            for (c, (&v, &m)) in s.values.iter().zip(&s.mask).enumerate() {
                if m && !v.is_finite() {
                    return Err(EncoderError::InvalidSequence {
                        reason: format!("sample {i} channel {c} observed but non-finite"),
                    });
                }
            }
            if i > 0 && !(s.t > samples[i - 1].t) {
                return Err(EncoderError::InvalidSequence {
                    reason: format!(
                        "timestamps not strictly increasing at sample {i} ({} after {})",
                        s.t,
                        samples[i - 1].t
                    ),
                });
            }
        }
        Ok(TimedSequence { channels, samples })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A contiguous slice of a sequence in channel-major layout
/// (`channels x len`), with its per-cell mask and the covered time span.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub channels: usize,
    pub len: usize,
    /// `data[c * len + j]`: channel `c` at column `j`.
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub t_start: f64,
    pub t_end: f64,
}

impl FeatureWindow {
    /// Midpoint of the covered span; the timestamp the emitted point
    /// carries.
    pub fn t_center(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }
}

/// Slices a sequence into `floor((T - len) / stride) + 1` contiguous
/// windows. Length 1 is allowed (the per-timepoint mode relies on it);
/// covariance over time needs length at least 2.
pub fn window(seq: &TimedSequence, len: usize, stride: usize) -> Result<Vec<FeatureWindow>> {
    if len == 0 {
        return Err(EncoderError::ZeroWindow);
    }
    if stride == 0 {
        return Err(EncoderError::ZeroStride);
    }
    let t = seq.len();
    if t < len {
        return Err(EncoderError::TooShort { len: t, window: len });
    }
    let count = (t - len) / stride + 1;
    let channels = seq.channels();
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let cols = &seq.samples()[start..start + len];
        let mut data = vec![0.0; channels * len];
        let mut mask = vec![false; channels * len];
        for (j, s) in cols.iter().enumerate() {
            for c in 0..channels {
                if s.mask[c] {
                    data[c * len + j] = s.values[c];
                    mask[c * len + j] = true;
                }
            }
        }
        out.push(FeatureWindow {
            channels,
            len,
            data,
            mask,
            t_start: cols[0].t,
            t_end: cols[len - 1].t,
        });
    }
    Ok(out)
}

/// One 1-D convolution layer: valid padding, stride 1, leaky rectifier,
/// optional width-2 max pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default)]
    pub max_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EncoderMode {
    /// Sliding windows; covariance taken over the window's time columns.
    Windowed { len: usize, stride: usize },
    /// One point per observation; covariance taken over feature channels
    /// of a kernel-1 stack, missing channels filled with zero.
    PerTimepoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    #[serde(flatten)]
    pub mode: EncoderMode,
    /// Empty means the identity feature map.
    #[serde(default)]
    pub layers: Vec<ConvLayer>,
}

/// Channel count of the feature map's output.
pub fn output_channels(cfg: &EncoderConfig, in_channels: usize) -> usize {
    cfg.layers.last().map_or(in_channels, |l| l.out_channels)
}

/// Number of scalars parameterizing the feature map.
pub fn encoder_param_count(cfg: &EncoderConfig, in_channels: usize) -> usize {
    let mut c_in = in_channels;
    let mut n = 0;
    for layer in &cfg.layers {
        n += layer.out_channels * c_in * layer.kernel + layer.out_channels;
        c_in = layer.out_channels;
    }
    n
}

/// Fresh feature-map parameters, uniform in
/// `(-1/sqrt(fan_in), 1/sqrt(fan_in))` per layer.
pub fn init_encoder_params(
    cfg: &EncoderConfig,
    in_channels: usize,
    rng: &mut impl rand::Rng,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoder_param_count(cfg, in_channels));
    let mut c_in = in_channels;
    for layer in &cfg.layers {
        let fan_in = c_in * layer.kernel;
        let s = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(layer.out_channels * fan_in + layer.out_channels) {
            out.push(rng.gen_range(-s..s));
        }
        c_in = layer.out_channels;
    }
    out
}

fn validate_layers(cfg: &EncoderConfig) -> Result<()> {
    for (i, l) in cfg.layers.iter().enumerate() {
        if l.out_channels == 0 || l.kernel == 0 {
            return Err(EncoderError::Shape(format!(
                "layer {i} has zero out_channels or kernel"
            )));
        }
    }
    if matches!(cfg.mode, EncoderMode::PerTimepoint) {
        for (i, l) in cfg.layers.iter().enumerate() {
            if l.kernel != 1 || l.max_pool {
                return Err(EncoderError::Shape(format!(
                    "per-timepoint mode requires kernel-1 layers without pooling (layer {i})"
                )));
            }
        }
    }
    if let EncoderMode::Windowed { len, stride } = cfg.mode {
        if len < 2 {
            return Err(EncoderError::Shape(
                "windowed mode needs a window length of at least 2".into(),
            ));
        }
        if stride == 0 {
            return Err(EncoderError::ZeroStride);
        }
    }
    Ok(())
}

/// Applies the convolution stack to `channels x m` features in
/// channel-major layout. Returns the output in the same layout along with
/// its column count.
pub fn feature_map<T: Scalar>(
    cfg: &EncoderConfig,
    params: &[T],
    in_channels: usize,
    input: &[T],
    m: usize,
) -> Result<(Vec<T>, usize)> {
    if input.len() != in_channels * m {
        return Err(EncoderError::Shape(format!(
            "input length {} is not channels {in_channels} x columns {m}",
            input.len()
        )));
    }
    let expected = encoder_param_count(cfg, in_channels);
    if params.len() != expected {
        return Err(EncoderError::Shape(format!(
            "parameter length {} does not match the stack (needs {expected})",
            params.len()
        )));
    }

    let mut act = input.to_vec();
    let mut c_in = in_channels;
    let mut cols = m;
    let mut offset = 0;
    let slope = T::of(LEAKY_SLOPE);

    for layer in &cfg.layers {
        let k = layer.kernel;
        if cols < k {
            return Err(EncoderError::Shape(format!(
                "{cols} columns left but the next kernel needs {k}"
            )));
        }
        let out_cols = cols - k + 1;
        let w_len = layer.out_channels * c_in * k;
        let weights = &params[offset..offset + w_len];
        let biases = &params[offset + w_len..offset + w_len + layer.out_channels];
        offset += w_len + layer.out_channels;

        let mut next = vec![T::zero(); layer.out_channels * out_cols];
        for o in 0..layer.out_channels {
            for j in 0..out_cols {
                let mut s = biases[o];
                for ci in 0..c_in {
                    for kk in 0..k {
                        s = s + weights[o * c_in * k + ci * k + kk] * act[ci * cols + j + kk];
                    }
                }
                // Leaky rectifier.
                next[o * out_cols + j] = if s >= T::zero() { s } else { s * slope };
            }
        }
        act = next;
        cols = out_cols;
        c_in = layer.out_channels;

        if layer.max_pool {
            if cols < 2 {
                return Err(EncoderError::Shape(
                    "max pooling needs at least 2 columns".into(),
                ));
            }
            let pooled_cols = cols / 2;
            let mut pooled = vec![T::zero(); c_in * pooled_cols];
            for c in 0..c_in {
                for j in 0..pooled_cols {
                    pooled[c * pooled_cols + j] =
                        act[c * cols + 2 * j].max(act[c * cols + 2 * j + 1]);
                }
            }
            act = pooled;
            cols = pooled_cols;
        }
    }
    Ok((act, cols))
}

/// Uncentered second moment `(1/m) F F^T` of `n x m` channel-major
/// features; exactly symmetric in storage because each entry is computed
/// once and mirrored.
pub fn sample_second_moment<T: Scalar>(features: &[T], n: usize, m: usize) -> Result<SymmetricMatrix<T>> {
    if m == 0 || features.len() != n * m {
        return Err(EncoderError::Shape(format!(
            "features length {} is not rows {n} x columns {m} (m >= 1)",
            features.len()
        )));
    }
    let inv_m = T::of(1.0 / m as f64);
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = T::zero();
            for c in 0..m {
                s = s + features[i * m + c] * features[j * m + c];
            }
            let v = s * inv_m;
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    SymmetricMatrix::from_dense(n, data).map_err(EncoderError::from)
}

/// Oracle-approximating shrinkage toward the scaled identity, plus a
/// diagonal jitter, so the result is strictly positive definite for every
/// input, rank-deficient and all-zero included. Returns the estimate and
/// the shrinkage intensity actually used.
///
/// An `m` of zero (every column masked away) yields the jitter floor
/// alone: `JITTER_ABSOLUTE * I`.
pub fn shrinkage_covariance<T: Scalar>(
    features: &[T],
    n: usize,
    m: usize,
) -> Result<(SymmetricMatrix<T>, T)> {
    let (s, tr, tr_sq) = if m == 0 {
        if !features.is_empty() {
            return Err(EncoderError::Shape("zero columns but nonempty features".into()));
        }
        (SymmetricMatrix::identity(n).scale(T::zero()), T::zero(), T::zero())
    } else {
        let s = sample_second_moment(features, n, m)?;
        let tr = s.trace();
        let tr_sq = {
            let mut acc = T::zero();
            for v in s.data() {
                acc = acc + *v * *v;
            }
            acc
        };
        (s, tr, tr_sq)
    };

    for v in s.data() {
        if !v.is_finite() {
            return Err(EncoderError::Shape("non-finite covariance entry".into()));
        }
    }

    let nf = T::of(n as f64);
    let two_over_n = T::of(2.0 / n as f64);
    let num = (T::one() - two_over_n) * tr_sq + tr * tr;
    let den = (T::of(m as f64) + T::one() - two_over_n) * (tr_sq - tr * tr / nf);

    let rho = if den.to_double() <= 0.0 {
        T::one()
    } else {
        let r = num / den;
        if r.to_double() < RHO_MIN {
            T::of(RHO_MIN)
        } else if r.to_double() > 1.0 {
            T::one()
        } else {
            r
        }
    };

    let target_scale = tr / nf;
    let jitter = target_scale * T::of(JITTER_RELATIVE) + T::of(JITTER_ABSOLUTE);
    let one_minus_rho = T::one() - rho;
    let mut data = s.data().to_vec();
    for i in 0..n {
        for j in 0..n {
            let mut v = data[i * n + j] * one_minus_rho;
            if i == j {
                v = v + rho * target_scale + jitter;
            }
            data[i * n + j] = v;
        }
    }
    let c = SymmetricMatrix::from_dense(n, data).map_err(EncoderError::from)?;
    Ok((c, rho))
}

/// Drops masked columns from a window: keeps only columns where every
/// channel is observed. Returns channel-major data and the kept count.
fn observed_columns<T: Scalar>(w: &FeatureWindow) -> (Vec<T>, usize) {
    let keep: Vec<usize> = (0..w.len)
        .filter(|&j| (0..w.channels).all(|c| w.mask[c * w.len + j]))
        .collect();
    let mut data = Vec::with_capacity(w.channels * keep.len());
    for c in 0..w.channels {
        for &j in &keep {
            data.push(T::of(w.data[c * w.len + j]));
        }
    }
    (data, keep.len())
}

/// Full encoding pipeline: windows (or timepoints) to manifold points with
/// their timestamps. Differentiable in `params`.
pub fn encode<T: Scalar>(
    seq: &TimedSequence,
    params: &[T],
    cfg: &EncoderConfig,
) -> Result<Vec<(CholeskyPoint<T>, f64)>> {
    validate_layers(cfg)?;
    let in_channels = seq.channels();
    let n_out = output_channels(cfg, in_channels);

    let windows = match cfg.mode {
        EncoderMode::Windowed { len, stride } => window(seq, len, stride)?,
        EncoderMode::PerTimepoint => window(seq, 1, 1)?,
    };

    let mut out = Vec::with_capacity(windows.len());
    for w in &windows {
        let (cols, m) = match cfg.mode {
            // Columns with any missing channel are dropped before the
            // feature map; an emptied window falls through to the jitter
            // floor below.
            EncoderMode::Windowed { .. } => observed_columns::<T>(w),
            // Per-timepoint inputs keep their single column with missing
            // channels zero-filled; dropping it would delete the
            // observation.
            EncoderMode::PerTimepoint => {
                let mut data = Vec::with_capacity(w.channels);
                for c in 0..w.channels {
                    data.push(if w.mask[c] { T::of(w.data[c]) } else { T::zero() });
                }
                (data, 1)
            }
        };

        let (features, m_out) = if m == 0 {
            (Vec::new(), 0)
        } else {
            feature_map(cfg, params, in_channels, &cols, m)?
        };
        let (cov, _rho) = shrinkage_covariance(&features, n_out, m_out)?;
        let l = spd::cholesky_decompose(&cov)?;
        out.push((l, w.t_center()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Lower;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain_sequence(channels: usize, t_len: usize, seed: u64) -> TimedSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..t_len)
            .map(|i| Sample {
                t: i as f64,
                values: (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                mask: vec![true; channels],
            })
            .collect();
        TimedSequence::new(channels, samples).unwrap()
    }

    fn identity_cfg(len: usize, stride: usize) -> EncoderConfig {
        EncoderConfig { mode: EncoderMode::Windowed { len, stride }, layers: vec![] }
    }

    #[test]
    fn sequence_validation() {
        let bad_t = TimedSequence::new(
            1,
            vec![
                Sample { t: 1.0, values: vec![0.0], mask: vec![true] },
                Sample { t: 1.0, values: vec![0.0], mask: vec![true] },
            ],
        );
        assert!(matches!(bad_t, Err(EncoderError::InvalidSequence { .. })));

        let no_obs = TimedSequence::new(
            2,
            vec![Sample { t: 0.0, values: vec![0.0, 0.0], mask: vec![false, false] }],
        );
        assert!(matches!(no_obs, Err(EncoderError::InvalidSequence { .. })));

        let masked_nan = TimedSequence::new(
            2,
            vec![Sample { t: 0.0, values: vec![1.0, f64::NAN], mask: vec![true, false] }],
        );
        assert!(masked_nan.is_ok(), "unobserved values may be garbage");
    }

    #[test]
    fn window_counts_match_the_arithmetic() {
        let seq = plain_sequence(2, 10, 1);
        assert_eq!(window(&seq, 5, 5).unwrap().len(), 2);
        assert_eq!(window(&seq, 10, 1).unwrap().len(), 1);
        assert_eq!(window(&seq, 1, 1).unwrap().len(), 10);
        assert!(matches!(
            window(&plain_sequence(2, 3, 2), 5, 1),
            Err(EncoderError::TooShort { len: 3, window: 5 })
        ));
    }

    #[test]
    fn windows_carry_center_timestamps() {
        let seq = plain_sequence(1, 10, 3);
        let ws = window(&seq, 5, 5).unwrap();
        assert_eq!(ws[0].t_start, 0.0);
        assert_eq!(ws[0].t_end, 4.0);
        assert_eq!(ws[0].t_center(), 2.0);
        assert_eq!(ws[1].t_center(), 7.0);
    }

    #[test]
    fn empty_stack_is_the_identity_map() {
        let cfg = identity_cfg(4, 2);
        let input = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (out, m) = feature_map(&cfg, &[], 2, &input, 4).unwrap();
        assert_eq!(m, 4);
        assert_eq!(out, input);
    }

    #[test]
    fn identity_kernel_copies_the_input() {
        let cfg = EncoderConfig {
            mode: EncoderMode::PerTimepoint,
            layers: vec![ConvLayer { out_channels: 2, kernel: 1, max_pool: false }],
        };
        // Weights: 2x2x1 identity, bias zero.
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let input = vec![0.5, -0.25, 2.0, 1.5, 0.75, -1.0];
        let (out, m) = feature_map(&cfg, &params, 2, &input, 3).unwrap();
        assert_eq!(m, 3);
        // Positive entries copy exactly; negative ones pass the leaky slope.
        for (o, i) in out.iter().zip(&input) {
            if *i >= 0.0 {
                assert_eq!(o, i);
            } else {
                assert_eq!(*o, i * LEAKY_SLOPE);
            }
        }
    }

    #[test]
    fn conv_shrinks_columns_and_pooling_halves_them() {
        let cfg = EncoderConfig {
            mode: EncoderMode::Windowed { len: 8, stride: 8 },
            layers: vec![ConvLayer { out_channels: 3, kernel: 2, max_pool: true }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<f64> = (0..encoder_param_count(&cfg, 2)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let input: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_out, m) = feature_map(&cfg, &params, 2, &input, 8).unwrap();
        // 8 columns -> conv(2) -> 7 -> pool -> 3.
        assert_eq!(m, 3);
    }

    #[test]
    fn second_moment_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let doubled: Vec<f64> = f.iter().map(|v| 2.0 * v).collect();
        let a = sample_second_moment(&f, 3, 4).unwrap();
        let b = sample_second_moment(&doubled, 3, 4).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, 4.0 * x);
        }
    }

    #[test]
    fn single_column_forces_full_shrinkage() {
        let f = vec![1.0, 2.0, 2.0, 1.0];
        let n = 4;
        let (c, rho) = shrinkage_covariance(&f, n, 1).unwrap();
        assert_eq!(rho, 1.0);
        let norm_sq: f64 = f.iter().map(|v| v * v).sum();
        let expect = norm_sq / n as f64;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    let got = c.get(i, i);
                    assert!((got - expect) / expect < 1e-5 && got > expect);
                } else {
                    assert_eq!(c.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn many_anisotropic_samples_drive_shrinkage_to_the_floor() {
        // Distinct per-channel scales: the second moment is far from a
        // scaled identity, so with plenty of columns the optimal shrinkage
        // intensity is near zero. (Isotropic features would instead drive
        // rho to 1, which is also optimal: the target equals the truth.)
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m) = (4, 2000);
        let f: Vec<f64> = (0..n * m)
            .map(|idx| {
                let channel = idx / m;
                (channel + 1) as f64 * rng.gen_range(-1.0..1.0)
            })
            .collect();
        let (_c, rho) = shrinkage_covariance(&f, n, m).unwrap();
        assert!(rho < 0.05, "rho {rho} did not shrink");
    }

    #[test]
    fn zero_features_yield_the_jitter_floor() {
        let (c, rho) = shrinkage_covariance(&[0.0; 4], 2, 2).unwrap();
        assert_eq!(rho, 1.0);
        assert_eq!(c.get(0, 0), JITTER_ABSOLUTE);
        assert_eq!(c.get(0, 1), 0.0);
        // No columns at all: same floor.
        let (c, _) = shrinkage_covariance::<f64>(&[], 2, 0).unwrap();
        assert_eq!(c.get(1, 1), JITTER_ABSOLUTE);
    }

    #[test]
    fn shrunk_covariance_always_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2000 {
            let n = rng.gen_range(1..6);
            let m = rng.gen_range(1..5);
            let mut f: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // Rank-deficient variants: duplicate or zero columns.
            if m > 1 && rng.gen_bool(0.3) {
                for i in 0..n {
                    f[i * m + 1] = f[i * m];
                }
            }
            if rng.gen_bool(0.2) {
                f.iter_mut().for_each(|v| *v = 0.0);
            }
            let (c, _) = shrinkage_covariance(&f, n, m).unwrap();
            let l = spd::cholesky_decompose(&c).unwrap();
            for i in 0..n {
                assert!(l.diag(i) > 0.0);
            }
        }
    }

    #[test]
    fn encode_zero_input_gives_identical_floor_points() {
        let samples = (0..8)
            .map(|i| Sample { t: i as f64, values: vec![0.0, 0.0], mask: vec![true, true] })
            .collect();
        let seq = TimedSequence::new(2, samples).unwrap();
        let cfg = identity_cfg(4, 2);
        let points = encode::<f64>(&seq, &[], &cfg).unwrap();
        assert_eq!(points.len(), 3);
        let expect = (JITTER_ABSOLUTE).sqrt();
        for (p, _) in &points {
            assert_eq!(p.diag(0), expect);
            assert_eq!(p.diag(1), expect);
            assert_eq!(p.entry(1, 0), 0.0);
        }
        // All windows identical.
        assert_eq!(points[0].0, points[1].0);
    }

    #[test]
    fn masked_columns_drop_out_of_windowed_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let values: Vec<Vec<f64>> =
            (0..4).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        // A sequence with column 2 masked out on one channel must encode
        // like the sequence with that column removed outright.
        let masked = TimedSequence::new(
            2,
            values
                .iter()
                .enumerate()
                .map(|(i, v)| Sample {
                    t: i as f64,
                    values: v.clone(),
                    mask: if i == 2 { vec![true, false] } else { vec![true, true] },
                })
                .collect(),
        )
        .unwrap();
        // Reference: drop the column entirely.
        let dropped = TimedSequence::new(
            2,
            values
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != 2)
                .map(|(i, v)| Sample { t: i as f64, values: v.clone(), mask: vec![true, true] })
                .collect(),
        )
        .unwrap();

        let cfg = identity_cfg(4, 1);
        let cfg3 = identity_cfg(3, 1);
        let a = encode::<f64>(&masked, &[], &cfg).unwrap();
        let b = encode::<f64>(&dropped, &[], &cfg3).unwrap();
        assert_eq!(a[0].0, b[0].0);
    }

    #[test]
    fn per_timepoint_zero_fills_missing_channels() {
        let seq = TimedSequence::new(
            2,
            vec![Sample { t: 0.0, values: vec![3.0, 99.0], mask: vec![true, false] }],
        )
        .unwrap();
        let cfg = EncoderConfig { mode: EncoderMode::PerTimepoint, layers: vec![] };
        let points = encode::<f64>(&seq, &[], &cfg).unwrap();
        // Second moment of (3, 0): scaled identity with trace 9/2 per entry.
        let l = &points[0].0;
        assert!(l.entry(1, 0).abs() < 1e-12);
        let expect = (9.0 / 2.0 + 1e-6 * 9.0 / 2.0 + JITTER_ABSOLUTE).sqrt();
        assert!((l.diag(0) - expect).abs() < 1e-12);
        assert_eq!(l.diag(0), l.diag(1));
    }

    #[test]
    fn per_timepoint_rejects_wide_kernels() {
        let cfg = EncoderConfig {
            mode: EncoderMode::PerTimepoint,
            layers: vec![ConvLayer { out_channels: 2, kernel: 2, max_pool: false }],
        };
        let seq = plain_sequence(2, 5, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let params = init_encoder_params(&cfg, 2, &mut rng);
        assert!(matches!(encode(&seq, &params, &cfg), Err(EncoderError::Shape(_))));
    }

    #[test]
    fn encode_is_per_window_stateless() {
        let seq = plain_sequence(2, 9, 23);
        let cfg = EncoderConfig {
            mode: EncoderMode::Windowed { len: 3, stride: 3 },
            layers: vec![ConvLayer { out_channels: 2, kernel: 2, max_pool: false }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let params = init_encoder_params(&cfg, 2, &mut rng);
        let all = encode(&seq, &params, &cfg).unwrap();
        // Encoding a sub-sequence that is exactly one window reproduces that
        // window's point.
        for (w, chunk) in seq.samples().chunks(3).enumerate() {
            let sub = TimedSequence::new(2, chunk.to_vec()).unwrap();
            let one = encode(
                &sub,
                &params,
                &EncoderConfig { mode: EncoderMode::Windowed { len: 3, stride: 3 }, layers: cfg.layers.clone() },
            )
            .unwrap();
            assert_eq!(one.len(), 1);
            assert_eq!(one[0].0, all[w].0);
            assert_eq!(one[0].1, all[w].1);
        }
    }

    #[test]
    fn feature_map_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            mode: EncoderMode::Windowed { len: 5, stride: 5 },
            layers: vec![
                ConvLayer { out_channels: 3, kernel: 2, max_pool: false },
                ConvLayer { out_channels: 2, kernel: 2, max_pool: false },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = init_encoder_params(&cfg, 2, &mut rng);
        let input: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        use crate::ad::{self, Var};
        let (handles, recording) = ad::record(|| {
            let p_vars: Vec<Var> = params.iter().map(|&v| ad::var(v)).collect();
            let in_vars: Vec<Var> = input.iter().map(|&v| ad::constant(v)).collect();
            let (out, _m) = feature_map(&cfg, &p_vars, 2, &in_vars, 5).unwrap();
            (p_vars, out)
        });
        let (p_vars, out) = handles;
        let seeds: Vec<(Var, f64)> = out.iter().copied().zip(upstream.iter().copied()).collect();
        let grads = recording.backward(&seeds);

        let objective = |p: &[f64]| -> f64 {
            let (out, _) = feature_map(&cfg, p, 2, &input, 5).unwrap();
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for k in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grads.wrt(p_vars[k]);
            let denom = fd.abs().max(an.abs());
            if denom > 1e-6 {
                assert!(((fd - an) / denom).abs() < 1e-4, "param {k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn encode_pipeline_is_differentiable_end_to_end() {
        let seq = plain_sequence(2, 6, 37);
        let cfg = EncoderConfig {
            mode: EncoderMode::Windowed { len: 3, stride: 3 },
            layers: vec![ConvLayer { out_channels: 2, kernel: 2, max_pool: false }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = init_encoder_params(&cfg, 2, &mut rng);

        use crate::ad::{self, Var};
        let (p_vars, recording) = ad::record(|| {
            let p_vars: Vec<Var> = params.iter().map(|&v| ad::var(v)).collect();
            let pts = encode(&seq, &p_vars, &cfg).unwrap();
            // Scalar objective: sum of all factor entries of all points.
            let mut s = ad::constant(0.0);
            for (p, _) in &pts {
                for e in p.packed() {
                    s = s + *e;
                }
            }
            (p_vars, s)
        });
        let (p_vars, s) = p_vars;
        let grads = recording.backward(&[(s, 1.0)]);

        let objective = |p: &[f64]| -> f64 {
            let pts = encode(&seq, p, &cfg).unwrap();
            pts.iter().map(|(pt, _)| pt.packed().iter().sum::<f64>()).sum()
        };
        let h = 1e-5;
        for k in 0..params.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = grads.wrt(p_vars[k]);
            let denom = fd.abs().max(an.abs());
            if denom > 1e-6 {
                assert!(((fd - an) / denom).abs() < 1e-4, "param {k}: {fd} vs {an}");
            }
        }
    }
}
