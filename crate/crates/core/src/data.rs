//! Datasets: CSV loading and saving, deterministic observation dropping,
//! a synthetic generator with class-dependent latent covariance paths, and
//! evaluation metrics.
//!
//! Everything randomized is seeded per sequence through a splitmix64 hash,
//! so results do not depend on iteration order or thread count.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderError, Sample, TimedSequence};
use crate::geometry::{self, CholeskyPoint, Lower};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: u64, msg: String },
    #[error("sequence {seq_id}: duplicate timestamp {t}")]
    DuplicateTimestamp { seq_id: String, t: f64 },
    #[error("line {line}: sequence {seq_id} labeled {got} but earlier rows say {first}")]
    LabelMismatch { line: u64, seq_id: String, got: usize, first: usize },
    #[error("sequence {seq_id}: {source}")]
    BadSequence { seq_id: String, source: EncoderError },
    #[error("drop fraction {0} must lie in [0, 1)")]
    BadFraction(f64),
    #[error("empty dataset")]
    Empty,
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("metric inputs invalid: {0}")]
    BadMetricInput(String),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub channels: usize,
    pub n_classes: usize,
}

/// Sequences with their ids, per-sequence class labels, and a train/test
/// assignment. The four vectors run in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub sequences: Vec<TimedSequence>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the parallel-vector and label invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.sequences.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if self.ids.len() != n || self.labels.len() != n || self.split.len() != n {
            return Err(DataError::BadConfig(format!(
                "parallel vectors disagree: {} ids, {n} sequences, {} labels, {} splits",
                self.ids.len(),
                self.labels.len(),
                self.split.len()
            )));
        }
        for (i, seq) in self.sequences.iter().enumerate() {
            if seq.channels() != self.meta.channels {
                return Err(DataError::BadConfig(format!(
                    "sequence {i} has {} channels, dataset says {}",
                    seq.channels(),
                    self.meta.channels
                )));
            }
            if self.labels[i] >= self.meta.n_classes {
                return Err(DataError::BadConfig(format!(
                    "label {} at sequence {i} exceeds {} classes",
                    self.labels[i], self.meta.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Deterministic stratified split: per class, a seeded shuffle sends
    /// the first `fraction` of sequences to the training side.
    pub fn assign_split_by_fraction(&mut self, fraction: f64, seed: u64) {
        let fraction = fraction.clamp(0.0, 1.0);
        let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        let mut classes: Vec<usize> = by_class.keys().copied().collect();
        classes.sort_unstable();
        for class in classes {
            let idx = by_class.get_mut(&class).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class as u64));
            // Fisher-Yates on the class's index list.
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            let n_train = (fraction * idx.len() as f64).floor() as usize;
            for (k, &i) in idx.iter().enumerate() {
                self.split[i] = if k < n_train { Split::Train } else { Split::Test };
            }
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream-independent seed for item `idx` under master `seed`.
fn mix_seed(seed: u64, idx: u64) -> u64 {
    splitmix64(seed ^ splitmix64(idx ^ 0xA076_1D64_78BD_642F))
}

// ---------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------

/// Expected header for `channels` data columns.
fn csv_header(channels: usize) -> Vec<String> {
    let mut h = vec!["seq_id".to_string(), "t".to_string()];
    for c in 0..channels {
        h.push(format!("ch_{c}"));
    }
    h.push("label".to_string());
    h
}

/// Reads the `seq_id,t,ch_0..ch_{k-1},label` schema. Empty value fields
/// mean missing. Rows may arrive in any order; samples are sorted by
/// timestamp per sequence, and sequences keep their first-appearance
/// order. Every loaded sequence starts on the training side.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;

    let headers = reader.headers()?.clone();
    let cols = headers.len();
    if cols < 4 {
        return Err(DataError::Malformed {
            line: 1,
            msg: format!("need at least 4 columns (seq_id,t,ch_0,label), found {cols}"),
        });
    }
    let channels = cols - 3;
    let expected = csv_header(channels);
    for (i, name) in headers.iter().enumerate() {
        if name != expected[i] {
            return Err(DataError::Malformed {
                line: 1,
                msg: format!("header column {i} is {name:?}, expected {:?}", expected[i]),
            });
        }
    }

    struct Row {
        t: f64,
        values: Vec<f64>,
        mask: Vec<bool>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    let mut labels: HashMap<String, (usize, u64)> = HashMap::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let seq_id = record.get(0).unwrap_or("").to_string();
        if seq_id.is_empty() {
            return Err(DataError::Malformed { line, msg: "empty seq_id".into() });
        }
        let t: f64 = record
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| DataError::Malformed { line, msg: "unparseable timestamp".into() })?;
        if !t.is_finite() {
            return Err(DataError::Malformed { line, msg: "non-finite timestamp".into() });
        }

        let mut values = vec![0.0; channels];
        let mut mask = vec![false; channels];
        for c in 0..channels {
            let field = record.get(2 + c).unwrap_or("");
            if field.is_empty() {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| DataError::Malformed {
                line,
                msg: format!("unparseable value in ch_{c}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Malformed {
                    line,
                    msg: format!("non-finite value in ch_{c}"),
                });
            }
            values[c] = v;
            mask[c] = true;
        }
        if !mask.iter().any(|&m| m) {
            return Err(DataError::Malformed {
                line,
                msg: format!("sequence {seq_id}: row has no observed channel"),
            });
        }

        let label: usize = record.get(2 + channels).unwrap_or("").parse().map_err(|_| {
            DataError::Malformed { line, msg: "label must be a non-negative integer".into() }
        })?;
        match labels.get(&seq_id) {
            None => {
                labels.insert(seq_id.clone(), (label, line));
                order.push(seq_id.clone());
            }
            Some(&(first, _)) if first != label => {
                return Err(DataError::LabelMismatch { line, seq_id, got: label, first });
            }
            _ => {}
        }
        rows.entry(seq_id).or_default().push(Row { t, values, mask });
    }

    if order.is_empty() {
        return Err(DataError::Empty);
    }

    let mut ids = Vec::with_capacity(order.len());
    let mut sequences = Vec::with_capacity(order.len());
    let mut label_vec = Vec::with_capacity(order.len());
    let mut n_classes = 0;
    for id in order {
        let mut seq_rows = rows.remove(&id).unwrap();
        seq_rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        for pair in seq_rows.windows(2) {
            if pair[0].t == pair[1].t {
                return Err(DataError::DuplicateTimestamp { seq_id: id, t: pair[0].t });
            }
        }
        let samples: Vec<Sample> = seq_rows
            .into_iter()
            .map(|r| Sample { t: r.t, values: r.values, mask: r.mask })
            .collect();
        let seq = TimedSequence::new(channels, samples)
            .map_err(|source| DataError::BadSequence { seq_id: id.clone(), source })?;
        let (label, _) = labels[&id];
        n_classes = n_classes.max(label + 1);
        ids.push(id);
        sequences.push(seq);
        label_vec.push(label);
    }

    let n = sequences.len();
    let ds = Dataset {
        ids,
        sequences,
        labels: label_vec,
        split: vec![Split::Train; n],
        meta: DatasetMeta { name: "csv".into(), channels, n_classes },
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the same schema `load_csv` reads. Floats print in shortest
/// round-trip form, so a save/load cycle reproduces ids, timestamps,
/// values, masks, and labels exactly. Split assignments are not stored.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(csv_header(ds.meta.channels))?;
    for (i, seq) in ds.sequences.iter().enumerate() {
        for s in seq.samples() {
            let mut record = Vec::with_capacity(ds.meta.channels + 3);
            record.push(ds.ids[i].clone());
            record.push(format!("{}", s.t));
            for c in 0..ds.meta.channels {
                record.push(if s.mask[c] { format!("{}", s.values[c]) } else { String::new() });
            }
            record.push(format!("{}", ds.labels[i]));
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------
// Observation dropping
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DropReport {
    pub requested_fraction: f64,
    pub realized_fraction: f64,
    pub removed_cells: usize,
    /// Sequences discarded because fewer than 2 timesteps survived.
    pub dropped_sequences: usize,
}

/// Removes an exact per-sequence count of observed cells, chosen by a
/// per-sequence rng. Timesteps left with no observed channel disappear;
/// sequences left with fewer than 2 timesteps are dropped from the
/// dataset. A fraction of 0 returns the input unchanged.
pub fn drop_observations(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, DropReport)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DataError::BadFraction(fraction));
    }
    ds.validate()?;
    if fraction == 0.0 {
        return Ok((
            ds.clone(),
            DropReport {
                requested_fraction: 0.0,
                realized_fraction: 0.0,
                removed_cells: 0,
                dropped_sequences: 0,
            },
        ));
    }

    let mut out = Dataset {
        ids: Vec::new(),
        sequences: Vec::new(),
        labels: Vec::new(),
        split: Vec::new(),
        meta: ds.meta.clone(),
    };
    let mut total_observed = 0usize;
    let mut total_removed = 0usize;
    let mut dropped_sequences = 0usize;

    for (i, seq) in ds.sequences.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let mut cells: Vec<(usize, usize)> = Vec::new();
        for (step, s) in seq.samples().iter().enumerate() {
            for (c, &m) in s.mask.iter().enumerate() {
                if m {
                    cells.push((step, c));
                }
            }
        }
        total_observed += cells.len();
        let k = (fraction * cells.len() as f64).round() as usize;
        total_removed += k;

        // Partial Fisher-Yates: the first k entries after shuffling.
        for pos in 0..k {
            let j = rng.gen_range(pos..cells.len());
            cells.swap(pos, j);
        }
        let removed: std::collections::HashSet<(usize, usize)> =
            cells[..k].iter().copied().collect();

        let mut samples = Vec::with_capacity(seq.len());
        for (step, s) in seq.samples().iter().enumerate() {
            let mut sample = s.clone();
            for c in 0..sample.mask.len() {
                if removed.contains(&(step, c)) {
                    sample.mask[c] = false;
                    sample.values[c] = 0.0;
                }
            }
            if sample.mask.iter().any(|&m| m) {
                samples.push(sample);
            }
        }
        if samples.len() < 2 {
            dropped_sequences += 1;
            continue;
        }
        let seq = TimedSequence::new(ds.meta.channels, samples)
            .map_err(|source| DataError::BadSequence { seq_id: ds.ids[i].clone(), source })?;
        out.ids.push(ds.ids[i].clone());
        out.sequences.push(seq);
        out.labels.push(ds.labels[i]);
        out.split.push(ds.split[i]);
    }

    let realized = if total_observed == 0 {
        0.0
    } else {
        total_removed as f64 / total_observed as f64
    };
    Ok((
        out,
        DropReport {
            requested_fraction: fraction,
            realized_fraction: realized,
            removed_cells: total_removed,
            dropped_sequences,
        },
    ))
}

// ---------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------

/// Class-conditional latent paths: each class follows a geodesic between
/// two triangular factors at its own speed, and observations are linear
/// images of white noise under the factor at each step, plus isotropic
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub seed: u64,
    /// Isotropic observation noise added on top of the latent draw.
    pub sigma_obs: f64,
    pub train_fraction: f64,
    /// With shared endpoints, classes differ only in traversal speed.
    pub shared_endpoints: bool,
    /// Log-scale offset applied to endpoint diagonals with opposite signs
    /// for paired classes; larger means easier separation.
    pub class_log_offset: f64,
    /// Geodesic progress is `s^gamma`; entries cycle per class.
    pub speed_exponents: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_class: 100,
            seq_len: 20,
            channels: 4,
            n_classes: 2,
            seed: 7,
            sigma_obs: 0.05,
            train_fraction: 0.7,
            shared_endpoints: false,
            class_log_offset: 0.55,
            speed_exponents: vec![1.0, 1.8],
        }
    }
}

fn validate_synth(cfg: &SynthConfig) -> Result<()> {
    if cfg.n_per_class == 0 {
        return Err(DataError::BadConfig("n_per_class must be positive".into()));
    }
    if cfg.seq_len < 2 {
        return Err(DataError::BadConfig("seq_len must be at least 2".into()));
    }
    if cfg.channels == 0 {
        return Err(DataError::BadConfig("channels must be positive".into()));
    }
    if cfg.n_classes == 0 {
        return Err(DataError::BadConfig("n_classes must be positive".into()));
    }
    if !(cfg.sigma_obs >= 0.0 && cfg.sigma_obs.is_finite()) {
        return Err(DataError::BadConfig("sigma_obs must be finite and non-negative".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(DataError::BadConfig("train_fraction must lie in [0, 1]".into()));
    }
    if cfg.speed_exponents.is_empty()
        || cfg.speed_exponents.iter().any(|g| !(g.is_finite() && *g > 0.0))
    {
        return Err(DataError::BadConfig("speed_exponents must be positive".into()));
    }
    if !cfg.class_log_offset.is_finite() {
        return Err(DataError::BadConfig("class_log_offset must be finite".into()));
    }
    Ok(())
}

/// Multiplies factor diagonals by `exp(delta)`, leaving strict entries.
fn scale_log_diag(l: &CholeskyPoint<f64>, delta: f64) -> CholeskyPoint<f64> {
    let f = delta.exp();
    let d = l.dim();
    let mut entries = l.packed().to_vec();
    for i in 0..d {
        entries[geometry::tri_index(i, i)] *= f;
    }
    CholeskyPoint::from_packed(d, entries).expect("scaling a positive diagonal keeps it positive")
}

/// Base endpoints shared by all classes, before class offsets.
fn base_endpoints(cfg: &SynthConfig) -> (CholeskyPoint<f64>, CholeskyPoint<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xE0D9));
    let mut draw = |spread_diag: f64, spread_strict: f64| {
        let d = cfg.channels;
        let mut entries = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in 0..=i {
                if i == j {
                    entries.push(rng.gen_range(-spread_diag..spread_diag).exp());
                } else {
                    entries.push(rng.gen_range(-spread_strict..spread_strict));
                }
            }
        }
        CholeskyPoint::from_packed(d, entries).unwrap()
    };
    (draw(0.3, 0.5), draw(0.3, 0.5))
}

/// Endpoints for one class. Paired classes push their endpoint diagonals
/// apart with opposite signs, so one class's covariance trace rises along
/// the path while the other's falls.
fn class_endpoints(cfg: &SynthConfig, class: usize) -> (CholeskyPoint<f64>, CholeskyPoint<f64>) {
    let (a, b) = base_endpoints(cfg);
    if cfg.shared_endpoints {
        return (a, b);
    }
    let sign = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
    let magnitude = cfg.class_log_offset * (1.0 + (class / 2) as f64);
    (scale_log_diag(&a, -sign * magnitude), scale_log_diag(&b, sign * magnitude))
}

/// The latent factor of `class` at progress `s` in [0, 1].
pub fn synth_latent_factor(cfg: &SynthConfig, class: usize, s: f64) -> CholeskyPoint<f64> {
    let (a, b) = class_endpoints(cfg, class);
    let gamma = cfg.speed_exponents[class % cfg.speed_exponents.len()];
    let v = geometry::log_map(&a, &b).unwrap();
    let scaled = v.map_scalar(|x| x * s.powf(gamma));
    geometry::exp_map(&a, &scaled).unwrap()
}

/// One observation under factor `l`: `l * xi + sigma * eta` with standard
/// normal `xi`, `eta`.
fn observe(l: &CholeskyPoint<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = l.dim();
    let xi: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut x = vec![0.0; d];
    for (i, out) in x.iter_mut().enumerate() {
        let mut s = 0.0;
        for (j, &xij) in xi.iter().enumerate().take(i + 1) {
            s += l.entry(i, j) * xij;
        }
        if sigma > 0.0 {
            let eta: f64 = rng.sample(StandardNormal);
            s += sigma * eta;
        }
        *out = s;
    }
    x
}

/// Generates the synthetic dataset: `n_per_class` sequences per class,
/// regular unit-interval timestamps, stratified train/test split.
pub fn synth_manifold_sequences(cfg: &SynthConfig) -> Result<Dataset> {
    validate_synth(cfg)?;
    let t_len = cfg.seq_len;
    let n_train = (cfg.train_fraction * cfg.n_per_class as f64).floor() as usize;

    let mut ids = Vec::new();
    let mut sequences = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();

    for class in 0..cfg.n_classes {
        // The path is class-level work; sampling is per-sequence.
        let (a, b) = class_endpoints(cfg, class);
        let gamma = cfg.speed_exponents[class % cfg.speed_exponents.len()];
        let v = geometry::log_map(&a, &b).map_err(|e| DataError::BadSequence {
            seq_id: format!("c{class}"),
            source: EncoderError::Geometry(e),
        })?;
        let path: Vec<CholeskyPoint<f64>> = (0..t_len)
            .map(|i| {
                let s = i as f64 / (t_len - 1) as f64;
                let scaled = v.map_scalar(|x| x * s.powf(gamma));
                geometry::exp_map(&a, &scaled).unwrap()
            })
            .collect();

        for j in 0..cfg.n_per_class {
            let global = class * cfg.n_per_class + j;
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, global as u64));
            let samples: Vec<Sample> = (0..t_len)
                .map(|i| Sample {
                    t: i as f64 / (t_len - 1) as f64,
                    values: observe(&path[i], cfg.sigma_obs, &mut rng),
                    mask: vec![true; cfg.channels],
                })
                .collect();
            ids.push(format!("c{class}_i{j:03}"));
            sequences.push(TimedSequence::new(cfg.channels, samples).map_err(|source| {
                DataError::BadSequence { seq_id: format!("c{class}_i{j:03}"), source }
            })?);
            labels.push(class);
            split.push(if j < n_train { Split::Train } else { Split::Test });
        }
    }

    let ds = Dataset {
        ids,
        sequences,
        labels,
        split,
        meta: DatasetMeta {
            name: "synth-manifold".into(),
            channels: cfg.channels,
            n_classes: cfg.n_classes,
        },
    };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
}

/// Row-major `n_classes x n_classes` counts; row is the true class,
/// column the prediction.
pub fn confusion_matrix(preds: &[usize], targets: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    if preds.len() != targets.len() {
        return Err(DataError::BadMetricInput(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(DataError::BadMetricInput("no samples".into()));
    }
    let mut m = vec![0usize; n_classes * n_classes];
    for (&p, &t) in preds.iter().zip(targets) {
        if p >= n_classes || t >= n_classes {
            return Err(DataError::BadMetricInput(format!(
                "class index out of range: pred {p}, target {t}, {n_classes} classes"
            )));
        }
        m[t * n_classes + p] += 1;
    }
    Ok(m)
}

/// Accuracy, Cohen's kappa, and macro-averaged F1. Kappa is 0 when chance
/// agreement is total (both sides constant); a class absent from both
/// predictions and targets contributes an F1 of 0.
pub fn classification_metrics(
    preds: &[usize],
    targets: &[usize],
    n_classes: usize,
) -> Result<ClassificationMetrics> {
    let m = confusion_matrix(preds, targets, n_classes)?;
    let n = preds.len() as f64;
    let mut diag = 0usize;
    for c in 0..n_classes {
        diag += m[c * n_classes + c];
    }
    let accuracy = diag as f64 / n;

    let mut chance = 0.0;
    for c in 0..n_classes {
        let row: usize = (0..n_classes).map(|j| m[c * n_classes + j]).sum();
        let col: usize = (0..n_classes).map(|i| m[i * n_classes + c]).sum();
        chance += (row as f64 / n) * (col as f64 / n);
    }
    let kappa = if (1.0 - chance).abs() < 1e-15 {
        0.0
    } else {
        (accuracy - chance) / (1.0 - chance)
    };

    let mut f1_sum = 0.0;
    for c in 0..n_classes {
        let tp = m[c * n_classes + c];
        let row: usize = (0..n_classes).map(|j| m[c * n_classes + j]).sum();
        let col: usize = (0..n_classes).map(|i| m[i * n_classes + c]).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1_sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    let macro_f1 = f1_sum / n_classes as f64;

    Ok(ClassificationMetrics { accuracy, kappa, macro_f1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    /// Mean absolute percentage error as a fraction, over entries whose
    /// target magnitude exceeds 1e-8.
    pub mape: f64,
    pub r2: f64,
}

/// Masked regression metrics over parallel flat slices. R-squared of a
/// constant-mean predictor is exactly 0; with zero target variance it is
/// 1 for an exact fit and 0 otherwise.
pub fn regression_metrics(preds: &[f64], targets: &[f64], mask: &[bool]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() || preds.len() != mask.len() {
        return Err(DataError::BadMetricInput(format!(
            "length mismatch: {} preds, {} targets, {} mask",
            preds.len(),
            targets.len(),
            mask.len()
        )));
    }
    let observed: Vec<(f64, f64)> = preds
        .iter()
        .zip(targets)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &t), _)| (p, t))
        .collect();
    if observed.is_empty() {
        return Err(DataError::BadMetricInput("no observed entries".into()));
    }
    let n = observed.len() as f64;

    let mse = observed.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;

    let mut mape_sum = 0.0;
    let mut mape_n = 0usize;
    for (p, t) in &observed {
        if t.abs() > 1e-8 {
            mape_sum += ((p - t) / t).abs();
            mape_n += 1;
        }
    }
    let mape = if mape_n == 0 { 0.0 } else { mape_sum / mape_n as f64 };

    let mean = observed.iter().map(|(_, t)| t).sum::<f64>() / n;
    let ss_tot = observed.iter().map(|(_, t)| (t - mean) * (t - mean)).sum::<f64>();
    let ss_res = observed.iter().map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };

    Ok(RegressionMetrics { mse, mape, r2 })
}
