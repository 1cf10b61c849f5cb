//! The assembled sequence model: encoder, continuous-time hidden
//! evolution, gated recurrence on the factor manifold, and a task head,
//! with training, evaluation, and checkpointing.
//!
//! All parameters live in one flat `f64` vector carved into named
//! segments. Gradients come from the reverse-mode tape: a forward pass is
//! run on tracked scalars and swept once. The continuous evolution can
//! instead be detached and differentiated by the adjoint method, which
//! keeps tape size independent of step count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{self, DetachedOp, Var};
use crate::data::{
    classification_metrics, regression_metrics, ClassificationMetrics, DataError, Dataset,
    RegressionMetrics, Split,
};
use crate::encoder::{self, EncoderConfig, EncoderError, EncoderMode, TimedSequence};
use crate::geometry::{self, tri_len, CholeskyPoint, GeometryError, Lower, EPS_POS};
use crate::ode::{self, FieldKind, OdeConfig, OdeError};
use crate::rgru::{self, RgruConfig, RgruError};
use crate::scalar::Scalar;
use crate::spd::SpdError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Rgru(#[from] RgruError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("loss diverged to a non-finite value at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One label per sequence, read off the final hidden state.
    Classification,
    /// Reconstruct each observed sample from the hidden state at its step.
    Imputation,
    /// Predict each sample from the hidden state one step earlier.
    Forecasting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Channels of the raw input sequences.
    pub in_channels: usize,
    /// Matrix dimension of the hidden state; must equal the encoder's
    /// output channel count.
    pub hidden_dim: usize,
    /// Classification only.
    #[serde(default)]
    pub n_classes: usize,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub rgru: RgruConfig,
    pub field: FieldKind,
    #[serde(default)]
    pub ode: OdeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(ModelError::Config("hidden_dim must be positive".into()));
        }
        let n_out = encoder::output_channels(&self.encoder, self.in_channels);
        if n_out != self.hidden_dim {
            return Err(ModelError::Config(format!(
                "encoder emits {n_out} channels but hidden_dim is {}",
                self.hidden_dim
            )));
        }
        match self.task {
            Task::Classification => {
                if self.n_classes < 2 {
                    return Err(ModelError::Config(
                        "classification needs at least 2 classes".into(),
                    ));
                }
            }
            Task::Imputation | Task::Forecasting => {
                if !matches!(self.encoder.mode, EncoderMode::PerTimepoint) {
                    return Err(ModelError::Config(
                        "per-step tasks need the per-timepoint encoder so predictions align with samples"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn head_shape(&self) -> (usize, usize) {
        let in_dim = tri_len(self.hidden_dim);
        let out = match self.task {
            Task::Classification => self.n_classes,
            Task::Imputation | Task::Forecasting => self.in_channels,
        };
        (out, in_dim)
    }
}

pub const SEG_ENCODER: &str = "encoder";
pub const SEG_RGRU: &str = "rgru";
pub const SEG_FIELD: &str = "field";
pub const SEG_HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

/// All model parameters as one flat vector plus named extents.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.start..s.start + s.len)
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        self.range(name).map(|r| &self.values[r]).unwrap_or(&[])
    }
}

/// Segment extents implied by a configuration, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<Segment> {
    let enc = encoder::encoder_param_count(&cfg.encoder, cfg.in_channels);
    let rg = rgru::param_count(cfg.hidden_dim);
    let field = ode::field_param_count(&cfg.field, cfg.hidden_dim);
    let (out, in_dim) = cfg.head_shape();
    let head = out * in_dim + out;
    let mut segments = Vec::with_capacity(4);
    let mut start = 0;
    for (name, len) in [
        (SEG_ENCODER, enc),
        (SEG_RGRU, rg),
        (SEG_FIELD, field),
        (SEG_HEAD, head),
    ] {
        segments.push(Segment { name: name.into(), start, len });
        start += len;
    }
    segments
}

pub fn model_param_count(cfg: &ModelConfig) -> usize {
    param_layout(cfg).iter().map(|s| s.len).sum()
}

/// Seeded initialization of every segment; the head starts at zero so
/// initial class scores are uniform.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let segments = param_layout(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(segments.iter().map(|s| s.len).sum());
    values.extend(encoder::init_encoder_params(&cfg.encoder, cfg.in_channels, &mut rng));
    values.extend(rgru::init_params(cfg.hidden_dim, &mut rng).to_flat());
    values.extend(ode::init_field_params(&cfg.field, cfg.hidden_dim, &mut rng));
    let (out, in_dim) = cfg.head_shape();
    values.extend(std::iter::repeat_n(0.0, out * in_dim + out));
    debug_assert_eq!(values.len(), segments.iter().map(|s| s.len).sum::<usize>());
    Ok(ParamStore { values, segments })
}

/// Borrowed per-segment views of one flat parameter slice.
struct ParamView<'a, T> {
    encoder: &'a [T],
    rgru: &'a [T],
    field: &'a [T],
    head: &'a [T],
}

fn split_params<'a, T>(cfg: &ModelConfig, flat: &'a [T]) -> Result<ParamView<'a, T>> {
    let segments = param_layout(cfg);
    let total: usize = segments.iter().map(|s| s.len).sum();
    if flat.len() != total {
        return Err(ModelError::Config(format!(
            "parameter vector has {} entries, layout needs {total}",
            flat.len()
        )));
    }
    let take = |name: &str| {
        let s = segments.iter().find(|s| s.name == name).unwrap();
        &flat[s.start..s.start + s.len]
    };
    Ok(ParamView {
        encoder: take(SEG_ENCODER),
        rgru: take(SEG_RGRU),
        field: take(SEG_FIELD),
        head: take(SEG_HEAD),
    })
}

#[derive(Debug, Clone)]
pub enum Output<T: Scalar> {
    /// Classification scores, one per class.
    Logits(Vec<T>),
    /// One prediction vector per step.
    PerStep(Vec<Vec<T>>),
}

#[derive(Debug, Clone)]
pub struct Forward<T: Scalar> {
    /// Encoded input points with their normalized timestamps.
    pub inputs: Vec<(CholeskyPoint<T>, f64)>,
    /// Hidden state after each recurrence step.
    pub trajectory: Vec<CholeskyPoint<T>>,
    pub output: Output<T>,
}

/// Maps encoded timestamps affinely onto [0, 1]; a degenerate span (one
/// point, or identical stamps) collapses to all zeros, which makes every
/// evolution interval empty.
fn normalize_times(raw: &[f64]) -> Vec<f64> {
    let t0 = raw[0];
    let t1 = raw[raw.len() - 1];
    let span = t1 - t0;
    if span > 0.0 {
        raw.iter().map(|&t| (t - t0) / span).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T], out: usize) -> Vec<T> {
    let in_dim = x.len();
    debug_assert_eq!(w.len(), out * in_dim);
    let mut y = Vec::with_capacity(out);
    for o in 0..out {
        let mut s = b[o];
        for i in 0..in_dim {
            s = s + w[o * in_dim + i] * x[i];
        }
        y.push(s);
    }
    y
}

#[allow(clippy::type_complexity)]
fn forward_with<T: Scalar>(
    cfg: &ModelConfig,
    flat: &[T],
    seq: &TimedSequence,
    evolve: &mut dyn FnMut(&CholeskyPoint<T>, f64, f64) -> Result<CholeskyPoint<T>>,
) -> Result<Forward<T>> {
    cfg.validate()?;
    if seq.channels() != cfg.in_channels {
        return Err(ModelError::Config(format!(
            "sequence has {} channels, model expects {}",
            seq.channels(),
            cfg.in_channels
        )));
    }
    let view = split_params(cfg, flat)?;
    let d = cfg.hidden_dim;

    let encoded = encoder::encode(seq, view.encoder, &cfg.encoder)?;
    let times = normalize_times(&encoded.iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let inputs: Vec<(CholeskyPoint<T>, f64)> = encoded
        .into_iter()
        .zip(&times)
        .map(|((p, _), &t)| (p, t))
        .collect();

    let raw = rgru::RgruParams::from_flat(d, view.rgru);
    let eff = rgru::reparameterize(&raw, &cfg.rgru);

    let mut state = rgru::init_state::<T>(d);
    let mut trajectory = Vec::with_capacity(inputs.len());
    let mut prev_t = inputs[0].1;
    for (x, t) in &inputs {
        let evolved = evolve(&state.h, prev_t, *t)?;
        state.h = evolved;
        state = rgru::step(&state, x, &eff, &cfg.rgru)?;
        trajectory.push(state.h.clone());
        prev_t = *t;
    }

    let identity = CholeskyPoint::<T>::identity(d);
    let (out_dim, _) = cfg.head_shape();
    let (w, b) = {
        let (out, in_dim) = cfg.head_shape();
        (&view.head[..out * in_dim], &view.head[out * in_dim..])
    };

    let output = match cfg.task {
        Task::Classification => {
            let u = geometry::log_map(&identity, trajectory.last().unwrap())?;
            Output::Logits(affine(w, b, u.packed(), out_dim))
        }
        Task::Imputation | Task::Forecasting => {
            let mut preds = Vec::with_capacity(trajectory.len());
            for h in &trajectory {
                let u = geometry::log_map(&identity, h)?;
                preds.push(affine(w, b, u.packed(), out_dim));
            }
            Output::PerStep(preds)
        }
    };

    Ok(Forward { inputs, trajectory, output })
}

/// Forward pass with the hidden evolution on the same scalar type as
/// everything else (taped when `T` tracks gradients).
pub fn forward<T: Scalar>(cfg: &ModelConfig, flat: &[T], seq: &TimedSequence) -> Result<Forward<T>> {
    let view = split_params(cfg, flat)?;
    let field: Vec<T> = view.field.to_vec();
    let kind = cfg.field.clone();
    let ode_cfg = cfg.ode;
    forward_with(cfg, flat, seq, &mut |h, t0, t1| {
        ode::evolve_hidden(&kind, &field, h, t0, t1, &ode_cfg).map_err(ModelError::from)
    })
}

/// Forward pass on tracked scalars with each evolution interval detached:
/// the solve runs on plain values, its outputs re-enter the tape as fresh
/// variables, and the returned hooks inject adjoint-computed gradients
/// during the sweep.
pub fn forward_adjoint(
    cfg: &ModelConfig,
    flat: &[Var],
    seq: &TimedSequence,
) -> Result<(Forward<Var>, Vec<DetachedOp>)> {
    let view = split_params(cfg, flat)?;
    let field_vars: Vec<Var> = view.field.to_vec();
    let field_vals: Vec<f64> = field_vars.iter().map(|v| v.value()).collect();
    let kind = cfg.field.clone();
    let ode_cfg = cfg.ode;
    let d = cfg.hidden_dim;

    let mut ops: Vec<DetachedOp> = Vec::new();
    let fwd = forward_with(cfg, flat, seq, &mut |h, t0, t1| {
        let identity = CholeskyPoint::<Var>::identity(d);
        let u0 = geometry::log_map(&identity, h)?;
        let u0_vars: Vec<Var> = u0.packed().to_vec();
        let u0_vals: Vec<f64> = u0_vars.iter().map(|v| v.value()).collect();
        let u_end =
            ode::ode_solve_packed(&kind, d, &field_vals, &u0_vals, t0, t1, &ode_cfg)?;
        let out_vars: Vec<Var> = u_end.iter().map(|&v| ad::var(v)).collect();

        let vjp_kind = kind.clone();
        let vjp_field_vals = field_vals.clone();
        let vjp_field_vars = field_vars.clone();
        let vjp_u0_vars = u0_vars;
        let vjp_u_end = u_end;
        ops.push(DetachedOp {
            outputs: out_vars.clone(),
            vjp: Box::new(move |upstream: &[f64]| {
                let g = ode::backward_adjoint(
                    &vjp_kind,
                    d,
                    &vjp_field_vals,
                    &vjp_u_end,
                    t0,
                    t1,
                    &ode_cfg,
                    upstream,
                )
                .expect("adjoint backward failed on a state the forward pass produced");
                let mut contributions =
                    Vec::with_capacity(vjp_u0_vars.len() + vjp_field_vars.len());
                contributions.extend(vjp_u0_vars.iter().copied().zip(g.u0));
                contributions.extend(vjp_field_vars.iter().copied().zip(g.params));
                contributions
            }),
        });

        let u1 = crate::geometry::TangentLower::from_packed(d, out_vars)?;
        geometry::exp_map(&identity, &u1).map_err(ModelError::from)
    })?;
    Ok((fwd, ops))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

/// Per-sequence data loss: cross-entropy from the class scores, or the
/// mean squared error over observed target entries.
pub fn sequence_loss<T: Scalar>(
    cfg: &ModelConfig,
    fwd: &Forward<T>,
    seq: &TimedSequence,
    label: usize,
    loss: LossKind,
) -> Result<T> {
    match (loss, &fwd.output) {
        (LossKind::CrossEntropy, Output::Logits(logits)) => {
            if label >= logits.len() {
                return Err(ModelError::Config(format!(
                    "label {label} out of range for {} classes",
                    logits.len()
                )));
            }
            let mut m = logits[0];
            for l in &logits[1..] {
                m = m.max(*l);
            }
            let mut s = T::zero();
            for l in logits {
                s = s + (*l - m).exp();
            }
            Ok(m + s.ln() - logits[label])
        }
        (LossKind::SquaredError, Output::PerStep(preds)) => {
            let samples = seq.samples();
            if preds.len() != samples.len() {
                return Err(ModelError::Config(format!(
                    "{} predictions for {} samples; per-step losses need the per-timepoint encoder",
                    preds.len(),
                    samples.len()
                )));
            }
            // Imputation scores step i against sample i; forecasting
            // scores step i against sample i + 1.
            let offset = match cfg.task {
                Task::Imputation => 0,
                Task::Forecasting => 1,
                Task::Classification => {
                    return Err(ModelError::Config(
                        "squared-error loss needs a per-step task".into(),
                    ))
                }
            };
            let mut acc = T::zero();
            let mut count = 0usize;
            for (i, pred) in preds.iter().enumerate() {
                let Some(target) = samples.get(i + offset) else { break };
                for (c, p) in pred.iter().enumerate() {
                    if target.mask[c] {
                        let diff = *p - T::of(target.values[c]);
                        acc = acc + diff * diff;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(ModelError::Config("no observed target entries".into()));
            }
            Ok(acc / T::of(count as f64))
        }
        _ => Err(ModelError::Config(
            "loss kind does not match the model output".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Quadratic penalty weight on raw parameters.
    pub l2: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub loss: LossKind,
    pub optimizer: Optimizer,
    /// Evaluate both splits every this many iterations; 0 disables.
    pub eval_every: usize,
    /// Lift encoder parameters as untracked constants: they receive a
    /// zero gradient and never move.
    pub freeze_encoder: bool,
    /// Worker threads for batch gradients; set by the caller, not by
    /// config files, so files stay portable across machines.
    #[serde(skip)]
    pub threads: usize,
    /// Seed of the batch-order stream; also caller-provided.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            l2: 1e-3,
            batch_size: 32,
            max_iters: 200,
            loss: LossKind::CrossEntropy,
            optimizer: Optimizer::Adam,
            eval_every: 0,
            freeze_encoder: false,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Batch objective: data loss plus the quadratic penalty.
    pub loss: f64,
    /// Primary metric on the training split (accuracy, or mean squared
    /// error for per-step tasks), when evaluated this iteration.
    pub train_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub rows: Vec<MetricsRow>,
}

/// Renders metric rows as CSV. Floats print in shortest round-trip form,
/// so identical runs produce byte-identical files; skipped evaluations
/// leave their fields empty.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iteration,loss,train_metric,test_metric\n");
    for r in rows {
        out.push_str(&r.iteration.to_string());
        out.push(',');
        out.push_str(&format!("{}", r.loss));
        out.push(',');
        if let Some(m) = r.train_metric {
            out.push_str(&format!("{m}"));
        }
        out.push(',');
        if let Some(m) = r.test_metric {
            out.push_str(&format!("{m}"));
        }
        out.push('\n');
    }
    out
}

/// Loss and gradient of one sequence at the given parameters. Runs on
/// this thread's tape; safe to call from several threads at once.
pub fn loss_and_gradient(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    params: &[f64],
    seq: &TimedSequence,
    label: usize,
) -> Result<(f64, Vec<f64>)> {
    ad::reset();
    let frozen = if tc.freeze_encoder {
        param_layout(cfg)
            .iter()
            .find(|s| s.name == SEG_ENCODER)
            .map(|s| s.start..s.start + s.len)
            .unwrap_or(0..0)
    } else {
        0..0
    };
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, &p)| if frozen.contains(&i) { ad::constant(p) } else { ad::var(p) })
        .collect();

    let (fwd, ops) = match cfg.ode.backward {
        ode::BackwardMode::Unrolled => (forward(cfg, &vars, seq)?, Vec::new()),
        ode::BackwardMode::Adjoint => forward_adjoint(cfg, &vars, seq)?,
    };
    let loss = sequence_loss(cfg, &fwd, seq, label, tc.loss)?;
    let loss_val = loss.value();
    if !loss_val.is_finite() {
        // Caller turns this into a divergence report with the iteration.
        return Ok((loss_val, vec![0.0; params.len()]));
    }
    let grads = ad::backward_with_detached(&[(loss, 1.0)], ops);
    Ok((loss_val, vars.iter().map(|v| grads.wrt(*v)).collect()))
}

/// Gradients for a whole batch, in batch order. With `threads > 1` the
/// batch is cut into contiguous chunks, one thread each; results are
/// reduced in batch order afterwards, so the outcome is identical to the
/// single-threaded one.
fn batch_grads(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    params: &[f64],
    ds: &Dataset,
    batch: &[usize],
) -> Result<Vec<(f64, Vec<f64>)>> {
    let run = |indices: &[usize]| -> Result<Vec<(f64, Vec<f64>)>> {
        indices
            .iter()
            .map(|&i| loss_and_gradient(cfg, tc, params, &ds.sequences[i], ds.labels[i]))
            .collect()
    };
    if tc.threads <= 1 || batch.len() <= 1 {
        return run(batch);
    }
    let n_chunks = tc.threads.min(batch.len());
    let chunk_size = batch.len().div_ceil(n_chunks);
    let chunks: Vec<&[usize]> = batch.chunks(chunk_size).collect();
    #[allow(clippy::type_complexity)]
    let mut results: Vec<Result<Vec<(f64, Vec<f64>)>>> = Vec::with_capacity(chunks.len());
    let run = &run;
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks.iter().map(|&c| scope.spawn(move || run(c))).collect();
        for h in handles {
            results.push(h.join().expect("gradient worker panicked"));
        }
    });
    let mut out = Vec::with_capacity(batch.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// True for errors that signal a numerically exploded state rather than a
/// misconfiguration; training reports them as divergence with the
/// iteration instead of surfacing the internal error, and callers can use
/// the same split to pick an exit status.
pub fn numerical_failure(e: &ModelError) -> bool {
    fn bad_geometry(g: &GeometryError) -> bool {
        matches!(
            g,
            GeometryError::NonFinite { .. } | GeometryError::NonPositiveDiagonal { .. }
        )
    }
    match e {
        ModelError::Geometry(g) => bad_geometry(g),
        ModelError::Rgru(RgruError::NonFinite { .. }) => true,
        ModelError::Rgru(RgruError::Geometry(g)) => bad_geometry(g),
        ModelError::Ode(OdeError::NonFiniteState { .. }) => true,
        ModelError::Ode(OdeError::Geometry(g)) => bad_geometry(g),
        ModelError::Encoder(EncoderError::Geometry(g)) => bad_geometry(g),
        ModelError::Encoder(EncoderError::Spd(s)) => matches!(
            s,
            SpdError::NonFinite { .. } | SpdError::NotPositiveDefinite { .. }
        ),
        _ => false,
    }
}

/// Checks the recurrence reparameterization invariant on raw parameters.
fn assert_effective_bias_valid(cfg: &ModelConfig, params: &[f64]) -> Result<()> {
    let view = split_params(cfg, params)?;
    let raw = rgru::RgruParams::from_flat(cfg.hidden_dim, view.rgru);
    let eff = rgru::reparameterize(&raw, &cfg.rgru);
    for bias in [&eff.b_z, &eff.b_r, &eff.b_l] {
        for i in 0..cfg.hidden_dim {
            let v = bias.diag(i);
            assert!(
                v >= EPS_POS,
                "effective bias diagonal {i} fell to {v}, below the positive floor"
            );
        }
    }
    Ok(())
}

/// Mini-batch training. Batch order is a seeded shuffle, restarted each
/// epoch; gradients within a batch are averaged in batch order. Returns
/// the final parameters and the per-iteration metric rows.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    ds: &Dataset,
    init: ParamStore,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    match (cfg.task, tc.loss) {
        (Task::Classification, LossKind::CrossEntropy) => {}
        (Task::Imputation | Task::Forecasting, LossKind::SquaredError) => {}
        (task, loss) => {
            return Err(ModelError::Config(format!(
                "loss {loss:?} does not fit task {task:?}"
            )))
        }
    }
    if ds.meta.channels != cfg.in_channels {
        return Err(ModelError::Config(format!(
            "dataset has {} channels, model expects {}",
            ds.meta.channels, cfg.in_channels
        )));
    }
    if cfg.task == Task::Classification && ds.meta.n_classes > cfg.n_classes {
        return Err(ModelError::Config(format!(
            "dataset has {} classes, model only scores {}",
            ds.meta.n_classes, cfg.n_classes
        )));
    }
    if tc.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let train_idx = ds.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(ModelError::Config("no training sequences".into()));
    }

    let mut params = init;
    if params.len() != model_param_count(cfg) {
        return Err(ModelError::Config(format!(
            "initial parameters have {} entries, model needs {}",
            params.len(),
            model_param_count(cfg)
        )));
    }

    let frozen = if tc.freeze_encoder {
        params.range(SEG_ENCODER).unwrap_or(0..0)
    } else {
        0..0
    };

    let p = params.len();
    let mut adam_m = vec![0.0; p];
    let mut adam_v = vec![0.0; p];
    let (beta1, beta2, adam_eps) = (0.9f64, 0.999f64, 1e-8f64);

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut rows = Vec::with_capacity(tc.max_iters);

    for iter in 0..tc.max_iters {
        let mut batch = Vec::with_capacity(tc.batch_size.min(train_idx.len()));
        while batch.len() < tc.batch_size.min(train_idx.len()) {
            if cursor >= order.len() {
                order = train_idx.clone();
                // Fisher-Yates from the batch stream.
                for i in (1..order.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let per_seq = batch_grads(cfg, tc, &params.values, ds, &batch).map_err(|e| {
            if numerical_failure(&e) {
                ModelError::Diverged { iteration: iter }
            } else {
                e
            }
        })?;
        let b = per_seq.len() as f64;
        let mut data_loss = 0.0;
        let mut grad = vec![0.0; p];
        for (l, g) in &per_seq {
            data_loss += l / b;
            for (k, gk) in g.iter().enumerate() {
                grad[k] += gk / b;
            }
        }

        let mut l2_val = 0.0;
        if tc.l2 > 0.0 {
            for (k, &v) in params.values.iter().enumerate() {
                if frozen.contains(&k) {
                    continue;
                }
                l2_val += tc.l2 * v * v;
                grad[k] += 2.0 * tc.l2 * v;
            }
        }
        let objective = data_loss + l2_val;
        if !objective.is_finite() {
            return Err(ModelError::Diverged { iteration: iter });
        }

        for k in frozen.clone() {
            grad[k] = 0.0;
        }

        match tc.optimizer {
            Optimizer::Sgd => {
                for (v, g) in params.values.iter_mut().zip(&grad) {
                    *v -= tc.learning_rate * g;
                }
            }
            Optimizer::Adam => {
                let t = (iter + 1) as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for k in 0..p {
                    adam_m[k] = beta1 * adam_m[k] + (1.0 - beta1) * grad[k];
                    adam_v[k] = beta2 * adam_v[k] + (1.0 - beta2) * grad[k] * grad[k];
                    let m_hat = adam_m[k] / bc1;
                    let v_hat = adam_v[k] / bc2;
                    params.values[k] -= tc.learning_rate * m_hat / (v_hat.sqrt() + adam_eps);
                }
            }
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Diverged { iteration: iter });
        }
        assert_effective_bias_valid(cfg, &params.values)?;

        let mut row = MetricsRow {
            iteration: iter,
            loss: objective,
            train_metric: None,
            test_metric: None,
        };
        if tc.eval_every > 0 && (iter + 1) % tc.eval_every == 0 {
            row.train_metric = Some(primary_metric(&evaluate(
                cfg,
                &params.values,
                ds,
                &ds.indices_of(Split::Train),
            )?));
            let test_idx = ds.indices_of(Split::Test);
            if !test_idx.is_empty() {
                row.test_metric =
                    Some(primary_metric(&evaluate(cfg, &params.values, ds, &test_idx)?));
            }
        }
        rows.push(row);
    }

    Ok(TrainOutcome { params, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EvalSummary {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

/// Accuracy for classification, mean squared error for per-step tasks.
pub fn primary_metric(summary: &EvalSummary) -> f64 {
    match summary {
        EvalSummary::Classification(m) => m.accuracy,
        EvalSummary::Regression(m) => m.mse,
    }
}

pub fn predict_class(cfg: &ModelConfig, params: &[f64], seq: &TimedSequence) -> Result<usize> {
    let fwd = forward::<f64>(cfg, params, seq)?;
    match fwd.output {
        Output::Logits(logits) => {
            let mut best = 0;
            for (i, l) in logits.iter().enumerate() {
                if *l > logits[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        Output::PerStep(_) => Err(ModelError::Config(
            "class prediction needs a classification head".into(),
        )),
    }
}

/// Evaluates the listed sequences: a confusion summary for
/// classification, pooled masked regression metrics otherwise.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &[f64],
    ds: &Dataset,
    indices: &[usize],
) -> Result<EvalSummary> {
    if indices.is_empty() {
        return Err(ModelError::Config("no sequences to evaluate".into()));
    }
    match cfg.task {
        Task::Classification => {
            let mut preds = Vec::with_capacity(indices.len());
            let mut targets = Vec::with_capacity(indices.len());
            for &i in indices {
                preds.push(predict_class(cfg, params, &ds.sequences[i])?);
                targets.push(ds.labels[i]);
            }
            Ok(EvalSummary::Classification(classification_metrics(
                &preds,
                &targets,
                cfg.n_classes,
            )?))
        }
        Task::Imputation | Task::Forecasting => {
            let offset = if cfg.task == Task::Forecasting { 1 } else { 0 };
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut mask = Vec::new();
            for &i in indices {
                let seq = &ds.sequences[i];
                let fwd = forward::<f64>(cfg, params, seq)?;
                let Output::PerStep(step_preds) = fwd.output else {
                    return Err(ModelError::Config("expected per-step output".into()));
                };
                for (s, pred) in step_preds.iter().enumerate() {
                    let Some(target) = seq.samples().get(s + offset) else { break };
                    for (c, &p) in pred.iter().enumerate() {
                        preds.push(p);
                        targets.push(target.values[c]);
                        mask.push(target.mask[c]);
                    }
                }
            }
            Ok(EvalSummary::Regression(regression_metrics(&preds, &targets, &mask)?))
        }
    }
}

// ---------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------

const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    seed: u64,
    model: ModelConfig,
    segments: Vec<Segment>,
    param_count: usize,
    blob: String,
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub seed: u64,
}

/// Writes `manifest.json` plus a little-endian `f64` blob into `dir`.
/// Reloading reproduces every parameter bit.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &ModelConfig,
    params: &ParamStore,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        seed,
        model: cfg.clone(),
        segments: params.segments.clone(),
        param_count: params.values.len(),
        blob: BLOB_FILE.to_string(),
    };
    let mut blob = Vec::with_capacity(params.values.len() * 8);
    for v in &params.values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join(BLOB_FILE), blob)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format_version {} unsupported (this build reads {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(dir.join(&manifest.blob))?;
    if blob.len() != manifest.param_count * 8 {
        return Err(ModelError::Checkpoint(format!(
            "manifest promises {} parameters but the blob holds {} bytes",
            manifest.param_count,
            blob.len()
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected = param_layout(&manifest.model);
    if manifest.segments != expected {
        return Err(ModelError::Checkpoint(
            "segment table does not match the stored configuration".into(),
        ));
    }
    if manifest.param_count != expected.iter().map(|s| s.len).sum::<usize>() {
        return Err(ModelError::Checkpoint(
            "parameter count does not match the stored configuration".into(),
        ));
    }
    Ok(Checkpoint {
        config: manifest.model,
        params: ParamStore { values, segments: manifest.segments },
        seed: manifest.seed,
    })
}
