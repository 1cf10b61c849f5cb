//! Run configuration: one TOML file describing the dataset, the model,
//! and the training loop. Unknown keys are rejected wherever serde allows
//! it, so typos fail loudly instead of silently using defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Dataset, DropReport, SynthConfig};
use crate::model::{LossKind, ModelConfig, Task, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

/// CSV-backed dataset with a seeded stratified split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_train_fraction() -> f64 {
    0.7
}

/// Deterministic observation removal applied after loading or generating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropConfig {
    pub fraction: f64,
    /// Defaults to the run seed when omitted.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub csv: Option<CsvConfig>,
    #[serde(default)]
    pub drop: Option<DropConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_threads")]
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_threads() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.synth, &self.dataset.csv) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "dataset.synth and dataset.csv are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "dataset needs either a synth or a csv section".into(),
                ))
            }
            _ => {}
        }
        if let Some(drop) = &self.dataset.drop {
            if !(0.0..1.0).contains(&drop.fraction) {
                return Err(ConfigError::Invalid(format!(
                    "dataset.drop.fraction {} must lie in [0, 1)",
                    drop.fraction
                )));
            }
        }
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be at least 1".into()));
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let fits = matches!(
            (self.model.task, self.train.loss),
            (Task::Classification, LossKind::CrossEntropy)
                | (Task::Imputation | Task::Forecasting, LossKind::SquaredError)
        );
        if !fits {
            return Err(ConfigError::Invalid(format!(
                "train.loss {:?} does not fit model.task {:?}",
                self.train.loss, self.model.task
            )));
        }
        Ok(())
    }

    /// The training configuration with the run-level seed and thread
    /// count filled in (they are not file keys).
    pub fn resolved_train(&self) -> TrainConfig {
        let mut tc = self.train.clone();
        tc.seed = self.seed;
        tc.threads = self.threads;
        tc
    }
}

/// Applies override strings (usually from `LOGCHOL_SEED` and
/// `LOGCHOL_THREADS`) on top of a parsed config.
pub fn apply_overrides(
    cfg: &mut RunConfig,
    seed: Option<&str>,
    threads: Option<&str>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("LOGCHOL_SEED {s:?} is not a u64")))?;
    }
    if let Some(s) = threads {
        cfg.threads = s
            .trim()
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("LOGCHOL_THREADS {s:?} is not a usize")))?;
    }
    Ok(())
}

/// Loads, applies environment overrides, and validates.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg: RunConfig = toml::from_str(&text)?;
    let seed = std::env::var("LOGCHOL_SEED").ok();
    let threads = std::env::var("LOGCHOL_THREADS").ok();
    apply_overrides(&mut cfg, seed.as_deref(), threads.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

/// Materializes the configured dataset, including the optional
/// observation drop. Returns the drop report when a drop ran.
pub fn build_dataset(cfg: &RunConfig) -> std::result::Result<(Dataset, Option<DropReport>), DataError> {
    let mut ds = match (&cfg.dataset.synth, &cfg.dataset.csv) {
        (Some(synth), None) => data::synth_manifold_sequences(synth)?,
        (None, Some(csv)) => {
            let mut ds = data::load_csv(&csv.path)?;
            ds.assign_split_by_fraction(csv.train_fraction, csv.split_seed);
            ds
        }
        _ => {
            return Err(DataError::BadConfig(
                "dataset needs exactly one of synth or csv".into(),
            ))
        }
    };
    let mut report = None;
    if let Some(drop) = &cfg.dataset.drop {
        let seed = drop.seed.unwrap_or(cfg.seed);
        let (dropped, r) = data::drop_observations(&ds, drop.fraction, seed)?;
        ds = dropped;
        report = Some(r);
    }
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderMode;
    use crate::model::Optimizer;
    use crate::ode::{BackwardMode, FieldKind};

    const FULL: &str = r#"
seed = 11
out_dir = "artifacts"
threads = 2

[dataset.synth]
n_per_class = 8
seq_len = 10
channels = 3
n_classes = 2
seed = 5
sigma_obs = 0.1
train_fraction = 0.5
shared_endpoints = false
class_log_offset = 0.4
speed_exponents = [1.0, 2.0]

[dataset.drop]
fraction = 0.25

[model]
task = "classification"
in_channels = 3
hidden_dim = 3
n_classes = 2

[model.encoder]
mode = "windowed"
len = 4
stride = 2
layers = []

[model.rgru]
positive_weight_diag = true
diag_activation = "softplus"

[model.field]
kind = "mlp"
hidden = [6]

[model.ode]
n_steps_per_unit = 8
solver = "euler_manifold"
backward = "adjoint"
time_normalization = 1.0

[train]
learning_rate = 0.003
l2 = 0.0001
batch_size = 16
max_iters = 50
loss = "cross_entropy"
optimizer = "adam"
eval_every = 10
freeze_encoder = false
"#;

    #[test]
    fn full_config_parses_and_validates() {
        let cfg: RunConfig = toml::from_str(FULL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.threads, 2);
        assert_eq!(cfg.out_dir, PathBuf::from("artifacts"));
        assert!(matches!(
            cfg.model.encoder.mode,
            EncoderMode::Windowed { len: 4, stride: 2 }
        ));
        assert_eq!(cfg.model.field, FieldKind::Mlp { hidden: vec![6] });
        assert_eq!(cfg.model.ode.backward, BackwardMode::Adjoint);
        assert_eq!(cfg.train.optimizer, Optimizer::Adam);
        assert_eq!(cfg.dataset.drop.as_ref().unwrap().fraction, 0.25);
        // Run-level knobs flow into the resolved training config.
        let tc = cfg.resolved_train();
        assert_eq!(tc.seed, 11);
        assert_eq!(tc.threads, 2);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let text = r#"
[dataset.synth]

[model]
task = "classification"
in_channels = 4
hidden_dim = 4
n_classes = 2

[model.encoder]
mode = "per_timepoint"

[model.field]
kind = "zero"
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.threads, 1);
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.model.ode.n_steps_per_unit, 16);
        assert_eq!(cfg.dataset.synth.as_ref().unwrap().n_per_class, 100);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad_top = FULL.replace("seed = 11", "seed = 11\nbogus = 1");
        assert!(toml::from_str::<RunConfig>(&bad_top).is_err());

        let bad_train = FULL.replace("eval_every = 10", "eval_every = 10\nmomentum = 0.9");
        assert!(toml::from_str::<RunConfig>(&bad_train).is_err());

        let bad_model = FULL.replace("hidden_dim = 3", "hidden_dim = 3\ndropout = 0.5");
        assert!(toml::from_str::<RunConfig>(&bad_model).is_err());

        let bad_synth = FULL.replace("sigma_obs = 0.1", "sigma_obs = 0.1\nnoise = 2");
        assert!(toml::from_str::<RunConfig>(&bad_synth).is_err());

        // threads/seed under [train] are caller-level, not file keys.
        let bad_threads = FULL.replace("eval_every = 10", "eval_every = 10\nthreads = 4");
        assert!(toml::from_str::<RunConfig>(&bad_threads).is_err());
    }

    #[test]
    fn dataset_source_must_be_exactly_one() {
        let both = FULL.replace(
            "[dataset.drop]",
            "[dataset.csv]\npath = \"x.csv\"\n\n[dataset.drop]",
        );
        let cfg: RunConfig = toml::from_str(&both).unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        let neither = r#"
[dataset]

[model]
task = "classification"
in_channels = 2
hidden_dim = 2
n_classes = 2

[model.encoder]
mode = "per_timepoint"

[model.field]
kind = "zero"
"#;
        let cfg: RunConfig = toml::from_str(neither).unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn loss_task_mismatch_is_invalid() {
        let bad = FULL.replace("loss = \"cross_entropy\"", "loss = \"squared_error\"");
        let cfg: RunConfig = toml::from_str(&bad).unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn overrides_parse_or_fail_loudly() {
        let mut cfg: RunConfig = toml::from_str(FULL).unwrap();
        apply_overrides(&mut cfg, Some("99"), Some("8")).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.threads, 8);
        let err = apply_overrides(&mut cfg, Some("not-a-number"), None);
        assert!(matches!(err, Err(ConfigError::Invalid(_))));
        let err = apply_overrides(&mut cfg, None, Some("-3"));
        assert!(matches!(err, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn build_dataset_applies_the_drop() {
        let cfg: RunConfig = toml::from_str(FULL).unwrap();
        let (ds, report) = build_dataset(&cfg).unwrap();
        let report = report.unwrap();
        assert!((report.realized_fraction - 0.25).abs() < 0.05);
        assert!(ds.len() <= 16);
        ds.validate().unwrap();

        // Drop seed defaults to the run seed: same run seed, same result.
        let (ds2, _) = build_dataset(&cfg).unwrap();
        assert_eq!(ds, ds2);
        let mut cfg3 = cfg.clone();
        cfg3.seed = 1234;
        let (ds3, _) = build_dataset(&cfg3).unwrap();
        assert_ne!(ds, ds3);
    }

    #[test]
    fn csv_dataset_round_trips_through_config() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("data.csv");
        let ds = data::synth_manifold_sequences(&SynthConfig {
            n_per_class: 4,
            seq_len: 5,
            channels: 2,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        data::save_csv(&ds, &csv_path).unwrap();

        let text = format!(
            r#"
[dataset.csv]
path = "{}"
train_fraction = 0.5
split_seed = 9

[model]
task = "classification"
in_channels = 2
hidden_dim = 2
n_classes = 2

[model.encoder]
mode = "per_timepoint"

[model.field]
kind = "zero"
"#,
            csv_path.display()
        );
        let cfg: RunConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        let (loaded, report) = build_dataset(&cfg).unwrap();
        assert!(report.is_none());
        assert_eq!(loaded.len(), 8);
        // 0.5 of each 4-sequence class trains.
        assert_eq!(loaded.indices_of(crate::data::Split::Train).len(), 4);
    }
}
