//! Command-line front end: train and evaluate runs described by TOML
//! configs, benchmark the closed-form mean, corrupt datasets for
//! robustness studies, and run the full verification battery.
//!
//! Exit codes: 0 success, 1 usage or configuration problem (also failed
//! verification), 2 data problem, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use logchol::config::{self, ConfigError, RunConfig};
use logchol::data::{self, DataError, Split};
use logchol::model::{self, EvalSummary, ModelError};
use logchol::spd;
use logchol::verify;

#[derive(Parser)]
#[command(name = "logchol", version, about = "Continuous-time sequence modeling on the Cholesky manifold")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration and write metrics plus a
    /// checkpoint.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a CSV dataset.
    Eval(EvalArgs),
    /// Time the closed-form mean against the iterative flow on composed
    /// matrices.
    Bench(BenchArgs),
    /// Run every verification criterion and report one line per check.
    Verify,
    /// Randomly hide observations in a CSV dataset.
    Corrupt(CorruptArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the run seed (flag beats LOGCHOL_SEED beats file).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the worker thread count (flag beats LOGCHOL_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV to score.
    #[arg(long)]
    data: PathBuf,
    /// Which split to score; loaded CSVs carry no split, so `all` is the
    /// usual choice.
    #[arg(long, default_value = "all", value_parser = ["train", "test", "all"])]
    split: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Matrix sizes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    dims: Vec<usize>,
    /// Points averaged per timing.
    #[arg(long, default_value_t = 6)]
    points: usize,
    /// Repeats per cell; the best is kept.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0x2A)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    /// Dataset CSV to corrupt.
    #[arg(long)]
    data: PathBuf,
    /// Fraction of observed values to hide, in [0, 1).
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the corrupted CSV.
    #[arg(long)]
    out: PathBuf,
}

/// Failures sorted into the documented exit codes.
enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        if model::numerical_failure(&e) || matches!(e, ModelError::Diverged { .. }) {
            Failure::Numeric(e.to_string())
        } else if matches!(e, ModelError::Config(_)) {
            Failure::Config(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(format!("io error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help and usage itself; only the exit code is
            // normalized to the documented scheme.
            let failed = e.use_stderr();
            let _ = e.print();
            return if failed { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Bench(args) => bench(args),
        Command::Verify => Ok(run_verify()),
        Command::Corrupt(args) => corrupt(args),
    }
}

fn load_config(args: &TrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = config::load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<ExitCode, Failure> {
    let cfg = load_config(&args)?;
    let (ds, drop_report) = config::build_dataset(&cfg)?;
    let tc = cfg.resolved_train();

    let init = model::init_model(&cfg.model, cfg.seed)?;
    let outcome = model::train(&cfg.model, &tc, &ds, init)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("metrics.csv"), model::metrics_csv(&outcome.rows))?;
    model::save_checkpoint(&cfg.out_dir.join("checkpoint"), &cfg.model, &outcome.params, cfg.seed)?;
    let snapshot = toml::to_string_pretty(&cfg)
        .map_err(|e| Failure::Config(format!("cannot render config snapshot: {e}")))?;
    std::fs::write(cfg.out_dir.join("config.toml"), snapshot)?;

    let train_idx = ds.indices_of(Split::Train);
    let test_idx = ds.indices_of(Split::Test);
    let train_metric = summary_json(&model::evaluate(&cfg.model, &outcome.params.values, &ds, &train_idx)?);
    let test_metric = if test_idx.is_empty() {
        serde_json::Value::Null
    } else {
        summary_json(&model::evaluate(&cfg.model, &outcome.params.values, &ds, &test_idx)?)
    };

    let report = serde_json::json!({
        "seed": cfg.seed,
        "iterations": outcome.rows.last().map(|r| r.iteration),
        "final_loss": outcome.rows.last().map(|r| r.loss),
        "train": train_metric,
        "test": test_metric,
        "dropped": drop_report,
        "out_dir": cfg.out_dir,
    });
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn summary_json(summary: &EvalSummary) -> serde_json::Value {
    match summary {
        EvalSummary::Classification(m) => {
            serde_json::json!({"task": "classification", "accuracy": m.accuracy, "kappa": m.kappa, "macro_f1": m.macro_f1})
        }
        EvalSummary::Regression(m) => {
            serde_json::json!({"task": "regression", "mse": m.mse, "mape": m.mape, "r2": m.r2})
        }
    }
}

fn eval(args: EvalArgs) -> Result<ExitCode, Failure> {
    let ckpt = model::load_checkpoint(&args.checkpoint)?;
    let ds = data::load_csv(&args.data)?;
    let indices: Vec<usize> = match args.split.as_str() {
        "train" => ds.indices_of(Split::Train),
        "test" => ds.indices_of(Split::Test),
        _ => (0..ds.sequences.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Failure::Data(format!("split {:?} selects no sequences", args.split)));
    }
    let summary = model::evaluate(&ckpt.config, &ckpt.params.values, &ds, &indices)?;
    let mut line = summary_json(&summary);
    line["sequences"] = serde_json::json!(indices.len());
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

fn bench(args: BenchArgs) -> Result<ExitCode, Failure> {
    if args.dims.is_empty() {
        return Err(Failure::Config("bench needs at least one dimension".into()));
    }
    let rows = spd::complexity_benchmark(&args.dims, args.points, args.repeats, args.seed);
    let mut csv = String::from("d,n_points,t_closed_ns,t_karcher_ns\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.d, r.n_points, r.t_closed_ns, r.t_karcher_ns));
    }
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }

    // Closed-form cost should scale like the input size n * tri_len(d).
    if rows.len() >= 2 {
        let xs: Vec<f64> = rows
            .iter()
            .map(|r| (r.n_points * logchol::geometry::tri_len(r.d)) as f64)
            .collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.t_closed_ns as f64).collect();
        eprintln!("closed-form log-log slope vs input size: {:.3}", spd::fit_loglog_slope(&xs, &ys));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify() -> ExitCode {
    let reports = verify::run_all_with(|r| println!("{}", r.line()));
    if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn corrupt(args: CorruptArgs) -> Result<ExitCode, Failure> {
    let ds = data::load_csv(&args.data)?;
    let (dropped, report) = data::drop_observations(&ds, args.fraction, args.seed)?;
    data::save_csv(&dropped, &args.out)?;
    let line = serde_json::json!({
        "report": report,
        "out": args.out,
        "sequences": dropped.sequences.len(),
    });
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}
