use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cpbench_core::calibration::{calibrate_class_balanced, calibrate_marginal, CalibrationSet};
use cpbench_core::conftr::{compare, ComparisonConfig, ComparisonReport};
use cpbench_core::harness::{run_experiment, ExperimentConfig, SubsetClassMap};
use cpbench_core::io::{load_records, save_records};
use cpbench_core::metrics::EvalReport;
use cpbench_core::prediction::{predict_batch, write_sets_jsonl};
use cpbench_core::scores::ModelFamily;
use cpbench_core::synthetic::{sample_records, split, LabelPrior, OracleWorld, ShiftKind, ShiftSpec};
use cpbench_core::{CalibratedModel, CpError, ScoreConfig};
use serde_json::json;

/// Conformal prediction sets on precomputed classifier logits.
#[derive(Parser)]
#[command(name = "cpbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a threshold on labeled logits and write `model.json`.
    Calibrate(CalibrateArgs),
    /// Write one prediction set per row as JSON lines (`sets.jsonl`).
    Predict(PredictArgs),
    /// Report coverage and inefficiency of a calibrated model on labeled logits.
    Evaluate(EvaluateArgs),
    /// Run the calibrate-once / evaluate-many protocol from a JSON config.
    Run(RunArgs),
    /// Write synthetic labeled logits drawn from a Gaussian mixture.
    Synth(SynthArgs),
    /// Compare cross-entropy and conformal training on a toy mixture.
    Conftr(ConftrArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Thr,
    Aps,
    Raps,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Conv,
    Transformer,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, value_enum, default_value = "aps")]
    method: Method,
    /// RAPS penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// RAPS rank below which no penalty applies.
    #[arg(long)]
    kreg: Option<usize>,
    /// RAPS parameters for an architecture family; `--lambda`/`--kreg` override.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

impl MethodArgs {
    fn score_config(&self) -> anyhow::Result<ScoreConfig> {
        let raps_only = self.lambda.is_some() || self.kreg.is_some() || self.preset.is_some();
        Ok(match self.method {
            Method::Thr | Method::Aps if raps_only => bail!(CpError::config("--lambda, --kreg and --preset apply to --method raps only")),
            Method::Thr => ScoreConfig::Thr,
            Method::Aps => ScoreConfig::Aps,
            Method::Raps => {
                let family = match self.preset {
                    Some(Preset::Transformer) => ModelFamily::Transformer,
                    _ => ModelFamily::Conv,
                };
                let ScoreConfig::Raps { lambda, k_reg } = ScoreConfig::raps_preset(family) else {
                    unreachable!("presets are RAPS")
                };
                ScoreConfig::raps(self.lambda.unwrap_or(lambda), self.kreg.unwrap_or(k_reg))?
            }
        })
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Labeled logits (CPL1, or CSV by extension).
    records: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Per-class thresholds instead of one marginal threshold.
    #[arg(long)]
    class_balanced: bool,
    /// Calibrate on this fraction of the rows and write the rest to `test.cpl1`.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    records: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    records: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// JSON array of one-based classes; other rows are dropped.
    #[arg(long)]
    subset_map: Option<PathBuf>,
    /// Also write `eval.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Overrides the config's split fraction.
    #[arg(long)]
    split: Option<f64>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shift {
    None,
    FeatureNoise,
    MeanDrift,
    LabelPriorShift,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Rows to draw.
    #[arg(long, short = 'n', default_value_t = 1000)]
    samples: usize,
    /// Zipf exponent of the label prior; uniform when absent.
    #[arg(long)]
    zipf: Option<f64>,
    #[arg(long, value_enum, default_value = "none")]
    shift: Shift,
    #[arg(long, default_value_t = 0.0)]
    severity: f64,
    /// Fixes the mixture itself.
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
    /// Fixes the draw from the mixture.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File name inside `--out`; `.csv` selects CSV.
    #[arg(long, default_value = "records.cpl1")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConftrArgs {
    /// Full comparison config as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First seed; seeds `seed .. seed + trials` are run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Miscoverage for both training and post-hoc evaluation.
    #[arg(long)]
    alpha: Option<f64>,
    /// Sigmoid temperature T of the smooth set membership.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    kappa: Option<u8>,
    /// Weight of the size loss.
    #[arg(long)]
    size_weight: Option<f64>,
    /// Soft-sort regularization strength.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Fine-tuning epochs of each arm.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| CpError::io(dir, e))?;
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).map_err(|e| CpError::io(path, e))?;
    Ok(())
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| CpError::io(path, e))?)
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, value)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out));
    match written {
        // a closed pipe (`| head`) is not a failure
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn calibrate(args: CalibrateArgs) -> anyhow::Result<()> {
    let score = args.method.score_config()?;
    let records = load_records(&args.records)?;
    create_dir(&args.out)?;
    let cal = match args.split {
        Some(fraction) => {
            let (cal, test) = split(&records, fraction, args.seed)?;
            save_records(args.out.join("test.cpl1"), &test)?;
            cal
        }
        None => records,
    };
    let set = CalibrationSet::from_records(&cal, score)?;
    let model = if args.class_balanced {
        calibrate_class_balanced(&set, args.alpha, cal.num_classes())?
    } else {
        calibrate_marginal(&set, args.alpha)?
    };
    let text = model.to_json()?;
    write(&args.out.join("model.json"), format!("{text}\n"))?;
    print_json(&model)
}

fn load_model(path: &Path) -> anyhow::Result<CalibratedModel> {
    Ok(CalibratedModel::from_json(&read_text(path)?)?)
}

fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let records = load_records(&args.records)?;
    let sets = predict_batch(&records, &model)?;
    create_dir(&args.out)?;
    let mut buf = Vec::new();
    write_sets_jsonl(&mut buf, &sets)?;
    write(&args.out.join("sets.jsonl"), buf)?;
    print_json(&json!({ "rows": sets.len(), "path": args.out.join("sets.jsonl") }))
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let mut records = load_records(&args.records)?;
    let subset = match &args.subset_map {
        Some(path) => {
            let map = SubsetClassMap::from_json(&read_text(path)?, records.num_classes())?;
            records = records.select(&map.rows(records.labels()));
            Some(map)
        }
        None => None,
    };
    let sets = predict_batch(&records, &model)?;
    let report = EvalReport::compute(&records, &sets, model.alpha(), subset.as_ref().map(|m| m.classes()))?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write(&dir.join("eval.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    print_json(&report)
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::from_json_file(&args.config)?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(t) = args.trials {
        cfg.calibration_source.trials = t;
    }
    if let Some(s) = args.split {
        cfg.calibration_source.split = s;
    }
    if let Some(s) = args.seed {
        cfg.calibration_source.seed = s;
    }
    let report = run_experiment(&cfg)?;
    let summary: Vec<_> = report
        .cells
        .iter()
        .map(|c| {
            json!({
                "dataset": c.dataset,
                "method": c.method,
                "mode": c.mode.name(),
                "alpha": c.alpha,
                "coverage": c.metrics.coverage.mean,
                "inefficiency": c.metrics.inefficiency.mean,
            })
        })
        .collect();
    print_json(&json!({ "output_dir": cfg.output_dir, "cells": summary }))
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let world = OracleWorld::generate(args.classes, args.dim, args.separation, args.noise, args.world_seed)?;
    let prior = match args.zipf {
        Some(s) => LabelPrior::zipf(args.classes, s)?,
        None => LabelPrior::uniform(args.classes),
    };
    let shift = match args.shift {
        Shift::None if args.severity != 0.0 => bail!(CpError::config("--severity needs a --shift kind")),
        Shift::None => ShiftSpec::NONE,
        Shift::FeatureNoise => ShiftSpec::new(ShiftKind::FeatureNoise, args.severity)?,
        Shift::MeanDrift => ShiftSpec::new(ShiftKind::MeanDrift, args.severity)?,
        Shift::LabelPriorShift => ShiftSpec::new(ShiftKind::LabelPriorShift, args.severity)?,
    };
    let records = sample_records(&world.reseeded(args.seed), &prior, args.samples, &shift)?;
    create_dir(&args.out)?;
    let path = args.out.join(&args.name);
    save_records(&path, &records)?;
    print_json(&json!({ "path": path, "rows": records.len(), "classes": records.num_classes() }))
}

fn conftr(args: ConftrArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&read_text(path)?).map_err(CpError::from)?,
        None => ComparisonConfig::default(),
    };
    let smooth = &mut cfg.finetune.smooth;
    if let Some(a) = args.alpha {
        smooth.alpha = a;
        cfg.alpha = a;
    }
    if let Some(t) = args.temperature {
        smooth.temperature = t;
    }
    if let Some(k) = args.kappa {
        smooth.kappa = k;
    }
    if let Some(w) = args.size_weight {
        smooth.size_weight = w;
    }
    if let Some(e) = args.epsilon {
        smooth.dispersion = e;
    }
    if let Some(e) = args.epochs {
        cfg.finetune.epochs = e;
    }
    smooth.validate()?;
    if args.trials == 0 {
        bail!(CpError::config("--trials must be at least 1"));
    }

    create_dir(&args.out)?;
    let mut reports: Vec<ComparisonReport> = Vec::with_capacity(args.trials);
    for seed in args.seed..args.seed + args.trials as u64 {
        let result = compare(&cfg, seed)?;
        write(&args.out.join(format!("baseline_seed{seed}.json")), serde_json::to_vec(&result.baseline)?)?;
        write(&args.out.join(format!("conftr_seed{seed}.json")), serde_json::to_vec(&result.conftr)?)?;
        reports.push(result.report);
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&ComparisonReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let summary = json!({
        "config": cfg,
        "trials": reports,
        "summary": {
            "baseline": {
                "coverage": mean(|r| r.baseline.coverage),
                "inefficiency": mean(|r| r.baseline.inefficiency),
                "accuracy": mean(|r| r.baseline.accuracy),
            },
            "conftr": {
                "coverage": mean(|r| r.conftr.coverage),
                "inefficiency": mean(|r| r.conftr.inefficiency),
                "accuracy": mean(|r| r.conftr.accuracy),
            },
            "conftr_smaller": reports.iter().filter(|r| r.conftr.inefficiency < r.baseline.inefficiency).count(),
        },
    });
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    write(&args.out.join("comparison.json"), &bytes)?;
    print_json(&summary)
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err.downcast_ref::<CpError>().map_or("other", CpError::kind);
    // CpError messages already include their sources
    json!({ "error": { "kind": kind, "message": err.to_string() } })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": message.trim_end() } }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
        Command::Conftr(a) => conftr(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
