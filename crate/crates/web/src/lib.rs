//! Browser demo bindings. Every export takes plain numbers and strings and
//! returns a JSON string, so the page needs no generated type glue.

use cpbench_core::calibration::{calibrate_marginal, CalibrationSet};
use cpbench_core::harness::{run_protocol, CalibrationMode, Protocol, Target};
use cpbench_core::metrics::{coverage, inefficiency};
use cpbench_core::prediction::{predict_from_scores, predict_set};
use cpbench_core::scores::{score_matrix, softmax, ModelFamily};
use cpbench_core::synthetic::{sample_records, split, LabelPrior, OracleWorld, ShiftKind, ShiftSpec};
use cpbench_core::{CpError, LogitRecordSet, ScoreConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const DIM: usize = 8;
const SEPARATION: f64 = 1.0;

fn method(name: &str) -> Result<ScoreConfig, CpError> {
    match name {
        "thr" => Ok(ScoreConfig::Thr),
        "aps" => Ok(ScoreConfig::Aps),
        "raps" => Ok(ScoreConfig::raps_preset(ModelFamily::Conv)),
        "raps-transformer" => Ok(ScoreConfig::raps_preset(ModelFamily::Transformer)),
        other => Err(CpError::config(format!("unknown method {other:?}"))),
    }
}

fn shift_kind(name: &str) -> Result<ShiftKind, CpError> {
    match name {
        "feature_noise" => Ok(ShiftKind::FeatureNoise),
        "mean_drift" => Ok(ShiftKind::MeanDrift),
        "label_prior_shift" => Ok(ShiftKind::LabelPriorShift),
        other => Err(CpError::config(format!("unknown shift {other:?}"))),
    }
}

fn draw(classes: usize, n: usize, seed: u64, shift: &ShiftSpec) -> Result<LogitRecordSet, CpError> {
    let world = OracleWorld::generate(classes, DIM, SEPARATION, 1.0, seed)?;
    sample_records(&world, &LabelPrior::uniform(classes), n, shift)
}

#[derive(Debug, Serialize)]
pub struct CoverageCurve {
    pub alphas: Vec<f64>,
    pub coverage: Vec<f64>,
    pub inefficiency: Vec<f64>,
}

/// Mean coverage and set size over `trials` random splits for
/// alpha = 0.02, 0.04, ..., 0.5.
pub fn coverage_curve(
    method_name: &str,
    classes: usize,
    n_cal: usize,
    n_test: usize,
    trials: usize,
    seed: u64,
) -> Result<CoverageCurve, CpError> {
    let score = method(method_name)?;
    if trials == 0 {
        return Err(CpError::config("need at least one trial"));
    }
    let alphas: Vec<f64> = (1..=25).map(|i| i as f64 * 0.02).collect();
    let mut cov = vec![0.0; alphas.len()];
    let mut size = vec![0.0; alphas.len()];
    let records = draw(classes, n_cal + n_test, seed, &ShiftSpec::NONE)?;
    let fraction = n_cal as f64 / (n_cal + n_test) as f64;
    for t in 0..trials as u64 {
        let (cal, test) = split(&records, fraction, seed.wrapping_add(t))?;
        let cal = CalibrationSet::from_records(&cal, score)?;
        let scores = score_matrix(&test, &score)?;
        for (i, &alpha) in alphas.iter().enumerate() {
            let sets = predict_from_scores(&scores, &calibrate_marginal(&cal, alpha)?)?;
            cov[i] += coverage(&sets, test.labels())?;
            size[i] += inefficiency(&sets);
        }
    }
    let n = trials as f64;
    Ok(CoverageCurve {
        alphas,
        coverage: cov.into_iter().map(|c| c / n).collect(),
        inefficiency: size.into_iter().map(|s| s / n).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct SeverityPoint {
    pub severity: f64,
    pub coverage: f64,
    pub inefficiency: f64,
    pub accuracy: f64,
}

/// Calibrates in distribution, then evaluates on shifted draws at
/// severities 0 through 5.
pub fn shift_sweep(
    method_name: &str,
    shift: &str,
    alpha: f64,
    classes: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<SeverityPoint>, CpError> {
    let kind = shift_kind(shift)?;
    let source = draw(classes, 2000, seed, &ShiftSpec::NONE)?;
    let targets = (0..=5)
        .map(|s| {
            let spec = ShiftSpec::new(kind, s as f64)?;
            Ok(Target::new(format!("s{s}"), draw(classes, 2000, seed.wrapping_add(1), &spec)?))
        })
        .collect::<Result<Vec<_>, CpError>>()?;
    let protocol = Protocol {
        trials,
        seed,
        methods: vec![method(method_name)?],
        alphas: vec![alpha],
        modes: vec![CalibrationMode::Marginal],
        ..Default::default()
    };
    let report = run_protocol(&source, &targets, &protocol)?;
    Ok(report
        .cells
        .iter()
        .filter_map(|c| {
            let s: f64 = c.dataset.strip_prefix('s')?.parse().ok()?;
            Some(SeverityPoint {
                severity: s,
                coverage: c.metrics.coverage.mean,
                inefficiency: c.metrics.inefficiency.mean,
                accuracy: c.metrics.accuracy.mean,
            })
        })
        .collect())
}

#[derive(Debug, Serialize)]
pub struct Example {
    pub row: usize,
    /// One-based, like every other external view.
    pub label: usize,
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub set: Vec<usize>,
}

/// One held-out example with its class probabilities, per-class scores
/// and prediction set.
pub fn explore(method_name: &str, alpha: f64, classes: usize, seed: u64, row: usize) -> Result<Example, CpError> {
    let score = method(method_name)?;
    let records = draw(classes, 2000, seed, &ShiftSpec::NONE)?;
    let (cal, test) = split(&records, 0.5, seed)?;
    let model = calibrate_marginal(&CalibrationSet::from_records(&cal, score)?, alpha)?;
    let row = row % test.len();
    let logits = test.row(row);
    let probs = softmax(logits)?;
    let set = predict_set(logits, &model)?;
    Ok(Example {
        row,
        label: test.labels()[row] + 1,
        scores: score.score_row(&probs),
        probs: probs.into_inner(),
        threshold: model.threshold().for_class(0),
        set: set.members().iter().map(|k| k + 1).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T, CpError>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = coverageCurve)]
pub fn coverage_curve_js(
    method: &str,
    classes: usize,
    n_cal: usize,
    n_test: usize,
    trials: usize,
    seed: u32,
) -> Result<String, JsError> {
    to_js(coverage_curve(method, classes, n_cal, n_test, trials, seed.into()))
}

#[wasm_bindgen(js_name = shiftSweep)]
pub fn shift_sweep_js(method: &str, shift: &str, alpha: f64, classes: usize, trials: usize, seed: u32) -> Result<String, JsError> {
    to_js(shift_sweep(method, shift, alpha, classes, trials, seed.into()))
}

#[wasm_bindgen(js_name = exploreExample)]
pub fn explore_js(method: &str, alpha: f64, classes: usize, seed: u32, row: usize) -> Result<String, JsError> {
    to_js(explore(method, alpha, classes, seed.into(), row))
}
