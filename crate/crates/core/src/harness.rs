//! Calibrate-once, evaluate-many experiment protocol.
//!
//! Every trial splits the calibration source, calibrates each (method,
//! alpha, mode) cell on one half, then evaluates the frozen model on the
//! other half and on every external target. Trial `t` uses seed `seed + t`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_class_balanced, calibrate_marginal, CalibratedModel, CalibrationSet};
use crate::error::{CpError, Result};
use crate::io::load_records;
use crate::metrics::{AggregateMetrics, EvalReport};
use crate::prediction::predict_from_scores;
use crate::records::LogitRecordSet;
use crate::scores::{score_matrix, ScoreConfig, ScoreMatrix};
use crate::synthetic::split_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    #[default]
    Marginal,
    ClassBalanced,
}

impl CalibrationMode {
    pub fn name(&self) -> &'static str {
        match self {
            CalibrationMode::Marginal => "marginal",
            CalibrationMode::ClassBalanced => "class_balanced",
        }
    }

    pub fn calibrate(&self, cal: &CalibrationSet, alpha: f64) -> Result<CalibratedModel> {
        match self {
            CalibrationMode::Marginal => calibrate_marginal(cal, alpha),
            CalibrationMode::ClassBalanced => calibrate_class_balanced(cal, alpha, cal.num_classes()),
        }
    }
}

/// Restricts evaluation to a subset of a larger label space. Sets are still
/// formed over all classes; only rows whose label is in the subset count,
/// and per-class metrics cover only subset classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetClassMap {
    num_classes: usize,
    classes: Vec<usize>,
}

impl SubsetClassMap {
    pub fn new(num_classes: usize, subset: &[usize]) -> Result<Self> {
        let classes: Vec<usize> = subset.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        if classes.is_empty() {
            return Err(CpError::config("class subset is empty"));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(CpError::ClassOutOfRange { index: c, num_classes });
        }
        Ok(Self { num_classes, classes })
    }

    pub fn identity(num_classes: usize) -> Self {
        Self {
            num_classes,
            classes: (0..num_classes).collect(),
        }
    }

    /// A JSON array of one-based class indices.
    pub fn from_json(text: &str, num_classes: usize) -> Result<Self> {
        let one_based: Vec<usize> = serde_json::from_str(text)?;
        if one_based.contains(&0) {
            return Err(CpError::Data("subset class indices are one-based".into()));
        }
        Self::new(num_classes, &one_based.iter().map(|c| c - 1).collect::<Vec<_>>())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn contains(&self, k: usize) -> bool {
        self.classes.binary_search(&k).is_ok()
    }

    /// Indices of rows whose label lies in the subset.
    pub fn rows(&self, labels: &[usize]) -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| self.contains(y))
            .map(|(i, _)| i)
            .collect()
    }
}

/// An evaluation set that is never used for calibration.
#[derive(Debug, Clone)]
pub struct Target {
    pub name: String,
    pub records: LogitRecordSet,
    pub subset: Option<SubsetClassMap>,
}

impl Target {
    pub fn new(name: impl Into<String>, records: LogitRecordSet) -> Self {
        Self {
            name: name.into(),
            records,
            subset: None,
        }
    }

    pub fn with_subset(mut self, subset: SubsetClassMap) -> Self {
        self.subset = Some(subset);
        self
    }
}

/// Everything except the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    /// Fraction of the source used for calibration.
    pub split: f64,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<ScoreConfig>,
    pub alphas: Vec<f64>,
    pub modes: Vec<CalibrationMode>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            split: 0.5,
            trials: 10,
            seed: 0,
            methods: vec![ScoreConfig::Thr, ScoreConfig::Aps, ScoreConfig::raps_preset(crate::scores::ModelFamily::Conv)],
            alphas: vec![0.1],
            modes: vec![CalibrationMode::Marginal],
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(CpError::config("trial count must be at least 1"));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(CpError::config(format!("split fraction must lie in (0, 1), got {}", self.split)));
        }
        if self.methods.is_empty() || self.alphas.is_empty() || self.modes.is_empty() {
            return Err(CpError::config("need at least one method, alpha and calibration mode"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(CpError::config(format!("alpha must lie in (0, 1), got {a}")));
        }
        Ok(())
    }
}

/// Per-trial headline numbers kept alongside the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub coverage: f64,
    pub macro_coverage: f64,
    pub inefficiency: f64,
    pub violated_classes: usize,
}

/// One (dataset, method, alpha, mode) block of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub dataset: String,
    pub model: String,
    pub severity: Option<f64>,
    pub method: String,
    pub score: ScoreConfig,
    pub alpha: f64,
    pub mode: CalibrationMode,
    pub metrics: AggregateMetrics,
    pub trials: Vec<TrialRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: Protocol,
    pub source: String,
    pub calibration_size: usize,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, dataset: &str, method: &str, alpha: f64, mode: CalibrationMode) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.method == method && c.alpha == alpha && c.mode == mode)
    }
}

/// Name of the block evaluated on the held-out half of the source.
pub const IN_DISTRIBUTION: &str = "in_distribution";

struct PreparedTarget<'a> {
    name: &'a str,
    records: LogitRecordSet,
    classes: Option<&'a [usize]>,
    scores: Vec<ScoreMatrix>,
}

fn severity_of(records: &LogitRecordSet) -> Option<f64> {
    records.metadata.tags.get("severity").and_then(|s| s.parse().ok())
}

/// Runs the protocol in memory. Trials run in parallel; the report does not
/// depend on scheduling.
pub fn run_protocol(source: &LogitRecordSet, targets: &[Target], protocol: &Protocol) -> Result<ExperimentReport> {
    protocol.validate()?;
    let k = source.num_classes();
    for m in &protocol.methods {
        m.validate(k)?;
    }
    for t in targets {
        if t.records.num_classes() != k {
            return Err(CpError::config(format!(
                "target {} has {} classes but the calibration source has {k}",
                t.name,
                t.records.num_classes()
            )));
        }
        if let Some(map) = &t.subset {
            if map.num_classes() != k {
                return Err(CpError::config(format!(
                    "subset map for {} is over {} classes, expected {k}",
                    t.name,
                    map.num_classes()
                )));
            }
        }
    }

    let source_scores: Vec<ScoreMatrix> = protocol.methods.iter().map(|m| score_matrix(source, m)).collect::<Result<_>>()?;
    let prepared: Vec<PreparedTarget> = targets
        .iter()
        .map(|t| {
            let records = match &t.subset {
                Some(map) => {
                    let rows = map.rows(t.records.labels());
                    if rows.is_empty() {
                        return Err(CpError::Data(format!("target {} has no rows in the class subset", t.name)));
                    }
                    t.records.select(&rows)
                }
                None => t.records.clone(),
            };
            let scores = protocol.methods.iter().map(|m| score_matrix(&records, m)).collect::<Result<_>>()?;
            Ok(PreparedTarget {
                name: &t.name,
                classes: t.subset.as_ref().map(|s| s.classes()),
                records,
                scores,
            })
        })
        .collect::<Result<_>>()?;

    // per trial: [cell][dataset] reports, cells ordered method, alpha, mode
    let per_trial = crate::par::try_map_indexed(protocol.trials, |t| {
        run_trial(source, &source_scores, &prepared, protocol, t).map_err(|e| CpError::Trial {
            trial: t,
            source: Box::new(e),
        })
    })?;

    let datasets: Vec<(&str, String, Option<f64>)> = std::iter::once((
        IN_DISTRIBUTION,
        source.metadata.model.clone(),
        severity_of(source),
    ))
    .chain(prepared.iter().map(|p| (p.name, p.records.metadata.model.clone(), severity_of(&p.records))))
    .collect();

    let mut cells = Vec::new();
    let mut cell_index = 0;
    for method in &protocol.methods {
        for &alpha in &protocol.alphas {
            for &mode in &protocol.modes {
                for (d, (name, model, severity)) in datasets.iter().enumerate() {
                    let reports: Vec<&EvalReport> = per_trial.iter().map(|trial| &trial[cell_index][d]).collect();
                    let owned: Vec<EvalReport> = reports.iter().map(|r| (*r).clone()).collect();
                    cells.push(CellReport {
                        dataset: name.to_string(),
                        model: model.clone(),
                        severity: *severity,
                        method: method.name().to_string(),
                        score: *method,
                        alpha,
                        mode,
                        metrics: AggregateMetrics::from_trials(&owned, alpha),
                        trials: reports
                            .iter()
                            .enumerate()
                            .map(|(t, r)| TrialRow {
                                trial: t,
                                seed: protocol.seed.wrapping_add(t as u64),
                                coverage: r.coverage,
                                macro_coverage: r.macro_coverage,
                                inefficiency: r.inefficiency,
                                violated_classes: r.violated_classes,
                            })
                            .collect(),
                    });
                }
                cell_index += 1;
            }
        }
    }
    Ok(ExperimentReport {
        protocol: protocol.clone(),
        source: source.metadata.dataset.clone(),
        calibration_size: (protocol.split * source.len() as f64).round() as usize,
        cells,
    })
}

fn run_trial(
    source: &LogitRecordSet,
    source_scores: &[ScoreMatrix],
    targets: &[PreparedTarget],
    protocol: &Protocol,
    trial: usize,
) -> Result<Vec<Vec<EvalReport>>> {
    let seed = protocol.seed.wrapping_add(trial as u64);
    let (cal_idx, test_idx) = split_indices(source.len(), protocol.split, seed)?;
    let test = source.select(&test_idx);
    let cal_labels: Vec<usize> = cal_idx.iter().map(|&i| source.labels()[i]).collect();
    let k = source.num_classes();

    let mut out = Vec::new();
    for (m, method) in protocol.methods.iter().enumerate() {
        let scores = &source_scores[m];
        let cal_scores = scores.select(&cal_idx).at_labels(&cal_labels);
        let cal = CalibrationSet::new(*method, k, cal_scores, cal_labels.clone())?;
        let test_scores = scores.select(&test_idx);
        for &alpha in &protocol.alphas {
            for &mode in &protocol.modes {
                let model = mode.calibrate(&cal, alpha)?;
                let mut row = Vec::with_capacity(targets.len() + 1);
                let sets = predict_from_scores(&test_scores, &model)?;
                row.push(EvalReport::compute(&test, &sets, alpha, None)?);
                for t in targets {
                    let sets = predict_from_scores(&t.scores[m], &model)?;
                    row.push(EvalReport::compute(&t.records, &sets, alpha, t.classes)?);
                }
                out.push(row);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub path: PathBuf,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_split() -> f64 {
    0.5
}

fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub path: PathBuf,
    /// Defaults to the file's dataset metadata, then its file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub subset_map: Option<PathBuf>,
}

/// File-based experiment description. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub calibration_source: SourceSpec,
    pub methods: Vec<ScoreConfig>,
    pub alphas: Vec<f64>,
    #[serde(default = "default_modes")]
    pub modes: Vec<CalibrationMode>,
    #[serde(default)]
    pub evaluation_targets: Vec<TargetSpec>,
    pub output_dir: PathBuf,
}

fn default_modes() -> Vec<CalibrationMode> {
    vec![CalibrationMode::Marginal]
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CpError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.calibration_source.path);
        fix(&mut self.output_dir);
        for t in &mut self.evaluation_targets {
            fix(&mut t.path);
            if let Some(m) = &mut t.subset_map {
                fix(m);
            }
        }
    }

    pub fn protocol(&self) -> Protocol {
        Protocol {
            split: self.calibration_source.split,
            trials: self.calibration_source.trials,
            seed: self.calibration_source.seed,
            methods: self.methods.clone(),
            alphas: self.alphas.clone(),
            modes: self.modes.clone(),
        }
    }
}

fn target_name(spec: &TargetSpec, records: &LogitRecordSet) -> String {
    spec.name
        .clone()
        .or_else(|| (!records.metadata.dataset.is_empty()).then(|| records.metadata.dataset.clone()))
        .unwrap_or_else(|| {
            spec.path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
}

/// Loads every file, runs the protocol and writes the reports.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let source = load_records(&cfg.calibration_source.path)?;
    let mut targets = Vec::with_capacity(cfg.evaluation_targets.len());
    let mut names = BTreeSet::new();
    for spec in &cfg.evaluation_targets {
        let records = load_records(&spec.path)?;
        let mut name = target_name(spec, &records);
        // keep block names unique so report rows stay addressable
        let mut n = 2;
        while !names.insert(name.clone()) || name == IN_DISTRIBUTION {
            name = format!("{}#{n}", target_name(spec, &records));
            n += 1;
        }
        let mut target = Target::new(name, records);
        if let Some(map_path) = &spec.subset_map {
            let text = fs::read_to_string(map_path).map_err(|e| CpError::io(map_path, e))?;
            let map = SubsetClassMap::from_json(&text, target.records.num_classes())?;
            target = target.with_subset(map);
        }
        targets.push(target);
    }
    let report = run_protocol(&source, &targets, &cfg.protocol())?;
    write_reports(&report, &cfg.output_dir)?;
    Ok(report)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    dataset: &'a str,
    model: &'a str,
    severity: Option<f64>,
    method: &'a str,
    mode: &'a str,
    alpha: f64,
    trials: usize,
    coverage_mean: f64,
    coverage_std: f64,
    macro_coverage_mean: f64,
    macro_coverage_std: f64,
    violated_classes_mean: f64,
    violated_fraction_mean: f64,
    inefficiency_mean: f64,
    inefficiency_std: f64,
    macro_inefficiency_mean: f64,
    accuracy_mean: f64,
    macro_accuracy_mean: f64,
}

#[derive(Serialize)]
struct ClassRow<'a> {
    dataset: &'a str,
    method: &'a str,
    mode: &'a str,
    alpha: f64,
    class: usize,
    mean_count: f64,
    cover: Option<f64>,
    inefficiency: Option<f64>,
    violated_trials: usize,
}

#[derive(Serialize)]
struct PlotRow<'a> {
    dataset: &'a str,
    model: &'a str,
    severity: Option<f64>,
    method: &'a str,
    mode: &'a str,
    alpha: f64,
    coverage: f64,
    coverage_std: f64,
    inefficiency: f64,
    inefficiency_std: f64,
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CpError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CpError::Data(e.to_string()))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CpError::io(&path, e))
}

/// Writes `report.json`, `report.csv`, `per_class.csv` and `plot_data.csv`.
/// Class indices in the CSVs are one-based.
pub fn write_reports(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CpError::io(dir, e))?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    write_file(dir, "report.json", &json)?;

    let summary = report.cells.iter().map(|c| SummaryRow {
        dataset: &c.dataset,
        model: &c.model,
        severity: c.severity,
        method: &c.method,
        mode: c.mode.name(),
        alpha: c.alpha,
        trials: c.metrics.coverage.trials,
        coverage_mean: c.metrics.coverage.mean,
        coverage_std: c.metrics.coverage.std,
        macro_coverage_mean: c.metrics.macro_coverage.mean,
        macro_coverage_std: c.metrics.macro_coverage.std,
        violated_classes_mean: c.metrics.violated_classes.mean,
        violated_fraction_mean: c.metrics.violated_fraction.mean,
        inefficiency_mean: c.metrics.inefficiency.mean,
        inefficiency_std: c.metrics.inefficiency.std,
        macro_inefficiency_mean: c.metrics.macro_inefficiency.mean,
        accuracy_mean: c.metrics.accuracy.mean,
        macro_accuracy_mean: c.metrics.macro_accuracy.mean,
    });
    write_file(dir, "report.csv", &csv_bytes(summary)?)?;

    let classes = report.cells.iter().flat_map(|c| {
        c.metrics.per_class.iter().map(move |s| ClassRow {
            dataset: &c.dataset,
            method: &c.method,
            mode: c.mode.name(),
            alpha: c.alpha,
            class: s.class + 1,
            mean_count: s.mean_count,
            cover: s.cover,
            inefficiency: s.inefficiency,
            violated_trials: s.violated_trials,
        })
    });
    write_file(dir, "per_class.csv", &csv_bytes(classes)?)?;

    let plot = report.cells.iter().map(|c| PlotRow {
        dataset: &c.dataset,
        model: &c.model,
        severity: c.severity,
        method: &c.method,
        mode: c.mode.name(),
        alpha: c.alpha,
        coverage: c.metrics.coverage.mean,
        coverage_std: c.metrics.coverage.std,
        inefficiency: c.metrics.inefficiency.mean,
        inefficiency_std: c.metrics.inefficiency.std,
    });
    write_file(dir, "plot_data.csv", &csv_bytes(plot)?)
}
