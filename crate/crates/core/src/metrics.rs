//! Coverage, inefficiency and their per-class (macro) variants.
//!
//! Classes with no test examples cannot have a coverage, so they are left
//! out of every macro average and of the violation count. They are still
//! listed in [`EvalReport::absent_classes`].

use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};
use crate::prediction::PredictionSet;
use crate::records::LogitRecordSet;
use crate::scores::argmax;

fn check_lengths(sets: usize, labels: usize) -> Result<()> {
    if sets != labels {
        return Err(CpError::Shape {
            expected: format!("{sets} labels"),
            actual: format!("{labels} labels"),
        });
    }
    if sets == 0 {
        return Err(CpError::Data("no test examples".into()));
    }
    Ok(())
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= num_classes) {
        Some(row) => Err(CpError::ClassOutOfRange {
            index: labels[row],
            num_classes,
        }
        .at_row(row)),
        None => Ok(()),
    }
}

/// Fraction of examples whose true label is in the set.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    check_lengths(sets.len(), labels.len())?;
    let hits = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    Ok(hits as f64 / sets.len() as f64)
}

/// Coverage and mean set size among the test examples of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    #[serde(with = "crate::records::one_based")]
    pub class: usize,
    pub count: usize,
    pub covered: usize,
    pub total_size: usize,
}

impl ClassStats {
    pub fn is_present(&self) -> bool {
        self.count > 0
    }

    /// `None` for a class absent from the test set.
    pub fn cover(&self) -> Option<f64> {
        (self.count > 0).then(|| self.covered as f64 / self.count as f64)
    }

    pub fn inefficiency(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total_size as f64 / self.count as f64)
    }
}

pub fn per_class_stats(sets: &[PredictionSet], labels: &[usize], num_classes: usize) -> Result<Vec<ClassStats>> {
    check_lengths(sets.len(), labels.len())?;
    check_labels(labels, num_classes)?;
    let mut stats: Vec<ClassStats> = (0..num_classes)
        .map(|class| ClassStats {
            class,
            count: 0,
            covered: 0,
            total_size: 0,
        })
        .collect();
    for (set, &y) in sets.iter().zip(labels) {
        let s = &mut stats[y];
        s.count += 1;
        s.covered += usize::from(set.contains(y));
        s.total_size += set.len();
    }
    Ok(stats)
}

/// `(N_k, cover_k)` per class; `cover_k` is `None` when `N_k = 0`.
pub fn per_class_coverage(
    sets: &[PredictionSet],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<(usize, Option<f64>)>> {
    Ok(per_class_stats(sets, labels, num_classes)?
        .iter()
        .map(|s| (s.count, s.cover()))
        .collect())
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Unweighted mean of per-class coverage over present classes.
pub fn macro_coverage(per_class: &[(usize, Option<f64>)]) -> f64 {
    mean_present(per_class.iter().map(|(_, c)| *c))
}

/// Present classes with coverage strictly below `1 - alpha`.
pub fn cover_violations(per_class: &[(usize, Option<f64>)], alpha: f64) -> usize {
    per_class
        .iter()
        .filter_map(|(_, c)| *c)
        .filter(|&c| c < 1.0 - alpha)
        .count()
}

/// Mean set size.
pub fn inefficiency(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return f64::NAN;
    }
    sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len() as f64
}

/// Mean over present classes of the per-class mean set size.
pub fn macro_inefficiency(sets: &[PredictionSet], labels: &[usize], num_classes: usize) -> Result<f64> {
    let stats = per_class_stats(sets, labels, num_classes)?;
    Ok(mean_present(stats.iter().map(ClassStats::inefficiency)))
}

/// Top-1 accuracy of argmax predictions.
pub fn accuracy(records: &LogitRecordSet) -> f64 {
    let hits = records
        .rows()
        .zip(records.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / records.len() as f64
}

/// Unweighted per-class mean of top-1 accuracy over present classes.
pub fn macro_accuracy(records: &LogitRecordSet) -> f64 {
    let k = records.num_classes();
    let mut count = vec![0usize; k];
    let mut hits = vec![0usize; k];
    for (row, &y) in records.rows().zip(records.labels()) {
        count[y] += 1;
        hits[y] += usize::from(argmax(row) == y);
    }
    mean_present(
        count
            .iter()
            .zip(&hits)
            .map(|(&n, &h)| (n > 0).then(|| h as f64 / n as f64)),
    )
}

/// Metrics of one prediction run on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_examples: usize,
    pub coverage: f64,
    pub macro_coverage: f64,
    pub violated_classes: usize,
    pub violated_fraction: f64,
    pub evaluated_classes: usize,
    pub inefficiency: f64,
    pub macro_inefficiency: f64,
    pub accuracy: f64,
    pub macro_accuracy: f64,
    pub per_class: Vec<ClassStats>,
    #[serde(with = "crate::records::one_based::vec")]
    pub absent_classes: Vec<usize>,
}

impl EvalReport {
    /// Metrics restricted to `classes` when given (others are not listed).
    pub fn compute(
        records: &LogitRecordSet,
        sets: &[PredictionSet],
        alpha: f64,
        classes: Option<&[usize]>,
    ) -> Result<Self> {
        let labels = records.labels();
        let k = records.num_classes();
        let all = per_class_stats(sets, labels, k)?;
        let per_class: Vec<ClassStats> = match classes {
            Some(list) => list
                .iter()
                .map(|&c| {
                    all.get(c).copied().ok_or(CpError::ClassOutOfRange {
                        index: c,
                        num_classes: k,
                    })
                })
                .collect::<Result<_>>()?,
            None => all,
        };
        let pairs: Vec<(usize, Option<f64>)> = per_class.iter().map(|s| (s.count, s.cover())).collect();
        let violated = cover_violations(&pairs, alpha);
        let evaluated = per_class.iter().filter(|s| s.is_present()).count();
        Ok(Self {
            num_examples: sets.len(),
            coverage: coverage(sets, labels)?,
            macro_coverage: macro_coverage(&pairs),
            violated_classes: violated,
            violated_fraction: violated as f64 / evaluated.max(1) as f64,
            evaluated_classes: evaluated,
            inefficiency: inefficiency(sets),
            macro_inefficiency: mean_present(per_class.iter().map(ClassStats::inefficiency)),
            accuracy: accuracy(records),
            macro_accuracy: macro_accuracy(records),
            absent_classes: per_class.iter().filter(|s| !s.is_present()).map(|s| s.class).collect(),
            per_class,
        })
    }
}

/// Mean and sample standard deviation across trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialStat {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

impl TrialStat {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, trials: n }
    }
}

/// Per-class numbers averaged over the trials in which the class was present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    #[serde(with = "crate::records::one_based")]
    pub class: usize,
    pub mean_count: f64,
    pub cover: Option<f64>,
    pub inefficiency: Option<f64>,
    pub violated_trials: usize,
}

/// Trial-aggregated metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub coverage: TrialStat,
    pub macro_coverage: TrialStat,
    pub violated_classes: TrialStat,
    pub violated_fraction: TrialStat,
    pub inefficiency: TrialStat,
    pub macro_inefficiency: TrialStat,
    pub accuracy: TrialStat,
    pub macro_accuracy: TrialStat,
    pub per_class: Vec<ClassSummary>,
}

impl AggregateMetrics {
    pub fn from_trials(reports: &[EvalReport], alpha: f64) -> Self {
        let stat = |f: fn(&EvalReport) -> f64| TrialStat::from_values(&reports.iter().map(f).collect::<Vec<_>>());
        let classes = reports.first().map(|r| r.per_class.len()).unwrap_or(0);
        let per_class = (0..classes)
            .map(|i| {
                let rows: Vec<&ClassStats> = reports.iter().map(|r| &r.per_class[i]).collect();
                let covers: Vec<f64> = rows.iter().filter_map(|s| s.cover()).collect();
                let ineffs: Vec<f64> = rows.iter().filter_map(|s| s.inefficiency()).collect();
                let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
                ClassSummary {
                    class: rows[0].class,
                    mean_count: rows.iter().map(|s| s.count as f64).sum::<f64>() / rows.len() as f64,
                    cover: mean(&covers),
                    inefficiency: mean(&ineffs),
                    violated_trials: covers.iter().filter(|&&c| c < 1.0 - alpha).count(),
                }
            })
            .collect();
        Self {
            coverage: stat(|r| r.coverage),
            macro_coverage: stat(|r| r.macro_coverage),
            violated_classes: stat(|r| r.violated_classes as f64),
            violated_fraction: stat(|r| r.violated_fraction),
            inefficiency: stat(|r| r.inefficiency),
            macro_inefficiency: stat(|r| r.macro_inefficiency),
            accuracy: stat(|r| r.accuracy),
            macro_accuracy: stat(|r| r.macro_accuracy),
            per_class,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> PredictionSet {
        PredictionSet::from_classes(v.to_vec())
    }

    #[test]
    fn coverage_trivial_cases() {
        // labels [1, 4] one-based -> [0, 3]
        assert_eq!(coverage(&[set(&[0, 1]), set(&[2])], &[0, 3]).unwrap(), 0.5);
        assert_eq!(coverage(&[set(&[0, 1, 2]), set(&[0, 1, 2])], &[2, 1]).unwrap(), 1.0);
        assert!(matches!(coverage(&[set(&[0])], &[0, 1]), Err(CpError::Shape { .. })));
    }

    #[test]
    fn per_class_reductions() {
        let sets = [set(&[0]), set(&[0]), set(&[0])];
        let pc = per_class_coverage(&sets, &[0, 0, 0], 1).unwrap();
        assert_eq!(pc, vec![(3, Some(1.0))]);

        let sets = [set(&[0]), set(&[0]), set(&[0])];
        let pc = per_class_coverage(&sets, &[0, 1, 1], 2).unwrap();
        assert_eq!(pc, vec![(1, Some(1.0)), (2, Some(0.0))]);

        assert!(per_class_coverage(&sets, &[0, 5, 1], 2).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        let pc = vec![(2, Some(1.0)), (0, None), (4, Some(0.5))];
        assert_eq!(macro_coverage(&pc), 0.75);
        assert_eq!(cover_violations(&pc, 0.1), 1);
    }

    #[test]
    fn violation_is_strict() {
        let pc = vec![(10, Some(0.9)), (10, Some(0.9))];
        assert_eq!(cover_violations(&pc, 0.1), 0);
        assert_eq!(cover_violations(&[(1, Some(1.0)), (2, Some(0.5))], 0.1), 1);
    }

    #[test]
    fn inefficiency_values() {
        assert_eq!(inefficiency(&[set(&[0]), set(&[0, 1, 2])]), 2.0);
        assert_eq!(inefficiency(&[set(&[]), set(&[1])]), 0.5);
        let m = macro_inefficiency(&[set(&[0]), set(&[0, 1, 2]), set(&[1, 2])], &[0, 0, 1], 3).unwrap();
        assert_eq!(m, (2.0 + 2.0) / 2.0);
    }

    #[test]
    fn accuracy_trio() {
        let rs = LogitRecordSet::new(2, vec![0, 1, 1, 1], vec![2.0, 1.0, 0.0, 1.0, 3.0, 0.0, 0.0, 5.0]).unwrap();
        assert_eq!(accuracy(&rs), 0.75);
        assert_eq!(macro_accuracy(&rs), (1.0 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn trial_stat_sample_std() {
        let s = TrialStat::from_values(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(TrialStat::from_values(&[4.0]).std, 0.0);
    }
}
