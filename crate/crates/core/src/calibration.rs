//! Split-conformal thresholds, marginal and class-balanced.
//!
//! Quantiles are order statistics, never interpolated. For a level `q` and
//! `N` calibration scores the upper side picks the `ceil(q * N)`-th smallest
//! score and the lower side the `floor(q * N)`-th; an index below 1 maps to
//! `-inf` and an index above `N` to `+inf`.

use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};
use crate::records::LogitRecordSet;
use crate::scores::{score_matrix, Orientation, ScoreConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

/// One-based order-statistic index for `level * n`, before clamping.
///
/// Products within 1e-9 of an integer snap to it, so levels such as
/// `0.1 * (1 + 1/9)` at `n = 9` land on index 1 rather than 2.
pub fn order_statistic_index(level: f64, n: usize, side: Side) -> i64 {
    let x = level * n as f64;
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        return nearest as i64;
    }
    match side {
        Side::Lower => x.floor() as i64,
        Side::Upper => x.ceil() as i64,
    }
}

/// Finite-sample quantile of `scores` at `level` in `[0, 1 + 1/N]`.
pub fn finite_sample_quantile(scores: &[f64], level: f64, side: Side) -> Result<f64> {
    let n = scores.len();
    if n == 0 {
        return Err(CpError::Calibration("no calibration scores".into()));
    }
    let max_level = 1.0 + 1.0 / n as f64;
    if !(0.0..=max_level + 1e-12).contains(&level) {
        return Err(CpError::config(format!(
            "quantile level {level} outside [0, {max_level}] for N = {n}"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(CpError::Calibration(format!("score {bad} is not a number")));
    }
    let index = order_statistic_index(level, n, side);
    if index < 1 {
        return Ok(f64::NEG_INFINITY);
    }
    if index as usize > n {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(index as usize - 1, f64::total_cmp);
    Ok(*nth)
}

/// True-class scores of the calibration examples.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    score_config: ScoreConfig,
    num_classes: usize,
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl CalibrationSet {
    pub fn new(
        score_config: ScoreConfig,
        num_classes: usize,
        scores: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(CpError::Calibration("calibration set is empty".into()));
        }
        if scores.len() != labels.len() {
            return Err(CpError::Shape {
                expected: format!("{} labels", scores.len()),
                actual: format!("{} labels", labels.len()),
            });
        }
        if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(CpError::ClassOutOfRange { index: y, num_classes }.at_row(row));
        }
        Ok(Self {
            score_config,
            num_classes,
            scores,
            labels,
        })
    }

    /// Scores every record at its true label.
    pub fn from_records(records: &LogitRecordSet, score_config: ScoreConfig) -> Result<Self> {
        let matrix = score_matrix(records, &score_config)?;
        Self::new(
            score_config,
            records.num_classes(),
            matrix.at_labels(records.labels()),
            records.labels().to_vec(),
        )
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn score_config(&self) -> ScoreConfig {
        self.score_config
    }

    pub fn orientation(&self) -> Orientation {
        self.score_config.orientation()
    }
}

/// Scalar threshold or one threshold per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    Marginal(#[serde(with = "extended_f64")] f64),
    ClassBalanced(#[serde(with = "extended_f64::vec")] Vec<f64>),
}

impl Threshold {
    /// Threshold applied to class `k`.
    pub fn for_class(&self, k: usize) -> f64 {
        match self {
            Threshold::Marginal(t) => *t,
            Threshold::ClassBalanced(v) => v[k],
        }
    }
}

/// A frozen threshold plus the score function that produced it.
///
/// Fields are private: once calibrated the model is only read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    score_config: ScoreConfig,
    alpha: f64,
    num_classes: usize,
    threshold: Threshold,
    calibration_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_sizes: Option<Vec<usize>>,
}

impl CalibratedModel {
    /// A model with a threshold supplied directly rather than calibrated.
    pub fn from_threshold(
        score_config: ScoreConfig,
        alpha: f64,
        num_classes: usize,
        threshold: Threshold,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        score_config.validate(num_classes)?;
        if let Threshold::ClassBalanced(v) = &threshold {
            if v.len() != num_classes {
                return Err(CpError::Shape {
                    expected: format!("{num_classes} class thresholds"),
                    actual: format!("{}", v.len()),
                });
            }
        }
        if let Some(t) = threshold_values(&threshold).find(|t| t.is_nan()) {
            return Err(CpError::config(format!("threshold {t} is not a number")));
        }
        Ok(Self {
            score_config,
            alpha,
            num_classes,
            threshold,
            calibration_size: 0,
            class_sizes: None,
        })
    }

    pub fn score_config(&self) -> ScoreConfig {
        self.score_config
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn threshold(&self) -> &Threshold {
        &self.threshold
    }

    pub fn calibration_size(&self) -> usize {
        self.calibration_size
    }

    pub fn class_sizes(&self) -> Option<&[usize]> {
        self.class_sizes.as_deref()
    }

    pub fn is_class_balanced(&self) -> bool {
        matches!(self.threshold, Threshold::ClassBalanced(_))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        let checked = Self::from_threshold(
            model.score_config,
            model.alpha,
            model.num_classes,
            model.threshold.clone(),
        )?;
        Ok(Self {
            calibration_size: model.calibration_size,
            class_sizes: model.class_sizes,
            ..checked
        })
    }
}

fn threshold_values(t: &Threshold) -> impl Iterator<Item = f64> + '_ {
    let slice: &[f64] = match t {
        Threshold::Marginal(v) => std::slice::from_ref(v),
        Threshold::ClassBalanced(v) => v,
    };
    slice.iter().copied()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CpError::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Quantile level and side for an orientation at sample size `n`.
fn level_for(orientation: Orientation, alpha: f64, n: usize) -> (f64, Side) {
    let correction = 1.0 + 1.0 / n as f64;
    match orientation {
        Orientation::HigherIsConforming => (alpha * correction, Side::Lower),
        Orientation::LowerIsConforming => ((1.0 - alpha) * correction, Side::Upper),
    }
}

fn threshold_for(scores: &[f64], orientation: Orientation, alpha: f64) -> Result<f64> {
    let (level, side) = level_for(orientation, alpha, scores.len());
    finite_sample_quantile(scores, level, side)
}

/// Threshold that includes every class under `orientation`.
pub fn all_inclusive(orientation: Orientation) -> f64 {
    match orientation {
        Orientation::HigherIsConforming => f64::NEG_INFINITY,
        Orientation::LowerIsConforming => f64::INFINITY,
    }
}

/// THR: `alpha (1 + 1/N)` lower quantile. APS/RAPS: `(1 - alpha)(1 + 1/N)` upper quantile.
pub fn calibrate_marginal(cal: &CalibrationSet, alpha: f64) -> Result<CalibratedModel> {
    check_alpha(alpha)?;
    let tau = threshold_for(&cal.scores, cal.orientation(), alpha)?;
    Ok(CalibratedModel {
        score_config: cal.score_config,
        alpha,
        num_classes: cal.num_classes,
        threshold: Threshold::Marginal(tau),
        calibration_size: cal.len(),
        class_sizes: None,
    })
}

/// Per-class thresholds, each from that class's own calibration scores.
///
/// A class with no calibration examples gets the all-inclusive sentinel.
pub fn calibrate_class_balanced(
    cal: &CalibrationSet,
    alpha: f64,
    num_classes: usize,
) -> Result<CalibratedModel> {
    check_alpha(alpha)?;
    if num_classes != cal.num_classes {
        return Err(CpError::Shape {
            expected: format!("{} classes", cal.num_classes),
            actual: format!("{num_classes} classes"),
        });
    }
    let mut by_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for (&s, &y) in cal.scores.iter().zip(&cal.labels) {
        by_class[y].push(s);
    }
    let orientation = cal.orientation();
    let thresholds = by_class
        .iter()
        .map(|scores| {
            if scores.is_empty() {
                Ok(all_inclusive(orientation))
            } else {
                threshold_for(scores, orientation, alpha)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibratedModel {
        score_config: cal.score_config,
        alpha,
        num_classes,
        threshold: Threshold::ClassBalanced(thresholds),
        calibration_size: cal.len(),
        class_sizes: Some(by_class.iter().map(Vec::len).collect()),
    })
}

/// JSON has no infinities; they travel as the strings `"inf"` / `"-inf"`.
pub(crate) mod extended_f64 {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v == f64::INFINITY {
            Repr::Text("inf".into())
        } else if v == f64::NEG_INFINITY {
            Repr::Text("-inf".into())
        } else {
            Repr::Num(v)
        }
    }

    fn from_repr<E: Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("expected a number, \"inf\" or \"-inf\", got {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}
