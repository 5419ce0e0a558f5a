//! Prediction sets from a calibrated model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedModel;
use crate::error::{CpError, Result};
use crate::records::LogitRecordSet;
use crate::scores::{softmax, score_matrix, Orientation, ScoreMatrix};

/// Sorted, duplicate-free class indices. May be empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PredictionSet(Vec<usize>);

impl PredictionSet {
    pub fn from_classes(mut classes: Vec<usize>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        Self(classes)
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.binary_search(&k).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.0.iter().all(|&k| other.contains(k))
    }
}

/// Strict comparison: a score equal to the threshold is excluded.
#[inline]
pub fn is_member(score: f64, tau: f64, orientation: Orientation) -> bool {
    match orientation {
        Orientation::HigherIsConforming => score > tau,
        Orientation::LowerIsConforming => score < tau,
    }
}

fn set_from_scores(scores: &[f64], model: &CalibratedModel, orientation: Orientation) -> PredictionSet {
    let threshold = model.threshold();
    PredictionSet(
        scores
            .iter()
            .enumerate()
            .filter(|&(k, &s)| is_member(s, threshold.for_class(k), orientation))
            .map(|(k, _)| k)
            .collect(),
    )
}

pub fn predict_set<T: Into<f64> + Copy>(logits: &[T], model: &CalibratedModel) -> Result<PredictionSet> {
    if logits.len() != model.num_classes() {
        return Err(CpError::Shape {
            expected: format!("{} logits", model.num_classes()),
            actual: format!("{} logits", logits.len()),
        });
    }
    let p = softmax(logits)?;
    let cfg = model.score_config();
    cfg.validate(p.len())?;
    let scores = cfg.score_row(&p);
    Ok(set_from_scores(&scores, model, cfg.orientation()))
}

/// Thresholds a precomputed score table; lets one table serve many models.
pub fn predict_from_scores(scores: &ScoreMatrix, model: &CalibratedModel) -> Result<Vec<PredictionSet>> {
    if scores.num_classes != model.num_classes() {
        return Err(CpError::Shape {
            expected: format!("{} classes", model.num_classes()),
            actual: format!("{} classes", scores.num_classes),
        });
    }
    if scores.orientation != model.score_config().orientation() {
        return Err(CpError::config("score table orientation does not match the model"));
    }
    Ok((0..scores.len())
        .map(|i| set_from_scores(scores.row(i), model, scores.orientation))
        .collect())
}

pub fn predict_batch(records: &LogitRecordSet, model: &CalibratedModel) -> Result<Vec<PredictionSet>> {
    if records.num_classes() != model.num_classes() {
        return Err(CpError::Shape {
            expected: format!("{} classes", model.num_classes()),
            actual: format!("{} classes", records.num_classes()),
        });
    }
    let scores = score_matrix(records, &model.score_config())?;
    predict_from_scores(&scores, model)
}

/// One JSON array of one-based class indices per line.
pub fn write_sets_jsonl<W: Write>(mut out: W, sets: &[PredictionSet]) -> std::io::Result<()> {
    for set in sets {
        let one_based: Vec<usize> = set.members().iter().map(|k| k + 1).collect();
        serde_json::to_writer(&mut out, &one_based)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sets_jsonl(text: &str) -> Result<Vec<PredictionSet>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(row, line)| {
            let one_based: Vec<usize> = serde_json::from_str(line).map_err(|e| CpError::from(e).at_row(row))?;
            if one_based.contains(&0) {
                return Err(CpError::Data("class indices are one-based".into()).at_row(row));
            }
            Ok(PredictionSet::from_classes(one_based.into_iter().map(|k| k - 1).collect()))
        })
        .collect()
}
