//! Nonconformity / conformity scores for THR, APS and RAPS.
//!
//! All arithmetic is `f64`. Classes are zero-based; ranks reported by
//! [`SortedProbView::rank`] are one-based so `rank == 1` is the most
//! probable class.

use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};
use crate::records::LogitRecordSet;

/// A softmax output: `K >= 2` non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps probabilities that already satisfy the simplex invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(CpError::Data(format!("need at least 2 classes, got {}", probs.len())));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(CpError::Data(format!("probability {} at index {i} outside [0, 1]", probs[i])));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(CpError::Data(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// First index of the maximum; ties resolve to the lowest class index.
pub(crate) fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Into<f64> + Copy>(logits: &[T]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(CpError::Data(format!("need at least 2 logits, got {}", logits.len())));
    }
    let mut out: Vec<f64> = Vec::with_capacity(logits.len());
    let mut max = f64::NEG_INFINITY;
    for (index, &l) in logits.iter().enumerate() {
        let value: f64 = l.into();
        if !value.is_finite() {
            return Err(CpError::NonFinite { index, value });
        }
        max = max.max(value);
        out.push(value);
    }
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    Ok(ProbVector(out))
}

/// Probabilities sorted non-increasing, with the rank of every class.
///
/// Ties are ordered by ascending class index, so the permutation is a
/// deterministic function of the probabilities.
#[derive(Debug, Clone)]
pub struct SortedProbView {
    order: Vec<usize>,
    rank: Vec<usize>,
    cumulative: Vec<f64>,
}

impl SortedProbView {
    pub fn new(p: &ProbVector) -> Self {
        let probs = p.as_slice();
        let mut order: Vec<usize> = (0..probs.len()).collect();
        // stable: equal probabilities keep ascending class order
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let mut rank = vec![0; probs.len()];
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for (r, &k) in order.iter().enumerate() {
            rank[k] = r + 1;
            acc += probs[k];
            cumulative.push(acc);
        }
        Self {
            order,
            rank,
            cumulative,
        }
    }

    /// Classes from most to least probable.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// One-based rank of class `k`.
    pub fn rank(&self, k: usize) -> usize {
        self.rank[k]
    }

    /// Probability mass of the top `r` classes.
    pub fn mass_through_rank(&self, r: usize) -> f64 {
        self.cumulative[r - 1]
    }
}

/// Which side of the threshold counts as "conforming".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// THR: a class is kept when its score is above the threshold.
    HigherIsConforming,
    /// APS / RAPS: a class is kept when its score is below the threshold.
    LowerIsConforming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Conv,
    Transformer,
}

/// Score function and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum ScoreConfig {
    Thr,
    Aps,
    Raps { lambda: f64, k_reg: usize },
}

impl ScoreConfig {
    pub fn raps(lambda: f64, k_reg: usize) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(CpError::config(format!("RAPS lambda must be finite and >= 0, got {lambda}")));
        }
        if k_reg == 0 {
            return Err(CpError::config("RAPS k_reg must be a positive integer"));
        }
        Ok(ScoreConfig::Raps { lambda, k_reg })
    }

    /// RAPS settings used for each architecture family: `conv` is
    /// (λ = 0.01, k_reg = 5), `transformer` is (λ = 0.1, k_reg = 2).
    pub fn raps_preset(family: ModelFamily) -> Self {
        match family {
            ModelFamily::Conv => ScoreConfig::Raps {
                lambda: 0.01,
                k_reg: 5,
            },
            ModelFamily::Transformer => ScoreConfig::Raps {
                lambda: 0.1,
                k_reg: 2,
            },
        }
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            ScoreConfig::Thr => Orientation::HigherIsConforming,
            ScoreConfig::Aps | ScoreConfig::Raps { .. } => Orientation::LowerIsConforming,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreConfig::Thr => "THR",
            ScoreConfig::Aps => "APS",
            ScoreConfig::Raps { .. } => "RAPS",
        }
    }

    /// Checks parameters against a class count.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let ScoreConfig::Raps { lambda, k_reg } = *self {
            ScoreConfig::raps(lambda, k_reg)?;
            if k_reg > num_classes {
                return Err(CpError::config(format!(
                    "RAPS k_reg = {k_reg} exceeds the class count {num_classes}"
                )));
            }
        }
        Ok(())
    }

    /// Scores of every class for one example.
    pub fn score_row(&self, p: &ProbVector) -> Vec<f64> {
        match *self {
            ScoreConfig::Thr => p.as_slice().to_vec(),
            ScoreConfig::Aps => {
                let view = SortedProbView::new(p);
                (0..p.len()).map(|k| view.mass_through_rank(view.rank(k))).collect()
            }
            ScoreConfig::Raps { lambda, k_reg } => {
                let view = SortedProbView::new(p);
                (0..p.len())
                    .map(|k| {
                        let r = view.rank(k);
                        view.mass_through_rank(r) + rank_penalty(lambda, k_reg, r)
                    })
                    .collect()
            }
        }
    }

    /// Score of class `y` for one example.
    pub fn score(&self, p: &ProbVector, y: usize) -> Result<Score> {
        match *self {
            ScoreConfig::Thr => thr_score(p, y),
            ScoreConfig::Aps => aps_score(p, y),
            ScoreConfig::Raps { .. } => raps_score(p, y, self),
        }
    }
}

fn rank_penalty(lambda: f64, k_reg: usize, rank: usize) -> f64 {
    lambda * rank.saturating_sub(k_reg) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub orientation: Orientation,
}

fn check_class(p: &ProbVector, y: usize) -> Result<()> {
    if y >= p.len() {
        return Err(CpError::ClassOutOfRange {
            index: y,
            num_classes: p.len(),
        });
    }
    Ok(())
}

/// `p[y]`, higher is more conforming.
pub fn thr_score(p: &ProbVector, y: usize) -> Result<Score> {
    check_class(p, y)?;
    Ok(Score {
        value: p.as_slice()[y],
        orientation: Orientation::HigherIsConforming,
    })
}

/// Sorted probability mass through the rank of `y`, lower is more conforming.
pub fn aps_score(p: &ProbVector, y: usize) -> Result<Score> {
    check_class(p, y)?;
    let view = SortedProbView::new(p);
    Ok(Score {
        value: view.mass_through_rank(view.rank(y)),
        orientation: Orientation::LowerIsConforming,
    })
}

/// APS score plus `lambda * (rank(y) - k_reg)^+`.
pub fn raps_score(p: &ProbVector, y: usize, cfg: &ScoreConfig) -> Result<Score> {
    let ScoreConfig::Raps { lambda, k_reg } = *cfg else {
        return Err(CpError::config(format!(
            "raps_score needs a RAPS config with lambda and k_reg, got {}",
            cfg.name()
        )));
    };
    cfg.validate(p.len())?;
    check_class(p, y)?;
    let view = SortedProbView::new(p);
    let r = view.rank(y);
    Ok(Score {
        value: view.mass_through_rank(r) + rank_penalty(lambda, k_reg, r),
        orientation: Orientation::LowerIsConforming,
    })
}

/// Row-major `N x K` score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub num_classes: usize,
    pub orientation: Orientation,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn len(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.num_classes + k]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            num_classes: self.num_classes,
            orientation: self.orientation,
            values: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }

    /// Score of each row at the class given by `labels`.
    pub fn at_labels(&self, labels: &[usize]) -> Vec<f64> {
        labels.iter().enumerate().map(|(i, &y)| self.get(i, y)).collect()
    }
}

/// Applies the configured score to every (example, class) pair.
pub fn score_matrix(records: &LogitRecordSet, cfg: &ScoreConfig) -> Result<ScoreMatrix> {
    let k = records.num_classes();
    cfg.validate(k)?;
    let rows = crate::par::try_map_indexed(records.len(), |i| {
        let p = softmax(records.row(i)).map_err(|e| e.at_row(i))?;
        Ok(cfg.score_row(&p))
    })?;
    Ok(ScoreMatrix {
        num_classes: k,
        orientation: cfg.orientation(),
        values: rows.concat(),
    })
}
