//! Conformal training: conformal prediction simulated inside each training
//! batch with a smooth quantile and sigmoid set membership, so expected set
//! size becomes a differentiable loss.
//!
//! Training uses THR scores only. After training, ordinary post-hoc
//! calibration applies to the model's logits.

mod model;
mod softsort;
mod task;

pub use model::{Activation, TinyClassifier, Trace};
pub use softsort::{smooth_quantile, soft_sort, Regularization, SoftSort};
pub use task::{compare, ArmReport, Comparison, ComparisonConfig, ComparisonReport, MixtureTask, TaskData};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};
use crate::records::LogitRecordSet;
use crate::rng::stream;
use crate::scores::Orientation;
use crate::synthetic::LabeledFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothCpConfig {
    /// In `(0, 1]`.
    pub temperature: f64,
    /// 0 or 1: set sizes up to `kappa` are free.
    pub kappa: u8,
    pub size_weight: f64,
    pub alpha: f64,
    pub batch_split_fraction: f64,
    pub dispersion: f64,
    pub regularization: Regularization,
}

impl Default for SmoothCpConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            kappa: 1,
            size_weight: 0.01,
            alpha: 0.01,
            batch_split_fraction: 0.5,
            dispersion: 0.1,
            regularization: Regularization::Entropic,
        }
    }
}

impl SmoothCpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(CpError::config(format!("temperature must lie in (0, 1], got {}", self.temperature)));
        }
        if self.kappa > 1 {
            return Err(CpError::config(format!("kappa must be 0 or 1, got {}", self.kappa)));
        }
        if !(self.size_weight >= 0.0 && self.size_weight.is_finite()) {
            return Err(CpError::config(format!("size weight must be >= 0, got {}", self.size_weight)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CpError::config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.batch_split_fraction > 0.0 && self.batch_split_fraction < 1.0) {
            return Err(CpError::config(format!(
                "batch split fraction must lie in (0, 1), got {}",
                self.batch_split_fraction
            )));
        }
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return Err(CpError::config(format!("dispersion must be positive, got {}", self.dispersion)));
        }
        Ok(())
    }

    /// THR quantile level for a calibration half of size `n`.
    pub fn quantile_level(&self, n: usize) -> f64 {
        self.alpha * (1.0 + 1.0 / n as f64)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft membership in `(0, 1)`; more conforming scores give larger values.
pub fn smooth_assignment(score: f64, tau: f64, temperature: f64, orientation: Orientation) -> f64 {
    let margin = match orientation {
        Orientation::HigherIsConforming => score - tau,
        Orientation::LowerIsConforming => tau - score,
    };
    sigmoid(margin / temperature)
}

/// `max(0, Σ E - κ)`.
pub fn size_loss(memberships: &[f64], kappa: u8) -> f64 {
    (memberships.iter().sum::<f64>() - kappa as f64).max(0.0)
}

/// `1 - E_y`.
pub fn class_loss(memberships: &[f64], label: usize) -> f64 {
    1.0 - memberships[label]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainObjective {
    CrossEntropy,
    #[default]
    ConfTr,
}

/// Loss and its gradient with respect to the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Smooth threshold from the calibration half; absent for cross-entropy.
    pub tau: Option<f64>,
}

fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `d/d logits` given `d/d p` through the softmax.
fn softmax_backward(p: &[f64], d_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(d_p).map(|(a, b)| a * b).sum();
    p.iter().zip(d_p).map(|(pi, gi)| pi * (gi - dot)).collect()
}

fn check_batch(model: &TinyClassifier, data: &LabeledFeatures, indices: &[&[usize]]) -> Result<()> {
    if data.dim != model.input_dim() || data.num_classes != model.num_classes() {
        return Err(CpError::Shape {
            expected: format!("{} features, {} classes", model.input_dim(), model.num_classes()),
            actual: format!("{} features, {} classes", data.dim, data.num_classes),
        });
    }
    for part in indices {
        if let Some(&i) = part.iter().find(|&&i| i >= data.len()) {
            return Err(CpError::config(format!("batch index {i} out of range for {} examples", data.len())));
        }
    }
    Ok(())
}

/// Mean cross-entropy over `batch`.
pub fn cross_entropy_step(model: &TinyClassifier, data: &LabeledFeatures, batch: &[usize]) -> Result<StepOutput> {
    check_batch(model, data, &[batch])?;
    if batch.is_empty() {
        return Err(CpError::config("empty batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for &i in batch {
        let trace = model.forward(data.row(i))?;
        let logits = trace.logits();
        let p = softmax_f64(logits);
        let y = data.labels[i];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += (lse - logits[y]) * inv;
        let d: Vec<f64> = p.iter().enumerate().map(|(k, pk)| (pk - (k == y) as u8 as f64) * inv).collect();
        model.backward(&trace, &d, &mut grad);
    }
    Ok(StepOutput { loss, grad, tau: None })
}

/// One conformal-training loss evaluation with an explicit split: the smooth
/// THR threshold comes from `cal`, the loss is averaged over `pred`.
pub fn conftr_step(
    model: &TinyClassifier,
    data: &LabeledFeatures,
    cal: &[usize],
    pred: &[usize],
    cfg: &SmoothCpConfig,
) -> Result<StepOutput> {
    cfg.validate()?;
    check_batch(model, data, &[cal, pred])?;
    if cal.len() < 2 || pred.is_empty() {
        return Err(CpError::config(format!(
            "batch too small: need >= 2 calibration and >= 1 prediction examples, got {} and {}",
            cal.len(),
            pred.len()
        )));
    }
    let k = model.num_classes();

    let cal_traces: Vec<Trace> = cal.iter().map(|&i| model.forward(data.row(i))).collect::<Result<_>>()?;
    let cal_probs: Vec<Vec<f64>> = cal_traces.iter().map(|t| softmax_f64(t.logits())).collect();
    let cal_scores: Vec<f64> = cal_probs.iter().zip(cal).map(|(p, &i)| p[data.labels[i]]).collect();
    let level = cfg.quantile_level(cal.len());
    let (tau, d_tau_d_scores) = smooth_quantile(&cal_scores, level, cfg.dispersion, cfg.regularization)?;

    let inv = 1.0 / pred.len() as f64;
    let t = cfg.temperature;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    let mut d_tau = 0.0;
    for &i in pred {
        let trace = model.forward(data.row(i))?;
        let p = softmax_f64(trace.logits());
        let y = data.labels[i];
        let e: Vec<f64> = p
            .iter()
            .map(|&s| smooth_assignment(s, tau, t, Orientation::HigherIsConforming))
            .collect();
        let size = size_loss(&e, cfg.kappa);
        loss += inv * (class_loss(&e, y) + cfg.size_weight * size);
        // hinge is flat at the kink
        let size_active = e.iter().sum::<f64>() > cfg.kappa as f64;
        let d_p: Vec<f64> = (0..k)
            .map(|c| {
                let mut d_e = if size_active { cfg.size_weight } else { 0.0 };
                if c == y {
                    d_e -= 1.0;
                }
                inv * d_e * e[c] * (1.0 - e[c]) / t
            })
            .collect();
        d_tau -= d_p.iter().sum::<f64>();
        model.backward(&trace, &softmax_backward(&p, &d_p), &mut grad);
    }

    for (j, (&i, trace)) in cal.iter().zip(&cal_traces).enumerate() {
        let g = d_tau * d_tau_d_scores[j];
        if g == 0.0 {
            continue;
        }
        let mut d_p = vec![0.0; k];
        d_p[data.labels[i]] = g;
        model.backward(trace, &softmax_backward(&cal_probs[j], &d_p), &mut grad);
    }
    Ok(StepOutput {
        loss,
        grad,
        tau: Some(tau),
    })
}

/// Splits `batch` at `round(fraction * len)` into calibration and
/// prediction parts, in the given order.
pub fn split_batch<'a>(batch: &'a [usize], cfg: &SmoothCpConfig) -> (&'a [usize], &'a [usize]) {
    let at = ((cfg.batch_split_fraction * batch.len() as f64).round() as usize).min(batch.len());
    batch.split_at(at)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: TrainObjective,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub smooth: SmoothCpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: TrainObjective::ConfTr,
            epochs: 20,
            batch_size: 500,
            learning_rate: 0.05,
            seed: 0,
            smooth: SmoothCpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TinyClassifier,
    /// Loss of every step, in order.
    pub trajectory: Vec<f64>,
}

/// Plain SGD with a fixed step. Each epoch reshuffles the data and drops
/// the final partial batch; each batch is split into calibration and
/// prediction halves for the conformal objective.
pub fn train(data: &LabeledFeatures, mut model: TinyClassifier, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.smooth.validate()?;
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(CpError::config(format!("learning rate must be positive, got {}", cfg.learning_rate)));
    }
    if cfg.batch_size == 0 || cfg.batch_size > data.len() {
        return Err(CpError::config(format!(
            "batch size {} must lie in [1, {}]",
            cfg.batch_size,
            data.len()
        )));
    }
    let mut rng = stream(cfg.seed, "conftr/shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trajectory = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(cfg.batch_size) {
            let step = match cfg.objective {
                TrainObjective::CrossEntropy => cross_entropy_step(&model, data, batch)?,
                TrainObjective::ConfTr => {
                    let (cal, pred) = split_batch(batch, &cfg.smooth);
                    conftr_step(&model, data, cal, pred, &cfg.smooth)?
                }
            };
            trajectory.push(step.loss);
            if !step.loss.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
                return Err(CpError::Diverged {
                    step: trajectory.len() - 1,
                    loss: step.loss,
                    trajectory,
                });
            }
            for (w, g) in model.params_mut().iter_mut().zip(&step.grad) {
                *w -= cfg.learning_rate * g;
            }
        }
    }
    Ok(TrainOutcome { model, trajectory })
}

/// Runs the classifier over `data` and packages its logits for post-hoc
/// calibration.
pub fn predict_logits(model: &TinyClassifier, data: &LabeledFeatures) -> Result<LogitRecordSet> {
    check_batch(model, data, &[])?;
    let mut logits = Vec::with_capacity(data.len() * model.num_classes());
    for i in 0..data.len() {
        logits.extend(model.logits(data.row(i))?.into_iter().map(|v| v as f32));
    }
    LogitRecordSet::new(model.num_classes(), data.labels.clone(), logits)
}
