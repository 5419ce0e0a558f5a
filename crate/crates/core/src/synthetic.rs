//! Synthetic logits with known ground truth.
//!
//! Features come from an isotropic Gaussian mixture whose parameters are
//! known, so the emitted logits are exact log-posteriors. Shifts perturb how
//! features (or labels) are drawn while the logits keep using the unshifted
//! mixture, the same way a fixed classifier meets shifted test data.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};
use crate::records::{LogitRecordSet, RecordMetadata};
use crate::rng::stream;

/// Per-level shift magnitudes. Severity enters linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftConstants {
    /// FeatureNoise: noise std is multiplied by `1 + noise_per_level * severity`.
    pub noise_per_level: f64,
    /// MeanDrift: class `k`'s mean moves toward class `(k + 1) % K`'s mean by
    /// `drift_per_level * severity * noise_scale`.
    pub drift_per_level: f64,
    /// MeanDrift: noise std is multiplied by `1 + spread_per_level * severity`.
    pub spread_per_level: f64,
    /// LabelPriorShift: sampling weights are tilted by
    /// `exp(prior_tilt_per_level * severity * (k / (K - 1) - 1/2))`.
    pub prior_tilt_per_level: f64,
}

impl Default for ShiftConstants {
    fn default() -> Self {
        Self {
            noise_per_level: 0.15,
            drift_per_level: 0.2,
            spread_per_level: 0.12,
            prior_tilt_per_level: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    FeatureNoise,
    MeanDrift,
    LabelPriorShift,
}

impl ShiftKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::FeatureNoise => "feature_noise",
            ShiftKind::MeanDrift => "mean_drift",
            ShiftKind::LabelPriorShift => "label_prior_shift",
        }
    }
}

/// A shift of a given kind at severity in `[0, 5]`; severity 0 is no shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: f64,
}

impl ShiftSpec {
    pub const NONE: ShiftSpec = ShiftSpec {
        kind: ShiftKind::FeatureNoise,
        severity: 0.0,
    };

    pub fn new(kind: ShiftKind, severity: f64) -> Result<Self> {
        if !(0.0..=5.0).contains(&severity) {
            return Err(CpError::config(format!("shift severity {severity} outside [0, 5]")));
        }
        Ok(Self { kind, severity })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorFamily {
    Uniform,
    Zipf { s: f64 },
    Custom,
}

/// Class prior used both to sample labels and inside the oracle posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    weights: Vec<f64>,
    family: PriorFamily,
}

impl LabelPrior {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0 / num_classes as f64; num_classes],
            family: PriorFamily::Uniform,
        }
    }

    /// Weights proportional to `rank^(-s)` with class 0 at rank 1.
    pub fn zipf(num_classes: usize, s: f64) -> Result<Self> {
        if !(s.is_finite() && s >= 0.0) {
            return Err(CpError::config(format!("Zipf exponent must be finite and >= 0, got {s}")));
        }
        let raw: Vec<f64> = (1..=num_classes).map(|r| (r as f64).powf(-s)).collect();
        let mut prior = Self::custom(raw)?;
        prior.family = PriorFamily::Zipf { s };
        Ok(prior)
    }

    /// Normalizes non-negative weights.
    pub fn custom(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(CpError::config("prior weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(CpError::config("prior weights are all zero"));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            family: PriorFamily::Custom,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn tilted(&self, amount: f64) -> Result<Self> {
        let k = self.weights.len();
        let w = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * (amount * (i as f64 / (k - 1) as f64 - 0.5)).exp())
            .collect();
        Self::custom(w)
    }
}

/// Gaussian mixture with known means; class `k` has isotropic std
/// `noise_scale * class_scales[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleWorld {
    class_means: Vec<Vec<f64>>,
    noise_scale: f64,
    class_scales: Vec<f64>,
    seed: u64,
    pub shift: ShiftConstants,
}

impl OracleWorld {
    /// Means drawn i.i.d. `N(0, separation^2 I)` from the `seed` stream.
    pub fn generate(num_classes: usize, dim: usize, separation: f64, noise_scale: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(CpError::config("feature dimension must be positive"));
        }
        let mut rng = stream(seed, "world/means");
        let means = (0..num_classes)
            .map(|_| {
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        separation * z
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        Self::from_means(means, noise_scale, seed)
    }

    pub fn from_means(class_means: Vec<Vec<f64>>, noise_scale: f64, seed: u64) -> Result<Self> {
        if class_means.len() < 2 {
            return Err(CpError::config("need at least 2 classes"));
        }
        let dim = class_means[0].len();
        if dim == 0 || class_means.iter().any(|m| m.len() != dim) {
            return Err(CpError::config("class means must share a positive dimension"));
        }
        if !(noise_scale.is_finite() && noise_scale > 0.0) {
            return Err(CpError::config(format!("noise scale must be positive, got {noise_scale}")));
        }
        Ok(Self {
            class_scales: vec![1.0; class_means.len()],
            class_means,
            noise_scale,
            seed,
            shift: ShiftConstants::default(),
        })
    }

    /// Per-class multipliers on the noise std.
    pub fn with_class_scales(mut self, scales: Vec<f64>) -> Result<Self> {
        if scales.len() != self.num_classes() {
            return Err(CpError::Shape {
                expected: format!("{} class scales", self.num_classes()),
                actual: format!("{} class scales", scales.len()),
            });
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(CpError::config("class scales must be positive"));
        }
        self.class_scales = scales;
        Ok(self)
    }

    pub fn class_scales(&self) -> &[f64] {
        &self.class_scales
    }

    /// Same mixture, different sampling seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn num_classes(&self) -> usize {
        self.class_means.len()
    }

    pub fn dim(&self) -> usize {
        self.class_means[0].len()
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unnormalized log-posterior of every class at `x` under the unshifted mixture.
    pub fn log_posterior(&self, x: &[f64], prior: &LabelPrior) -> Vec<f64> {
        let dim = self.dim() as f64;
        self.class_means
            .iter()
            .zip(prior.weights())
            .zip(&self.class_scales)
            .map(|((mu, &w), &s)| {
                let sigma = self.noise_scale * s;
                let d2: f64 = mu.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
                w.ln() - dim * s.ln() - d2 / (2.0 * sigma * sigma)
            })
            .collect()
    }

    fn shifted_means(&self, shift: &ShiftSpec) -> Vec<Vec<f64>> {
        if shift.kind != ShiftKind::MeanDrift || shift.severity == 0.0 {
            return self.class_means.clone();
        }
        let step = self.shift.drift_per_level * shift.severity * self.noise_scale;
        let k = self.class_means.len();
        self.class_means
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let toward = &self.class_means[(i + 1) % k];
                let dist = toward.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if dist == 0.0 {
                    return m.clone();
                }
                m.iter().zip(toward).map(|(a, b)| a + step * (b - a) / dist).collect()
            })
            .collect()
    }
}

/// Raw features with labels, row-major `n × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub dim: usize,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            dim: self.dim,
            num_classes: self.num_classes,
            features: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Draws `n` labeled feature vectors from the (possibly shifted) mixture.
pub fn sample_features(world: &OracleWorld, prior: &LabelPrior, n: usize, shift: &ShiftSpec) -> Result<LabeledFeatures> {
    if n == 0 {
        return Err(CpError::config("need at least one record"));
    }
    let k = world.num_classes();
    if prior.len() != k {
        return Err(CpError::Shape {
            expected: format!("prior over {k} classes"),
            actual: format!("{} weights", prior.len()),
        });
    }
    ShiftSpec::new(shift.kind, shift.severity)?;

    let sampling_prior = match shift.kind {
        ShiftKind::LabelPriorShift if shift.severity > 0.0 => {
            prior.tilted(world.shift.prior_tilt_per_level * shift.severity)?
        }
        _ => prior.clone(),
    };
    let noise = match shift.kind {
        ShiftKind::FeatureNoise => world.noise_scale * (1.0 + world.shift.noise_per_level * shift.severity),
        ShiftKind::MeanDrift => world.noise_scale * (1.0 + world.shift.spread_per_level * shift.severity),
        _ => world.noise_scale,
    };
    let means = world.shifted_means(shift);

    // Every shift reuses the same draws so severities are directly comparable.
    let mut rng = stream(world.seed, &format!("records/{n}"));
    let label_dist = WeightedIndex::new(sampling_prior.weights()).map_err(|e| CpError::config(e.to_string()))?;

    let dim = world.dim();
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let y = label_dist.sample(&mut rng);
        let sigma = noise * world.class_scales[y];
        for mj in &means[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(mj + sigma * z);
        }
        labels.push(y);
    }
    Ok(LabeledFeatures {
        dim,
        num_classes: k,
        features,
        labels,
    })
}

/// Draws `n` labeled examples and emits their oracle logits.
pub fn sample_records(world: &OracleWorld, prior: &LabelPrior, n: usize, shift: &ShiftSpec) -> Result<LogitRecordSet> {
    let data = sample_features(world, prior, n, shift)?;
    let k = world.num_classes();
    let mut logits = Vec::with_capacity(n * k);
    for i in 0..n {
        let lp = world.log_posterior(data.row(i), prior);
        let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.extend(lp.iter().map(|v| (v - max) as f32));
    }
    let mut metadata = RecordMetadata {
        dataset: if shift.severity == 0.0 {
            "synthetic".to_string()
        } else {
            format!("synthetic-{}-{}", shift.kind.name(), shift.severity)
        },
        model: "gaussian-oracle".into(),
        ..Default::default()
    };
    metadata.tags.insert("seed".into(), world.seed.to_string());
    metadata.tags.insert("shift".into(), shift.kind.name().into());
    metadata.tags.insert("severity".into(), shift.severity.to_string());
    LogitRecordSet::with_metadata(k, data.labels, logits, metadata)
}

/// Uniform random partition of `0..n` into (first, second) with
/// `round(fraction * n)` indices in the first part, both ascending.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CpError::config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let first = (fraction * n as f64).round() as usize;
    if first == 0 || first == n {
        return Err(CpError::config(format!(
            "splitting {n} records at {fraction} leaves an empty part"
        )));
    }
    let mut rng = stream(seed, "split");
    let mut in_first = vec![false; n];
    for i in index::sample(&mut rng, n, first) {
        in_first[i] = true;
    }
    Ok((0..n).partition(|&i| in_first[i]))
}

/// Record-set form of [`split_indices`]; both parts keep the original order.
pub fn split(records: &LogitRecordSet, fraction: f64, seed: u64) -> Result<(LogitRecordSet, LogitRecordSet)> {
    let (a, b) = split_indices(records.len(), fraction, seed)?;
    Ok((records.select(&a), records.select(&b)))
}
