//! Paired baseline-vs-conformal-training comparison on a Gaussian mixture.

use serde::{Deserialize, Serialize};

use super::{predict_logits, train, TinyClassifier, TrainConfig, TrainObjective};
use crate::calibration::{calibrate_marginal, CalibrationSet};
use crate::error::Result;
use crate::metrics::{accuracy, coverage, inefficiency};
use crate::prediction::predict_batch;
use crate::scores::ScoreConfig;
use crate::synthetic::{sample_features, LabelPrior, LabeledFeatures, OracleWorld, ShiftSpec};

/// Heteroscedastic classes make a linear softmax model misspecified, so
/// cross-entropy training does not already minimize set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureTask {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub class_scales: Vec<f64>,
    /// Hidden layer widths; empty means a linear model.
    pub hidden: Vec<usize>,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
}

impl Default for MixtureTask {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 2,
            separation: 2.5,
            class_scales: vec![0.3, 0.6, 1.5, 2.5],
            hidden: Vec::new(),
            n_train: 5000,
            n_cal: 5000,
            n_test: 10_000,
        }
    }
}

pub struct TaskData {
    pub world: OracleWorld,
    pub train: LabeledFeatures,
    pub cal: LabeledFeatures,
    pub test: LabeledFeatures,
}

impl MixtureTask {
    pub fn model_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.dim];
        dims.extend(&self.hidden);
        dims.push(self.num_classes);
        dims
    }

    /// World and the three sample sets, all determined by `seed`.
    pub fn generate(&self, seed: u64) -> Result<TaskData> {
        let world = OracleWorld::generate(self.num_classes, self.dim, self.separation, 1.0, seed)?
            .with_class_scales(self.class_scales.clone())?;
        let prior = LabelPrior::uniform(self.num_classes);
        let base = seed.wrapping_mul(4);
        let draw = |offset: u64, n: usize| sample_features(&world.reseeded(base.wrapping_add(offset)), &prior, n, &ShiftSpec::NONE);
        Ok(TaskData {
            train: draw(1, self.n_train)?,
            cal: draw(2, self.n_cal)?,
            test: draw(3, self.n_test)?,
            world,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub task: MixtureTask,
    /// Cross-entropy pretraining shared by both arms.
    pub pretrain: TrainConfig,
    /// Second phase: the baseline continues with cross-entropy, the other
    /// arm switches to the conformal objective. `objective` is ignored.
    pub finetune: TrainConfig,
    /// Post-hoc THR level.
    pub alpha: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        let mut finetune = TrainConfig {
            objective: TrainObjective::ConfTr,
            epochs: 20,
            batch_size: 500,
            learning_rate: 0.1,
            ..Default::default()
        };
        finetune.smooth.size_weight = 0.1;
        finetune.smooth.temperature = 0.02;
        Self {
            task: MixtureTask::default(),
            pretrain: TrainConfig {
                objective: TrainObjective::CrossEntropy,
                epochs: 100,
                batch_size: 500,
                learning_rate: 0.5,
                ..Default::default()
            },
            finetune,
            alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub accuracy: f64,
    pub coverage: f64,
    pub inefficiency: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub alpha: f64,
    pub score: String,
    pub baseline: ArmReport,
    pub conftr: ArmReport,
}

pub struct Comparison {
    pub report: ComparisonReport,
    pub baseline: TinyClassifier,
    pub conftr: TinyClassifier,
}

fn evaluate_arm(model: &TinyClassifier, data: &TaskData, alpha: f64, final_loss: f64) -> Result<ArmReport> {
    let cal = predict_logits(model, &data.cal)?;
    let test = predict_logits(model, &data.test)?;
    let calibrated = calibrate_marginal(&CalibrationSet::from_records(&cal, ScoreConfig::Thr)?, alpha)?;
    let sets = predict_batch(&test, &calibrated)?;
    Ok(ArmReport {
        accuracy: accuracy(&test),
        coverage: coverage(&sets, test.labels())?,
        inefficiency: inefficiency(&sets),
        final_loss,
    })
}

/// Trains both arms from the same seeded initialization and reports
/// post-hoc THR metrics on held-out data.
pub fn compare(cfg: &ComparisonConfig, seed: u64) -> Result<Comparison> {
    let data = cfg.task.generate(seed)?;
    let init = TinyClassifier::new(&cfg.task.model_dims(), seed)?;
    let pretrain = TrainConfig {
        objective: TrainObjective::CrossEntropy,
        seed,
        ..cfg.pretrain.clone()
    };
    let warm = train(&data.train, init, &pretrain)?.model;

    let arm = |objective| {
        let phase = TrainConfig {
            objective,
            seed: seed.wrapping_add(1),
            ..cfg.finetune.clone()
        };
        train(&data.train, warm.clone(), &phase)
    };
    let base = arm(TrainObjective::CrossEntropy)?;
    let conf = arm(TrainObjective::ConfTr)?;
    let last = |t: &[f64]| t.last().copied().unwrap_or(f64::NAN);
    let report = ComparisonReport {
        seed,
        alpha: cfg.alpha,
        score: "thr".into(),
        baseline: evaluate_arm(&base.model, &data, cfg.alpha, last(&base.trajectory))?,
        conftr: evaluate_arm(&conf.model, &data, cfg.alpha, last(&conf.trajectory))?,
    };
    Ok(Comparison {
        report,
        baseline: base.model,
        conftr: conf.model,
    })
}
