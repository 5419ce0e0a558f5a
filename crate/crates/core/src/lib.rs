//! Conformal prediction for classifiers: THR, APS and RAPS prediction sets,
//! marginal and class-balanced calibration, coverage / inefficiency metrics,
//! synthetic data with controllable shift and label imbalance, and a small
//! conformal-training module.
//!
//! Typical flow:
//!
//! ```
//! use cpbench_core::{calibration, metrics, prediction, scores::ScoreConfig, synthetic};
//!
//! let world = synthetic::OracleWorld::generate(10, 8, 1.0, 1.0, 7).unwrap();
//! let prior = synthetic::LabelPrior::uniform(10);
//! let records = synthetic::sample_records(&world, &prior, 2000, &synthetic::ShiftSpec::NONE).unwrap();
//! let (cal, test) = synthetic::split(&records, 0.5, 1).unwrap();
//!
//! let cal_set = calibration::CalibrationSet::from_records(&cal, ScoreConfig::Aps).unwrap();
//! let model = calibration::calibrate_marginal(&cal_set, 0.1).unwrap();
//! let sets = prediction::predict_batch(&test, &model).unwrap();
//! let cover = metrics::coverage(&sets, test.labels()).unwrap();
//! assert!(cover > 0.8);
//! ```

pub mod calibration;
pub mod conftr;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
mod par;
pub mod prediction;
pub mod records;
pub mod rng;
pub mod scores;
pub mod synthetic;

pub use calibration::{CalibratedModel, CalibrationSet, Threshold};
pub use error::{CpError, Result};
pub use prediction::PredictionSet;
pub use records::{LogitRecordSet, RecordMetadata};
pub use scores::{Orientation, ProbVector, ScoreConfig};
