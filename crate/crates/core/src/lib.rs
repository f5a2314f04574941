//! Seed-stability analysis of pre-training runs: parameter statistics from
//! checkpoint dumps, HMM training maps, outlier and fork detection,
//! map-to-performance regression, agreement, probing and representation
//! shift metrics, plus a synthetic-run generator with known ground truth.

pub mod agreement;
pub mod cartography;
pub mod error;
pub mod hmm;
pub mod paramstats;
pub mod probe;
pub mod stability;
pub mod synthlab;
pub mod tensorstore;

pub use agreement::{AgreementResult, LogHeader, PredictionItem, PredictionLog};
pub use cartography::{StandardizationMode, StandardizedEnsemble, TrainingMap};
pub use error::{Error, Result};
pub use hmm::{FitConfig, FitReport, HmmModel, Sequence};
pub use paramstats::{StatConfig, StatSeries, StatVector, FEATURE_NAMES, NUM_FEATURES};
pub use probe::{CodelengthReport, CorrelationSummary, Prior, ProbeDataset, ProbeItem, ProbeModel, TrainConfig};
pub use stability::{AccuracyTable, BagOfStates, RegressionResult, ZScoreTable};
pub use synthlab::{RegimeScript, SynthLogConfig, SynthTaskConfig};
pub use tensorstore::{CheckpointRef, RunManifest, TensorKind, TensorRecord};
