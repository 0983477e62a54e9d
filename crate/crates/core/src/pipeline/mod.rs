//! Training pipeline: synthetic data, the teacher-student loop, metrics and
//! file formats.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod netpbm;
pub mod train;

pub use config::TrainConfig;
pub use data::{synth_dataset, DatasetSpec, Sample};
pub use eval::{evaluate, hungarian_match, EvalReport};
pub use model::{ema_update, ModelConfig, ModelParams, ModelState};
pub use train::{train_step, StepMetrics, Trainer, CSV_HEADER};
