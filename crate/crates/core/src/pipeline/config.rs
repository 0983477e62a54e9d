//! Training configuration, read from a single JSON document. Every field has
//! a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aspp::DilationSchedule;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::par::ParParams;
use crate::pipeline::data::DatasetSpec;
use crate::pipeline::model::ModelConfig;
use crate::vit::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    pub par: ParParams,
    pub loss_weights: LossWeights,
    /// CAM share in the CAM/teacher mask fusion.
    pub beta: f64,
    /// CAM activation below which a pixel is background (class 0).
    pub background_threshold: f64,
    pub ema_momentum: f64,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub schedule: DilationSchedule,
    /// Average the ASPP-refined attention with the original weights.
    pub aspp_residual: bool,
    pub aspp_on: bool,
    pub par_on: bool,
    /// When false only the cross-entropy term is optimized.
    pub losses_on: bool,
    /// Train against the one-hot argmax of the refined pseudo label.
    pub hard_labels: bool,
    /// Horizontally flip the student's view of every other image.
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            num_classes: 2,
            par: ParParams::default(),
            loss_weights: LossWeights::default(),
            beta: 0.5,
            background_threshold: 0.5,
            ema_momentum: 0.99,
            learning_rate: 0.005,
            sgd_momentum: 0.9,
            steps: 200,
            batch_size: 8,
            seed: 0,
            dataset: DatasetSpec::default(),
            schedule: DilationSchedule::default(),
            aspp_residual: true,
            aspp_on: true,
            par_on: true,
            losses_on: true,
            hard_labels: true,
            flip_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.clone(), num_classes: self.num_classes }
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset.n_images.div_ceil(self.batch_size) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model_config().validate()?;
        self.par.validate()?;
        self.loss_weights.validate()?;
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.background_threshold > 0.0 && self.background_threshold < 1.0) {
            return bad(format!("background_threshold must lie in (0, 1), got {}", self.background_threshold));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1), got {}", self.ema_momentum));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!("sgd_momentum must lie in [0, 1), got {}", self.sgd_momentum));
        }
        if self.batch_size == 0 || self.dataset.n_images == 0 {
            return bad("batch_size and dataset.n_images must be positive".into());
        }
        let d = &self.dataset;
        if d.height != self.encoder.image_size || d.width != self.encoder.image_size {
            return bad(format!(
                "dataset images are {}x{} but the encoder expects {}x{}",
                d.height, d.width, self.encoder.image_size, self.encoder.image_size
            ));
        }
        Ok(())
    }
}
