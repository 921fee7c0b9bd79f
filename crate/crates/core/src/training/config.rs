use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{DiscriminatorConfig, GeneratorConfig};
use crate::tensor::{AdamConfig, Precision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
    /// Paired-only training for the baseline epoch budget.
    Baseline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Baseline => "baseline",
        }
    }
}

/// Every training hyperparameter, serialized in full as the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub baseline_epochs: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub volume_side: usize,
    pub precision: Precision,
    pub include_lsgan_on_unpaired: bool,
    pub validation_fraction: f64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            pretrain_epochs: 30,
            finetune_epochs: 10,
            baseline_epochs: 40,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            seed: 0,
            volume_side: 32,
            precision: Precision::F32,
            include_lsgan_on_unpaired: false,
            validation_fraction: 0.1,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Default config with every model sized for `side`.
    pub fn with_side(side: usize) -> Self {
        let mut c = Self::default();
        c.set_side(side);
        c
    }

    pub fn set_side(&mut self, side: usize) {
        self.volume_side = side;
        self.generator.side = side;
        self.discriminator.side = side;
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.generator.side != self.volume_side || self.discriminator.side != self.volume_side {
            return Err(Error::Config(format!(
                "model sides (generator {}, discriminator {}) must equal volume_side {}",
                self.generator.side, self.discriminator.side, self.volume_side
            )));
        }
        self.generator.validate()?;
        self.discriminator.validate()
    }

    pub fn epochs_for(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_epochs,
            Stage::Finetune => self.finetune_epochs,
            Stage::Baseline => self.baseline_epochs,
        }
    }

    pub(crate) fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
        }
    }
}
