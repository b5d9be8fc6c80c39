//! Training configuration, read from TOML.
//!
//! ```toml
//! phase = "mse_pretrain"          # or "perceptual_finetune"
//! epochs = 8
//! batch_size = 4
//! base_lr = 1e-4
//! lr_schedule = "cosine"          # or "constant"
//! crop_size = 128
//! seed = 0
//! rate_target = 0.3               # bpp
//! lambda_mse = 436.0              # pretraining distortion weight
//! pretrain_rate_control = "fixed" # R + lambda_mse * MSE; "multiplexer" uses lambda(R)
//! init_checkpoint = "runs/pre/final.safetensors"  # finetuning start
//!
//! [loss]
//! lambda_perc = 1.0
//! lambda_alpha = 4.0
//! lambda_beta = 1.0
//! ```
//!
//! Omitted fields take the defaults of [`TrainConfig::default`]. The
//! reference full-scale schedule is batch 128, base rate 8e-4, cosine
//! annealing, 500 epochs on 8000 images; the defaults here are desk-sized.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::losses::{Activation, LossWeights};
use crate::training::optim::LrSchedule;
use crate::transforms::{CodecConfig, PAD_MULTIPLE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    MsePretrain,
    PerceptualFinetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MsePretrain => "mse_pretrain",
            Self::PerceptualFinetune => "perceptual_finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateControl {
    /// Rate weight 1.
    Fixed,
    /// Rate weight from the lambda multiplexer around `rate_target`.
    Multiplexer,
}

/// Named rate targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Q075,
    Q150,
    Q300,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "q075" => Some(Self::Q075),
            "q150" => Some(Self::Q150),
            "q300" => Some(Self::Q300),
            _ => None,
        }
    }

    pub fn rate_target(self) -> f64 {
        match self {
            Self::Q075 => 0.075,
            Self::Q150 => 0.15,
            Self::Q300 => 0.30,
        }
    }

    /// Pretraining distortion weight on the `[0, 1]` MSE scale.
    pub fn lambda_mse(self) -> f64 {
        let l = match self {
            Self::Q075 => 0.0018,
            Self::Q150 => 0.0035,
            Self::Q300 => 0.0067,
        };
        l * 255.0 * 255.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Discriminator learning rate; the codec's when absent.
    pub disc_lr: Option<f64>,
    pub lr_schedule: LrSchedule,
    pub crop_size: usize,
    pub seed: u64,
    pub rate_target: f64,
    pub lambda_mse: f64,
    pub pretrain_rate_control: RateControl,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Save every this many steps; 0 saves only the initial and final states.
    pub checkpoint_every: usize,
    pub init_checkpoint: Option<PathBuf>,
    pub feature_seed: u64,
    pub feature_activation: Activation,
    pub feature_weights: Option<PathBuf>,
    pub codec: CodecConfig,
    /// `latent_channels` is taken from the codec.
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let codec = CodecConfig::toy();
        Self {
            phase: Phase::MsePretrain,
            epochs: 8,
            batch_size: 4,
            base_lr: 1e-4,
            disc_lr: None,
            lr_schedule: LrSchedule::Cosine,
            crop_size: 128,
            seed: 0,
            rate_target: Preset::Q300.rate_target(),
            lambda_mse: Preset::Q300.lambda_mse(),
            pretrain_rate_control: RateControl::Fixed,
            grad_clip: 1.0,
            checkpoint_every: 0,
            init_checkpoint: None,
            feature_seed: 0,
            feature_activation: Activation::Silu,
            feature_weights: None,
            discriminator: DiscriminatorConfig::toy(codec.latent_channels),
            codec,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        Ok(cfg.normalized())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Apply a named rate target and its pretraining weight.
    pub fn with_preset(mut self, preset: Preset) -> Self {
        self.rate_target = preset.rate_target();
        self.lambda_mse = preset.lambda_mse();
        self.loss.rate_target = self.rate_target;
        self
    }

    /// Propagate shared fields into the nested configs.
    pub fn normalized(mut self) -> Self {
        self.loss.rate_target = self.rate_target;
        self.discriminator.latent_channels = self.codec.latent_channels;
        self
    }

    // `!(x > 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Usage(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.base_lr > 0.0) || self.disc_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.crop_size == 0 || self.crop_size % PAD_MULTIPLE != 0 {
            return Err(Error::Usage(format!("crop_size must be a positive multiple of {PAD_MULTIPLE}")));
        }
        if !(self.rate_target > 0.0) || !(self.lambda_mse >= 0.0) {
            return bad("rate_target must be positive and lambda_mse non-negative");
        }
        self.codec.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.clone().normalized().to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
