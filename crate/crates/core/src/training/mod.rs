//! Two-phase training: MSE pretraining, then perceptual finetuning with an
//! alternating discriminator.
//!
//! All randomness of step `t` (crop positions, quantisation noise) comes
//! from ChaCha streams derived from `(seed, t)`, and each epoch's image
//! order from `(seed, epoch)`, so a run resumed from a checkpoint continues
//! exactly as the uninterrupted run would.

pub mod config;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{Phase, Preset, RateControl, TrainConfig};
pub use crate::eval_io::dataset::Dataset;
pub use optim::{clip_grad_norm, Adam, LrSchedule};

use crate::adversary::{Discriminator, SpectralState};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::eval_io::dataset::permutation;
use crate::losses::{
    bce_adversarial_d, hinge_adversarial_d, lambda_multiplexer, mse, total_objective, AdversarialLoss,
    FeatureExtractor, LossReport,
};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

const STREAM_CROPS: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_INIT: u64 = 3;

fn stream_rng(seed: u64, index: u64, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4 * index + kind);
    rng
}

/// Progress stored in checkpoint metadata under `train_state`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Phase,
    pub step: u64,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub adam_codec_t: u64,
    pub adam_disc_t: u64,
}

/// Discriminator weights, power-iteration state and optimizer.
pub struct DiscState {
    pub net: Discriminator,
    pub params: ParamStore<f32>,
    pub sn: SpectralState,
    pub adam: Adam,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub codec: Codec,
    pub adam: Adam,
    pub disc: Option<DiscState>,
    pub features: FeatureExtractor,
    pub step: u64,
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

/// Optimizer steps per epoch: every image once, at least one batch.
pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> u64 {
    (dataset_len / batch_size).max(1) as u64
}

impl Trainer {
    /// Start a run. Finetuning loads the codec from `init_checkpoint` when
    /// given; otherwise the codec is initialised from the seed.
    pub fn new(cfg: TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        let cfg = cfg.normalized();
        cfg.validate()?;
        let codec = match &cfg.init_checkpoint {
            Some(path) => {
                let codec = Codec::load(path)?;
                if codec.cfg != cfg.codec {
                    return Err(Error::Checkpoint(format!(
                        "{} holds a different codec configuration",
                        path.display()
                    )));
                }
                codec
            }
            None => Codec::random(cfg.codec.clone(), cfg.seed)?,
        };
        let disc = match cfg.phase {
            Phase::MsePretrain => None,
            Phase::PerceptualFinetune => {
                let net = Discriminator::new(cfg.discriminator.clone())?;
                let (params, sn) = net.init(&mut stream_rng(cfg.seed, 0, STREAM_INIT));
                let adam = Adam::new(&params);
                Some(DiscState { net, params, sn, adam })
            }
        };
        Ok(Self {
            adam: Adam::new(&codec.params),
            features: load_features(&cfg)?,
            total_steps: steps_per_epoch * cfg.epochs as u64,
            steps_per_epoch,
            step: 0,
            codec,
            disc,
            cfg,
        })
    }

    /// Continue from a checkpoint written by [`Trainer::to_checkpoint`]
    /// under the same configuration.
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let cfg = cfg.normalized();
        cfg.validate()?;
        let hash = ck.meta("config_hash")?;
        if hash != cfg.hash() {
            return Err(Error::Checkpoint("checkpoint was written under a different training config".into()));
        }
        let state: TrainState = serde_json::from_str(ck.meta("train_state")?)
            .map_err(|e| Error::Checkpoint(format!("train_state: {e}")))?;
        let codec = Codec::from_checkpoint(ck)?;
        let adam = Adam::load(ck, "adam_codec", &codec.params, state.adam_codec_t)?;
        let disc = match cfg.phase {
            Phase::MsePretrain => None,
            Phase::PerceptualFinetune => {
                let net = Discriminator::new(cfg.discriminator.clone())?;
                let params = ck.tensors.subset("disc.");
                let sn = ck.tensors.subset("disc_sn.");
                let (fresh_p, fresh_sn) = net.init(&mut ChaCha8Rng::seed_from_u64(0));
                if !fresh_p.same_layout(&params) || !fresh_sn.same_layout(&sn) {
                    return Err(Error::Checkpoint("discriminator state does not match the config".into()));
                }
                let adam = Adam::load(ck, "adam_disc", &params, state.adam_disc_t)?;
                Some(DiscState { net, params, sn, adam })
            }
        };
        Ok(Self {
            features: load_features(&cfg)?,
            step: state.step,
            steps_per_epoch: state.steps_per_epoch,
            total_steps: state.total_steps,
            codec,
            adam,
            disc,
            cfg,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            phase: self.cfg.phase,
            step: self.step,
            total_steps: self.total_steps,
            steps_per_epoch: self.steps_per_epoch,
            adam_codec_t: self.adam.t,
            adam_disc_t: self.disc.as_ref().map_or(0, |d| d.adam.t),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.codec.store_into(&mut ck);
        self.adam.store_into(&mut ck, "adam_codec");
        if let Some(d) = &self.disc {
            ck.tensors.extend_prefixed("disc.", &d.params);
            ck.tensors.extend_prefixed("disc_sn.", &d.sn);
            d.adam.store_into(&mut ck, "adam_disc");
        }
        ck.metadata
            .insert("train_state".into(), serde_json::to_string(&self.state()).expect("state serialises"));
        ck.metadata.insert("config_hash".into(), self.cfg.hash());
        ck
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_schedule.at(self.cfg.base_lr, self.step, self.total_steps)
    }

    fn disc_lr(&self) -> f64 {
        let base = self.cfg.disc_lr.unwrap_or(self.cfg.base_lr);
        self.cfg.lr_schedule.at(base, self.step, self.total_steps)
    }

    /// The batch for the current step.
    pub fn batch(&self, data: &Dataset) -> Tensor<f32> {
        let b = self.cfg.batch_size;
        let epoch = self.step / self.steps_per_epoch;
        let within = (self.step % self.steps_per_epoch) as usize;
        let order = permutation(data.len(), &mut stream_rng(self.cfg.seed, epoch, STREAM_ORDER));
        let idx: Vec<usize> = (0..b).map(|i| order[(within * b + i) % order.len()]).collect();
        data.crops(&idx, self.cfg.crop_size, &mut stream_rng(self.cfg.seed, self.step, STREAM_CROPS))
    }

    /// One step of the configured phase on `batch` `[B, 3, H, W]`.
    pub fn train_step(&mut self, batch: &Tensor<f32>) -> Result<LossReport> {
        let report = match self.cfg.phase {
            Phase::MsePretrain => self.pretrain_step(batch)?,
            Phase::PerceptualFinetune => self.finetune_step(batch)?,
        };
        self.step += 1;
        Ok(report)
    }

    /// One Adam update of the codec on `lambda_r * R + lambda_mse * MSE`.
    /// Does not advance the step counter.
    pub fn pretrain_step(&mut self, batch: &Tensor<f32>) -> Result<LossReport> {
        let lr = self.lr();
        let g = Graph::new();
        let p = Bound::new(&g, &self.codec.params, true);
        let x = g.constant(batch.clone());
        let mut rng = stream_rng(self.cfg.seed, self.step, STREAM_NOISE);
        let out = self.codec.forward(&p, x, true, &mut rng)?;
        let rate = out.bpp.item() as f64;
        let lambda_rate = match self.cfg.pretrain_rate_control {
            RateControl::Fixed => 1.0,
            RateControl::Multiplexer => lambda_multiplexer(rate, &self.cfg.loss),
        };
        let distortion = mse(x, out.x_hat);
        let total = out.bpp.mul_scalar(lambda_rate as f32) + distortion.mul_scalar(self.cfg.lambda_mse as f32);
        check_finite(total.item(), self.step)?;
        let mut grads = p.grads(&g.backward(total));
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.adam.step(&mut self.codec.params, &grads, lr);
        Ok(LossReport {
            step: self.step,
            phase: Phase::MsePretrain.as_str().into(),
            total: total.item() as f64,
            rate_bpp: rate,
            lambda_rate,
            mse: distortion.item() as f64,
            lr,
            ..Default::default()
        })
    }

    /// One discriminator update on real `x` against the detached
    /// reconstruction, conditioned on the detached latent. Returns `L_d`.
    pub fn discriminator_step(&mut self, x: &Tensor<f32>, x_hat: &Tensor<f32>, y_hat: &Tensor<f32>) -> Result<f64> {
        let lr = self.disc_lr();
        let kind = self.cfg.loss.adversarial;
        let grad_clip = self.cfg.grad_clip;
        let d = self
            .disc
            .as_mut()
            .ok_or_else(|| Error::Usage("no discriminator in this phase".into()))?;
        let b = x.shape()[0];
        let g = Graph::new();
        let p = Bound::new(&g, &d.params, true);
        let images = g.constant(Tensor::cat(&[x, x_hat], 0));
        let cond = g.constant(Tensor::cat(&[y_hat, y_hat], 0));
        let logits = d.net.forward(&p, &mut d.sn, images, cond, true)?;
        let (real, fake) = (logits.narrow(0, 0, b), logits.narrow(0, b, b));
        let loss = match kind {
            AdversarialLoss::Hinge => hinge_adversarial_d(real, fake),
            AdversarialLoss::Bce => bce_adversarial_d(real.sigmoid(), fake.sigmoid()),
        };
        check_finite(loss.item(), self.step)?;
        let mut grads = p.grads(&g.backward(loss));
        clip_grad_norm(&mut grads, grad_clip);
        d.adam.step(&mut d.params, &grads, lr);
        Ok(loss.item() as f64)
    }

    /// Discriminator update, then one codec update on the full objective
    /// with the discriminator held fixed. Does not advance the step counter.
    pub fn finetune_step(&mut self, batch: &Tensor<f32>) -> Result<LossReport> {
        let lr = self.lr();
        let g = Graph::new();
        let p = Bound::new(&g, &self.codec.params, true);
        let x = g.constant(batch.clone());
        let mut rng = stream_rng(self.cfg.seed, self.step, STREAM_NOISE);
        let out = self.codec.forward(&p, x, true, &mut rng)?;

        let l_d = self.discriminator_step(batch, &out.x_hat.value(), &out.y_hat.value())?;

        let d = self.disc.as_mut().expect("finetuning has a discriminator");
        let pd = Bound::new(&g, &d.params, false);
        let logits = if self.cfg.loss.lambda_adv > 0.0 {
            Some(d.net.forward(&pd, &mut d.sn, out.x_hat, out.y_hat, false)?)
        } else {
            None
        };
        let pf = Bound::new(&g, &self.features.params, false);
        let obj = total_objective(&self.features, &pf, x, out.x_hat, out.bpp, logits, &self.cfg.loss);
        check_finite(obj.report.total as f32, self.step)?;
        let mut grads = p.grads(&g.backward(obj.total));
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.adam.step(&mut self.codec.params, &grads, lr);
        Ok(LossReport {
            step: self.step,
            phase: Phase::PerceptualFinetune.as_str().into(),
            l_d,
            lr,
            ..obj.report
        })
    }
}

fn load_features(cfg: &TrainConfig) -> Result<FeatureExtractor> {
    match &cfg.feature_weights {
        Some(path) => FeatureExtractor::load(path),
        None => Ok(FeatureExtractor::random(cfg.feature_seed, cfg.feature_activation)),
    }
}

fn check_finite(v: f32, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Data(format!("loss became non-finite at step {step}")))
    }
}

/// Result of [`run_training`].
pub struct TrainOutcome {
    pub trainer: Trainer,
    /// Reports of the steps run by this call.
    pub reports: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train to the end of the schedule, writing `log.jsonl`, periodic
/// `step_NNNNNN.safetensors` files and `final.safetensors` into `out_dir`.
///
/// A fresh run (step 0) first saves its initial state, so zero epochs
/// produce exactly that one checkpoint plus `final.safetensors`.
pub fn run_training(mut trainer: Trainer, data: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(trainer.step > 0)
        .write(true)
        .truncate(trainer.step == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut checkpoints = Vec::new();
    let mut save = |trainer: &Trainer, name: String| -> Result<()> {
        let path = out_dir.join(name);
        trainer.to_checkpoint().save(&path)?;
        checkpoints.push(path);
        Ok(())
    };
    if trainer.step == 0 {
        save(&trainer, format!("step_{:06}.safetensors", 0))?;
    }
    let mut reports = Vec::new();
    let every = trainer.cfg.checkpoint_every as u64;
    while trainer.step < trainer.total_steps {
        let batch = trainer.batch(data);
        let report = trainer.train_step(&batch)?;
        let line = serde_json::to_string(&report).expect("report serialises");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        if report.step % 10 == 0 || trainer.step == trainer.total_steps {
            log::info!(
                "{} step {}/{}: total {:.4} bpp {:.3} mse {:.5}",
                report.phase,
                trainer.step,
                trainer.total_steps,
                report.total,
                report.rate_bpp,
                report.mse
            );
        }
        reports.push(report);
        if every > 0 && trainer.step % every == 0 && trainer.step < trainer.total_steps {
            save(&trainer, format!("step_{:06}.safetensors", trainer.step))?;
        }
    }
    save(&trainer, "final.safetensors".into())?;
    Ok(TrainOutcome {
        trainer,
        reports,
        checkpoints,
    })
}
