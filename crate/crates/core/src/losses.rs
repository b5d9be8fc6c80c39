//! Training objectives.
//!
//! Every function here builds graph nodes, so gradients reach the
//! reconstruction. Feature maps come from a frozen [`FeatureExtractor`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::{Real, Tensor};

/// Mean of `sqrt((x - x_hat)^2 + eps^2)`.
pub fn charbonnier<'g, T: Real>(x: Var<'g, T>, x_hat: Var<'g, T>, eps: f64) -> Var<'g, T> {
    (x - x_hat).square().add_scalar(T::c(eps * eps)).sqrt().mean()
}

pub fn mse<'g, T: Real>(x: Var<'g, T>, x_hat: Var<'g, T>) -> Var<'g, T> {
    (x - x_hat).square().mean()
}

/// Generator side of the hinge loss: `-mean(fake)`.
pub fn hinge_adversarial_g<'g, T: Real>(fake_logits: Var<'g, T>) -> Var<'g, T> {
    -fake_logits.mean()
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_adversarial_d<'g, T: Real>(real_logits: Var<'g, T>, fake_logits: Var<'g, T>) -> Var<'g, T> {
    let real = (-real_logits).add_scalar(T::one()).relu().mean();
    let fake = fake_logits.add_scalar(T::one()).relu().mean();
    real + fake
}

/// Non-saturating generator loss on probabilities: `-mean(log fake)`.
pub fn bce_adversarial_g<'g, T: Real>(fake_probs: Var<'g, T>) -> Var<'g, T> {
    -fake_probs.ln().mean()
}

/// `-mean(log real) - mean(log(1 - fake))` on probabilities.
pub fn bce_adversarial_d<'g, T: Real>(real_probs: Var<'g, T>, fake_probs: Var<'g, T>) -> Var<'g, T> {
    let real = real_probs.ln().mean();
    let fake = (-fake_probs).add_scalar(T::one()).ln().mean();
    -(real + fake)
}

/// Gram matrices `[B, C, C]` of feature maps `[B, C, h, w]`.
pub fn gram_matrix<'g, T: Real>(feat: Var<'g, T>, normalize: bool) -> Var<'g, T> {
    let s = feat.shape();
    feat.patched_gram(s[2].max(s[3]).max(1), normalize)
        .reshape(&[s[0], s[1], s[1]])
}

/// Mean over batch and patches of the squared Frobenius distance between
/// patch Gram matrices (normalised by patch area), summed over layers.
pub fn style_loss_from_features<'g, T: Real>(fx: &[Var<'g, T>], fx_hat: &[Var<'g, T>], patch: usize) -> Var<'g, T> {
    assert_eq!(fx.len(), fx_hat.len());
    let terms: Vec<Var<'g, T>> = fx
        .iter()
        .zip(fx_hat)
        .map(|(&a, &b)| {
            let d = a.patched_gram(patch, true) - b.patched_gram(patch, true);
            d.square().sum_dims(&[2, 3]).mean()
        })
        .collect();
    sum_all(&terms)
}

/// LPIPS form: unit-normalise channels, weight squared differences per
/// channel, sum channels, average space and batch, sum layers.
pub fn lpips_from_features<'g, T: Real>(fx: &[Var<'g, T>], fx_hat: &[Var<'g, T>], weights: &[Tensor<T>]) -> Var<'g, T> {
    assert_eq!(fx.len(), fx_hat.len());
    let terms: Vec<Var<'g, T>> = fx
        .iter()
        .zip(fx_hat)
        .zip(weights)
        .map(|((&a, &b), w)| {
            let c = a.shape()[1];
            let d = a.channel_normalize(T::c(LPIPS_EPS)) - b.channel_normalize(T::c(LPIPS_EPS));
            d.square()
                .mul_const(&w.clone().reshape(&[1, c, 1, 1]))
                .sum_dims(&[1])
                .mean()
        })
        .collect();
    sum_all(&terms)
}

const LPIPS_EPS: f64 = 1e-10;

fn sum_all<'g, T: Real>(terms: &[Var<'g, T>]) -> Var<'g, T> {
    let mut it = terms.iter().copied();
    let first = it.next().expect("at least one feature layer");
    it.fold(first, |a, b| a + b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

/// Frozen convolutional feature network.
///
/// The built-in network is small and randomly initialised from a seed:
/// `conv3x3(3->16) act conv3x3(16->16) act | conv3x3/2(16->32) act | conv3x3/2(32->64) act |`
/// with a feature tap at each `|`. Inputs in `[0, 1]` are mapped to
/// `[-1, 1]` first. Other weights with the same layer names can be loaded.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<Conv2d>,
    taps: Vec<usize>,
    activation: Activation,
    pub params: ParamStore<f32>,
    /// Per-layer LPIPS channel weights.
    pub lpips_weights: Vec<Tensor<f32>>,
}

impl FeatureExtractor {
    fn architecture() -> (Vec<Conv2d>, Vec<usize>) {
        let layers = vec![
            Conv2d::new("fe.conv0", 3, 16, 3, 1),
            Conv2d::new("fe.conv1", 16, 16, 3, 1),
            Conv2d::new("fe.conv2", 16, 32, 3, 2),
            Conv2d::new("fe.conv3", 32, 64, 3, 2),
        ];
        (layers, vec![1, 2, 3])
    }

    pub fn random(seed: u64, activation: Activation) -> Self {
        let (layers, taps) = Self::architecture();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in &layers {
            l.init(&mut params, 2.0, &mut rng);
        }
        let lpips_weights = taps
            .iter()
            .map(|&t| {
                let c = layers[t].co;
                Tensor::full(&[c], 1.0 / c as f32)
            })
            .collect();
        Self {
            layers,
            taps,
            activation,
            params,
            lpips_weights,
        }
    }

    /// Load weights saved with [`FeatureExtractor::save`]: tensors
    /// `fe.convN.weight` / `.bias`, optional `lpips.N` channel weights and
    /// metadata `activation` (`relu` or `silu`).
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let activation = match ck.metadata.get("activation").map(String::as_str) {
            Some("silu") => Activation::Silu,
            Some("relu") | None => Activation::Relu,
            Some(other) => return Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        };
        let mut fe = Self::random(0, activation);
        for (name, t) in fe.params.iter_mut() {
            let loaded = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("feature weights lack `{name}`")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}", loaded.shape())));
            }
            *t = loaded.clone();
        }
        for (i, w) in fe.lpips_weights.iter_mut().enumerate() {
            if let Some(loaded) = ck.tensors.get(&format!("lpips.{i}")) {
                if loaded.shape() != w.shape() {
                    return Err(Error::Checkpoint(format!("`lpips.{i}` has shape {:?}", loaded.shape())));
                }
                *w = loaded.clone();
            }
        }
        Ok(fe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint {
            tensors: self.params.clone(),
            ..Default::default()
        };
        for (i, w) in self.lpips_weights.iter().enumerate() {
            ck.tensors.insert(format!("lpips.{i}"), w.clone());
        }
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        };
        ck.metadata.insert("activation".into(), act.into());
        ck.save(path)
    }

    /// Feature taps for a batch `[B, 3, H, W]`; `p` must be bound from
    /// `self.params` (normally untracked).
    pub fn features<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let mut h = x.mul_scalar(T::c(2.0)).add_scalar(-T::one());
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(p, h);
            h = match self.activation {
                Activation::Relu => h.relu(),
                Activation::Silu => h.silu(),
            };
            if self.taps.contains(&i) {
                out.push(h);
            }
        }
        out
    }

    pub fn lpips_weights_as<T: Real>(&self) -> Vec<Tensor<T>> {
        self.lpips_weights.iter().map(|w| w.cast()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialLoss {
    Hinge,
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_perc: f64,
    pub lambda_recon: f64,
    pub lambda_adv: f64,
    pub lambda_style: f64,
    /// Rate weight at or above the target.
    pub lambda_alpha: f64,
    /// Rate weight below the target.
    pub lambda_beta: f64,
    /// Target bits per pixel. Training configs set it from their top-level
    /// `rate_target`.
    #[serde(skip)]
    pub rate_target: f64,
    pub charbonnier_eps: f64,
    pub style_patch: usize,
    pub adversarial: AdversarialLoss,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_perc: 1.0,
            lambda_recon: 10.0,
            lambda_adv: 0.15,
            lambda_style: 40.0,
            lambda_alpha: 4.0,
            lambda_beta: 1.0,
            rate_target: 0.3,
            charbonnier_eps: 1e-6,
            style_patch: 16,
            adversarial: AdversarialLoss::Hinge,
        }
    }
}

impl LossWeights {
    // `!(x > 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.lambda_perc, self.lambda_recon, self.lambda_adv, self.lambda_style];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Usage("distortion weights must be non-negative".into()));
        }
        if !(self.lambda_alpha > self.lambda_beta && self.lambda_beta > 0.0) {
            return Err(Error::Usage("rate weights need lambda_alpha > lambda_beta > 0".into()));
        }
        if self.style_patch == 0 {
            return Err(Error::Usage("style_patch must be positive".into()));
        }
        Ok(())
    }
}

/// Rate weight: `lambda_alpha` when `rate >= target`, else `lambda_beta`.
pub fn lambda_multiplexer(rate: f64, w: &LossWeights) -> f64 {
    if rate >= w.rate_target {
        w.lambda_alpha
    } else {
        w.lambda_beta
    }
}

/// Named scalars of one step, written as one JSON line each.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub phase: String,
    pub total: f64,
    pub rate_bpp: f64,
    pub lambda_rate: f64,
    pub l_perc: f64,
    pub l_recon: f64,
    pub l_adv: f64,
    pub l_sty: f64,
    pub l_d: f64,
    pub mse: f64,
    pub lr: f64,
}

/// The finetuning objective and its report.
pub struct Objective<'g, T: Real> {
    pub total: Var<'g, T>,
    pub report: LossReport,
}

/// `l1 L_perc + l2 L_recon + l3 L_adv + l4 L_sty + lambda(R) R`.
///
/// `fake_logits` are the discriminator's raw outputs on the
/// reconstruction; with `None` the adversarial term is zero. Terms whose
/// weight is zero are not built.
pub fn total_objective<'g, T: Real>(
    fe: &FeatureExtractor,
    fe_params: &Bound<'g, T>,
    x: Var<'g, T>,
    x_hat: Var<'g, T>,
    rate: Var<'g, T>,
    fake_logits: Option<Var<'g, T>>,
    w: &LossWeights,
) -> Objective<'g, T> {
    let g = x.graph();
    let zero = || g.scalar(T::zero());
    let needs_features = w.lambda_perc > 0.0 || w.lambda_style > 0.0;
    let (fx, fxh) = if needs_features {
        (fe.features(fe_params, x), fe.features(fe_params, x_hat))
    } else {
        (Vec::new(), Vec::new())
    };
    let l_perc = if w.lambda_perc > 0.0 {
        lpips_from_features(&fx, &fxh, &fe.lpips_weights_as())
    } else {
        zero()
    };
    let l_sty = if w.lambda_style > 0.0 {
        style_loss_from_features(&fx, &fxh, w.style_patch)
    } else {
        zero()
    };
    let l_recon = charbonnier(x, x_hat, w.charbonnier_eps);
    let l_adv = match (fake_logits, w.adversarial) {
        (Some(l), AdversarialLoss::Hinge) if w.lambda_adv > 0.0 => hinge_adversarial_g(l),
        (Some(l), AdversarialLoss::Bce) if w.lambda_adv > 0.0 => bce_adversarial_g(l.sigmoid()),
        _ => zero(),
    };
    let r = rate.item().f64();
    let lambda_rate = lambda_multiplexer(r, w);
    let total = l_perc.mul_scalar(T::c(w.lambda_perc))
        + l_recon.mul_scalar(T::c(w.lambda_recon))
        + l_adv.mul_scalar(T::c(w.lambda_adv))
        + l_sty.mul_scalar(T::c(w.lambda_style))
        + rate.mul_scalar(T::c(lambda_rate));
    let report = LossReport {
        total: total.item().f64(),
        rate_bpp: r,
        lambda_rate,
        l_perc: l_perc.item().f64(),
        l_recon: l_recon.item().f64(),
        l_adv: l_adv.item().f64(),
        l_sty: l_sty.item().f64(),
        mse: mse(x, x_hat).item().f64(),
        ..Default::default()
    };
    Objective { total, report }
}

/// LPIPS-style distance between two images `[3, H, W]` or batches.
pub fn lpips_distance(fe: &FeatureExtractor, a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let to4 = |t: &Tensor<f32>| match t.shape() {
        &[c, h, w] => t.clone().reshape(&[1, c, h, w]),
        _ => t.clone(),
    };
    let g = crate::autograd::Graph::<f32>::new();
    let p = Bound::new(&g, &fe.params, false);
    let fa = fe.features(&p, g.constant(to4(a)));
    let fb = fe.features(&p, g.constant(to4(b)));
    lpips_from_features(&fa, &fb, &fe.lpips_weights).item() as f64
}
