//! Conditional patch discriminator with spectrally normalised layers.
//!
//! The condition is the detached quantised latent: a 3x3 convolution to
//! `condition_channels`, leaky ReLU, then nearest upsampling by 16 so it
//! lines up with the image. Image and condition are concatenated and passed
//! through `num_downsample_stages` 4x4 stride-2 convolutions (widths
//! `base_channels * 2^i`, leaky ReLU 0.2) and a 1x1 convolution to one
//! logit per patch.
//!
//! Every weight is divided by a power-iteration estimate of its top
//! singular value. The left vectors `u` live in a [`SpectralState`] and only
//! advance on forwards made with `update = true`, which the training loop
//! uses for discriminator updates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{power_iteration, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::transforms::LATENT_STRIDE;

const LEAKY_SLOPE: f64 = 0.2;

/// Power-iteration vectors keyed `<layer>.u`.
pub type SpectralState = ParamStore<f32>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub num_downsample_stages: usize,
    pub condition_channels: usize,
    #[serde(default = "one")]
    pub sn_power_iterations: usize,
}

fn one() -> usize {
    1
}

impl DiscriminatorConfig {
    pub fn toy(latent_channels: usize) -> Self {
        Self {
            latent_channels,
            base_channels: 16,
            num_downsample_stages: 4,
            condition_channels: 12,
            sn_power_iterations: 1,
        }
    }

    pub fn full(latent_channels: usize) -> Self {
        Self {
            base_channels: 64,
            ..Self::toy(latent_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.latent_channels,
            self.base_channels,
            self.num_downsample_stages,
            self.condition_channels,
            self.sn_power_iterations,
        ];
        if fields.contains(&0) {
            return Err(Error::Usage("discriminator sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Weight divided by its estimated top singular value.
///
/// `u` is updated in place by `iters` rounds of power iteration; with zero
/// rounds the current `u` is used as is.
pub fn spectral_normalize<T: Real>(w: &Tensor<T>, u: &mut [T], iters: usize) -> Tensor<T> {
    let (_, sigma) = power_iteration(w, u, iters);
    w.scale(T::one() / sigma)
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    cond: Conv2d,
    body: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let cond = Conv2d::new("cond", cfg.latent_channels, cfg.condition_channels, 3, 1);
        let mut body = Vec::new();
        let mut ci = 3 + cfg.condition_channels;
        for s in 0..cfg.num_downsample_stages {
            let co = cfg.base_channels << s;
            body.push(Conv2d::new(format!("conv{s}"), ci, co, 4, 2).with_pad(1));
            ci = co;
        }
        let head = Conv2d::new("head", ci, 1, 1, 1);
        Ok(Self { cfg, cond, body, head })
    }

    fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        std::iter::once(&self.cond).chain(&self.body).chain(std::iter::once(&self.head))
    }

    /// Fresh weights and unit-norm random power-iteration vectors.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> (ParamStore<f32>, SpectralState) {
        let mut params = ParamStore::new();
        let mut sn = SpectralState::new();
        for l in self.layers() {
            l.init(&mut params, 2.0, rng);
            let mut u: Vec<f32> = (0..l.co).map(|_| rng.sample(StandardNormal)).collect();
            let n = u.iter().map(|a| a * a).sum::<f32>().sqrt();
            u.iter_mut().for_each(|a| *a /= n);
            sn.insert(format!("{}.u", l.name), Tensor::from_vec(&[l.co], u));
        }
        (params, sn)
    }

    /// Total downsampling from image to logits.
    pub fn output_stride(&self) -> usize {
        1 << self.cfg.num_downsample_stages
    }

    fn layer<'g, T: Real>(
        &self,
        l: &Conv2d,
        p: &Bound<'g, T>,
        sn: &mut SpectralState,
        x: Var<'g, T>,
        update: bool,
    ) -> Var<'g, T> {
        let w = p.get(&l.weight_name());
        let key = format!("{}.u", l.name);
        let state = sn
            .get_mut(&key)
            .unwrap_or_else(|| panic!("spectral state lacks `{key}`"));
        let mut u: Vec<T> = state.data().iter().map(|&a| T::c(a as f64)).collect();
        let iters = if update { self.cfg.sn_power_iterations } else { 0 };
        let (v, _) = power_iteration(&w.value(), &mut u, iters);
        if update {
            for (dst, src) in state.data_mut().iter_mut().zip(&u) {
                *dst = src.f64() as f32;
            }
        }
        let w_sn = w.spectral_normalized(&u, &v);
        x.conv2d(w_sn, Some(p.get(&l.bias_name())), l.stride, l.pad)
    }

    /// Project the detached latent and upsample it to `target_hw`.
    pub fn prepare_condition<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        sn: &mut SpectralState,
        y_hat: Var<'g, T>,
        target_hw: (usize, usize),
        update: bool,
    ) -> Result<Var<'g, T>> {
        let s = y_hat.shape();
        if s.len() != 4 || s[1] != self.cfg.latent_channels {
            return Err(Error::Shape(format!(
                "condition expects [B, {}, h, w], got {s:?}",
                self.cfg.latent_channels
            )));
        }
        if (s[2] * LATENT_STRIDE, s[3] * LATENT_STRIDE) != target_hw {
            return Err(Error::Shape(format!(
                "latent grid {}x{} does not upsample to {}x{}",
                s[2], s[3], target_hw.0, target_hw.1
            )));
        }
        let h = self.layer(&self.cond, p, sn, y_hat.detach(), update);
        Ok(h.leaky_relu(T::c(LEAKY_SLOPE)).upsample_nearest(LATENT_STRIDE))
    }

    /// Raw logits `[B, 1, H / 2^stages, W / 2^stages]`.
    pub fn discriminator_forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        sn: &mut SpectralState,
        image: Var<'g, T>,
        condition: Var<'g, T>,
        update: bool,
    ) -> Result<Var<'g, T>> {
        let (is, cs) = (image.shape(), condition.shape());
        if is.len() != 4 || is[1] != 3 {
            return Err(Error::Shape(format!("expected images [B, 3, H, W], got {is:?}")));
        }
        if cs.len() != 4 || cs[0] != is[0] || cs[1] != self.cfg.condition_channels || cs[2..] != is[2..] {
            return Err(Error::Shape(format!("condition {cs:?} is not aligned with image {is:?}")));
        }
        let stride = self.output_stride();
        if is[2] % stride != 0 || is[3] % stride != 0 {
            return Err(Error::Shape(format!("image sides must be multiples of {stride}")));
        }
        let mut h = Var::cat(&[image, condition], 1);
        for l in &self.body {
            h = self.layer(l, p, sn, h, update).leaky_relu(T::c(LEAKY_SLOPE));
        }
        Ok(self.layer(&self.head, p, sn, h, update))
    }

    /// Condition on `y_hat` and score `image`.
    pub fn forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        sn: &mut SpectralState,
        image: Var<'g, T>,
        y_hat: Var<'g, T>,
        update: bool,
    ) -> Result<Var<'g, T>> {
        let s = image.shape();
        let hw = (s[2], s[3]);
        let cond = self.prepare_condition(p, sn, y_hat, hw, update)?;
        self.discriminator_forward(p, sn, image, cond, update)
    }

    /// Spectrally normalised weight matrices `[out, rest]` at the current
    /// state, without advancing it.
    pub fn normalized_weights(&self, params: &ParamStore<f32>, sn: &SpectralState) -> Vec<(String, Tensor<f64>)> {
        self.layers()
            .map(|l| {
                let w: Tensor<f64> = params.get(&l.weight_name()).expect("weight").cast();
                let rows = w.shape()[0];
                let w = w.reshape(&[rows, l.ci * l.k * l.k]);
                let mut u: Vec<f64> = sn.get(&format!("{}.u", l.name)).expect("u").data().iter().map(|&a| a as f64).collect();
                (l.name.clone(), spectral_normalize(&w, &mut u, 0))
            })
            .collect()
    }
}
