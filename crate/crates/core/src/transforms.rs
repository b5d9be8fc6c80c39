//! Analysis/synthesis transforms, the hyperprior pair and quantization.
//!
//! ```text
//! g_a: conv5x5/2 (3->N)  res  conv5x5/2 (N->N)  res  conv5x5/2 (N->N)  res  conv5x5/2 (N->M)
//! g_s: deconv5x5/2 (M->N)  res  deconv5x5/2 (N->N)  res  deconv5x5/2 (N->N)  res  deconv5x5/2 (N->3)
//! h_a: conv3x3 (M->N')  relu  conv5x5/2 (N'->N')  relu  conv5x5/2 (N'->N')
//! h_s: deconv5x5/2 (N'->N')  relu  deconv5x5/2 (N'->3N'/2)  relu  conv3x3 (3N'/2->2M)
//! ```
//!
//! `res` is a stack of residual bottleneck blocks (one per stage at toy
//! scale, three at full scale).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvTranspose2d, ParamStore, ResBottleneck};
use crate::tensor::{Real, Tensor};

/// Total downsampling of the main path.
pub const LATENT_STRIDE: usize = 16;
/// Total downsampling from the image to the hyper-latent grid.
pub const PAD_MULTIPLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Toy,
    Full,
}

impl Scale {
    /// Identifier written into bitstream headers.
    pub fn id(self) -> u8 {
        match self {
            Scale::Toy => 0,
            Scale::Full => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Scale::Toy),
            1 => Some(Scale::Full),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// M
    pub latent_channels: usize,
    /// N
    pub backbone_channels: usize,
    /// N'
    pub hyper_channels: usize,
    pub scale: Scale,
    /// Residual blocks after each of the first three main-path stages.
    pub res_blocks: usize,
    /// Explicit channel group sizes; `None` uses the scale's default split.
    #[serde(default)]
    pub group_sizes: Option<Vec<usize>>,
}

impl CodecConfig {
    pub fn toy() -> Self {
        Self {
            latent_channels: 80,
            backbone_channels: 64,
            hyper_channels: 48,
            scale: Scale::Toy,
            res_blocks: 1,
            group_sizes: None,
        }
    }

    pub fn full() -> Self {
        Self {
            latent_channels: 320,
            backbone_channels: 192,
            hyper_channels: 192,
            scale: Scale::Full,
            res_blocks: 3,
            group_sizes: None,
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Toy => Self::toy(),
            Scale::Full => Self::full(),
        }
    }

    /// Channels of the hyper-synthesis output (mean and scale features).
    pub fn hyper_ctx_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.backbone_channels == 0 || self.hyper_channels == 0 {
            return Err(Error::Usage("channel counts must be positive".into()));
        }
        crate::context::GroupLayout::for_config(self).map(|_| ())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d),
    Deconv(ConvTranspose2d),
    Res(ResBottleneck),
    Relu,
}

/// A straight chain of layers.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        for (i, layer) in self.layers.iter().enumerate() {
            let followed_by_relu = matches!(self.layers.get(i + 1), Some(Layer::Relu));
            let gain = if followed_by_relu { 2.0 } else { 1.0 };
            match layer {
                Layer::Conv(c) => c.init(store, gain, rng),
                Layer::Deconv(d) => d.init(store, gain, rng),
                Layer::Res(r) => r.init(store, rng),
                Layer::Relu => {}
            }
        }
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, mut x: Var<'g, T>) -> Var<'g, T> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => c.forward(p, x),
                Layer::Deconv(d) => d.forward(p, x),
                Layer::Res(r) => r.forward(p, x),
                Layer::Relu => x.relu(),
            };
        }
        x
    }
}

/// The four networks of the autoencoder and hyperprior.
#[derive(Clone, Debug)]
pub struct Transforms {
    pub g_a: Sequential,
    pub g_s: Sequential,
    pub h_a: Sequential,
    pub h_s: Sequential,
}

impl Transforms {
    pub fn new(cfg: &CodecConfig) -> Self {
        let (m, n, nh) = (cfg.latent_channels, cfg.backbone_channels, cfg.hyper_channels);
        let res = |layers: &mut Vec<Layer>, prefix: &str, stage: usize, ch: usize| {
            for r in 0..cfg.res_blocks {
                layers.push(Layer::Res(ResBottleneck::new(&format!("{prefix}.res{stage}_{r}"), ch)));
            }
        };

        let mut g_a = Vec::new();
        let chans = [3, n, n, n, m];
        for s in 0..4 {
            g_a.push(Layer::Conv(Conv2d::new(format!("g_a.conv{s}"), chans[s], chans[s + 1], 5, 2)));
            if s < 3 {
                res(&mut g_a, "g_a", s, n);
            }
        }

        let mut g_s = Vec::new();
        let chans = [m, n, n, n, 3];
        for s in 0..4 {
            g_s.push(Layer::Deconv(ConvTranspose2d::new(
                format!("g_s.deconv{s}"),
                chans[s],
                chans[s + 1],
                5,
                2,
            )));
            if s < 3 {
                res(&mut g_s, "g_s", s, n);
            }
        }

        let h_a = vec![
            Layer::Conv(Conv2d::new("h_a.conv0", m, nh, 3, 1)),
            Layer::Relu,
            Layer::Conv(Conv2d::new("h_a.conv1", nh, nh, 5, 2)),
            Layer::Relu,
            Layer::Conv(Conv2d::new("h_a.conv2", nh, nh, 5, 2)),
        ];
        let mid = nh * 3 / 2;
        let h_s = vec![
            Layer::Deconv(ConvTranspose2d::new("h_s.deconv0", nh, nh, 5, 2)),
            Layer::Relu,
            Layer::Deconv(ConvTranspose2d::new("h_s.deconv1", nh, mid, 5, 2)),
            Layer::Relu,
            Layer::Conv(Conv2d::new("h_s.conv2", mid, 2 * m, 3, 1)),
        ];
        Self {
            g_a: Sequential { layers: g_a },
            g_s: Sequential { layers: g_s },
            h_a: Sequential { layers: h_a },
            h_s: Sequential { layers: h_s },
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.g_a.init(store, rng);
        self.g_s.init(store, rng);
        self.h_a.init(store, rng);
        self.h_s.init(store, rng);
    }
}

fn expect_channels(what: &str, shape: &[usize], c: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != c {
        return Err(Error::Shape(format!("{what}: expected [B, {c}, H, W], got {shape:?}")));
    }
    Ok(())
}

/// `y = g_a(x)` for a batch `[B, 3, H, W]`; H and W must be multiples of 64.
pub fn analysis_transform<'g, T: Real>(
    net: &Transforms,
    p: &Bound<'g, T>,
    x: Var<'g, T>,
    cfg: &CodecConfig,
) -> Result<Var<'g, T>> {
    let shape = x.shape();
    expect_channels("analysis input", &shape, 3)?;
    let (h, w) = (shape[2], shape[3]);
    if h < PAD_MULTIPLE || w < PAD_MULTIPLE || h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "analysis input must be padded to a multiple of {PAD_MULTIPLE} (at least {PAD_MULTIPLE}), got {h}x{w}"
        )));
    }
    let y = net.g_a.forward(p, x);
    debug_assert_eq!(y.shape()[1], cfg.latent_channels);
    Ok(y)
}

/// `x_hat = g_s(y_hat)`, unclamped.
pub fn synthesis_transform<'g, T: Real>(
    net: &Transforms,
    p: &Bound<'g, T>,
    y_hat: Var<'g, T>,
    cfg: &CodecConfig,
) -> Result<Var<'g, T>> {
    expect_channels("synthesis input", &y_hat.shape(), cfg.latent_channels)?;
    Ok(net.g_s.forward(p, y_hat))
}

/// `z = h_a(y)`; the latent grid must be divisible by 4.
pub fn hyper_analysis<'g, T: Real>(
    net: &Transforms,
    p: &Bound<'g, T>,
    y: Var<'g, T>,
    cfg: &CodecConfig,
) -> Result<Var<'g, T>> {
    let shape = y.shape();
    expect_channels("hyper analysis input", &shape, cfg.latent_channels)?;
    if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
        return Err(Error::Shape(format!(
            "latent grid {}x{} is not divisible by 4",
            shape[2], shape[3]
        )));
    }
    Ok(net.h_a.forward(p, y))
}

/// Hyper context `[B, 2M, 4h, 4w]` from `z_hat`.
pub fn hyper_synthesis<'g, T: Real>(
    net: &Transforms,
    p: &Bound<'g, T>,
    z_hat: Var<'g, T>,
    cfg: &CodecConfig,
) -> Result<Var<'g, T>> {
    expect_channels("hyper synthesis input", &z_hat.shape(), cfg.hyper_channels)?;
    Ok(net.h_s.forward(p, z_hat))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// `round(v - mu) + mu`, no gradient.
    Round,
    /// `v + u`, `u ~ U(-0.5, 0.5)`; the offset is irrelevant.
    Noise,
    /// Forward as `Round`, identity gradient.
    Ste,
}

pub fn quantize<'g, T: Real, R: Rng + ?Sized>(
    v: Var<'g, T>,
    mode: QuantMode,
    offset: Option<Var<'g, T>>,
    rng: &mut R,
) -> Var<'g, T> {
    match mode {
        QuantMode::Ste => v.ste_round(offset),
        QuantMode::Round => v.ste_round(offset).detach(),
        QuantMode::Noise => {
            let u = Tensor::rand_uniform(&v.shape(), -0.5, 0.5, rng);
            v + v.graph().constant(u)
        }
    }
}

/// Mean-offset rounding on plain values.
pub fn quantize_round(v: f64, mu: f64) -> f64 {
    (v - mu).round() + mu
}
