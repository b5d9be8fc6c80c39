//! The complete codec: transforms, hyperprior with a factorised Gaussian
//! prior on `z`, and the context model, plus compression to and from the
//! container format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::context::{decode_latent, encode_latent, params_from_state, ContextModel, Pass, NUM_GROUPS};
use crate::entropy::{
    decode_symbol, encode_symbol, gaussian_likelihood, rate_bits, symbol_cost_bits, Bitstream, Header, RangeDecoder,
    RangeEncoder, ScaleTable, SIGMA_MIN,
};
use crate::error::{BitstreamError, Error, Result};
use crate::eval_io::image::{crop, image_dims, pad_replicate};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::transforms::{
    analysis_transform, hyper_analysis, hyper_synthesis, quantize, synthesis_transform, CodecConfig, QuantMode, Scale,
    Transforms, LATENT_STRIDE, PAD_MULTIPLE,
};

const Z_MEAN: &str = "z_prior.mean";
const Z_SCALE: &str = "z_prior.scale_raw";

pub struct Codec {
    pub cfg: CodecConfig,
    pub transforms: Transforms,
    pub context: ContextModel,
    pub params: ParamStore<f32>,
}

/// Graph outputs of one training or evaluation forward pass.
pub struct ForwardOutput<'g, T: Real> {
    /// Reconstruction, unclamped.
    pub x_hat: Var<'g, T>,
    /// Quantised latent (straight-through), used for synthesis and as the
    /// discriminator condition.
    pub y_hat: Var<'g, T>,
    pub likelihoods_y: Var<'g, T>,
    pub likelihoods_z: Var<'g, T>,
    /// Bits per pixel over the whole batch.
    pub bpp: Var<'g, T>,
}

/// Encoder-side byproducts of [`Codec::compress`].
#[derive(Clone, Debug)]
pub struct Compressed {
    pub bitstream: Bitstream,
    pub bytes: Vec<u8>,
    pub z_symbols: Vec<i32>,
    pub y_symbols: Vec<i32>,
    /// Dequantised latent `[1, M, h, w]`.
    pub y_hat: Tensor<f32>,
    /// Cost of all symbols under the quantised CDF tables.
    pub table_bits: f64,
}

/// Decoder-side latents recovered from a stream.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub header: Header,
    pub z_symbols: Vec<i32>,
    pub y_symbols: Vec<i32>,
    pub y_hat: Tensor<f32>,
}

impl Codec {
    fn build(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            transforms: Transforms::new(&cfg),
            context: ContextModel::new(&cfg)?,
            cfg,
            params: ParamStore::new(),
        })
    }

    /// Freshly initialised weights from `seed`.
    pub fn random(cfg: CodecConfig, seed: u64) -> Result<Self> {
        let mut codec = Self::build(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        codec.params = codec.init_params(&mut rng);
        Ok(codec)
    }

    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        self.transforms.init(&mut store, rng);
        self.context.init(&mut store, rng);
        let nh = self.cfg.hyper_channels;
        store.insert(Z_MEAN, Tensor::zeros(&[nh]));
        // softplus(0.5413) + 0.11 = 1.11
        store.insert(Z_SCALE, Tensor::full(&[nh], 0.5413));
        store
    }

    /// Wrap existing parameters, checking names and shapes.
    pub fn from_params(cfg: CodecConfig, params: ParamStore<f32>) -> Result<Self> {
        let mut codec = Self::build(cfg)?;
        let expected = codec.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        if !expected.same_layout(&params) {
            let missing: Vec<_> = expected.names().filter(|n| !params.contains(n)).take(3).collect();
            return Err(Error::Checkpoint(format!(
                "parameters do not match the codec configuration (e.g. missing {missing:?})"
            )));
        }
        codec.params = params;
        Ok(codec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: CodecConfig = serde_json::from_str(ck.meta("codec_config")?)
            .map_err(|e| Error::Checkpoint(format!("codec_config: {e}")))?;
        Self::from_params(cfg, ck.tensors.subset("codec."))
    }

    /// Add this codec's parameters and config to a checkpoint.
    pub fn store_into(&self, ck: &mut Checkpoint) {
        ck.tensors.extend_prefixed("codec.", &self.params);
        ck.metadata
            .insert("codec_config".into(), serde_json::to_string(&self.cfg).expect("config serialises"));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::default();
        self.store_into(&mut ck);
        ck.save(path)
    }

    fn z_prior<'g, T: Real>(&self, p: &Bound<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let nh = self.cfg.hyper_channels;
        let mean = p.get(Z_MEAN).reshape(&[1, nh, 1, 1]);
        let scale = p.get(Z_SCALE).reshape(&[1, nh, 1, 1]).softplus().add_scalar(T::c(SIGMA_MIN));
        (mean, scale)
    }

    /// Forward pass on a batch `[B, 3, H, W]` (sides multiples of 64).
    ///
    /// With `training`, the rate is measured on noisy latents and
    /// quantisation uses the straight-through estimator; otherwise the rate
    /// is that of the rounded latents.
    pub fn forward<'g, T: Real, R: Rng + ?Sized>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput<'g, T>> {
        let cfg = &self.cfg;
        let g = p.graph();
        let y = analysis_transform(&self.transforms, p, x, cfg)?;
        let z = hyper_analysis(&self.transforms, p, y, cfg)?;

        let (z_mean, z_scale) = self.z_prior(p);
        let z_hat = quantize(z, QuantMode::Ste, Some(z_mean), rng);
        let z_rate_input = if training {
            quantize(z, QuantMode::Noise, None, rng)
        } else {
            z_hat
        };
        let likelihoods_z = gaussian_likelihood(z_rate_input, z_mean, z_scale);
        let hyper = hyper_synthesis(&self.transforms, p, z_hat, cfg)?;

        let shape = y.shape();
        let (h, w) = (shape[2], shape[3]);
        let anchor = g.constant(Tensor::from_fn(&[1, 1, h, w], |i| {
            if crate::context::is_anchor(i / w, i % w) {
                T::one()
            } else {
                T::zero()
            }
        }));
        let other = anchor.mul_scalar(-T::one()).add_scalar(T::one());
        let layout = self.context.layout();
        let mut y_hat_groups: Vec<Var<'g, T>> = Vec::with_capacity(NUM_GROUPS);
        let mut lik_groups = Vec::with_capacity(NUM_GROUPS);
        for k in 0..NUM_GROUPS {
            let y_k = y.narrow(1, layout.offset(k), layout.size(k));
            let prev = (k > 0).then(|| Var::cat(&y_hat_groups, 1));
            let (mu_a, sigma_a) = self.context.entropy_params(p, prev, None, hyper, k, Pass::Anchor)?;
            let y_a = quantize(y_k, QuantMode::Ste, Some(mu_a), rng);
            let (mu_n, sigma_n) = self.context.entropy_params(p, prev, Some(y_a), hyper, k, Pass::NonAnchor)?;
            let y_n = quantize(y_k, QuantMode::Ste, Some(mu_n), rng);
            let y_hat_k = y_a * anchor + y_n * other;
            let mu = mu_a * anchor + mu_n * other;
            let sigma = sigma_a * anchor + sigma_n * other;
            let rate_input = if training {
                quantize(y_k, QuantMode::Noise, None, rng)
            } else {
                y_hat_k
            };
            lik_groups.push(gaussian_likelihood(rate_input, mu, sigma));
            y_hat_groups.push(y_hat_k);
        }
        let y_hat = Var::cat(&y_hat_groups, 1);
        let likelihoods_y = Var::cat(&lik_groups, 1);
        let x_hat = synthesis_transform(&self.transforms, p, y_hat, cfg)?;

        let xs = x.shape();
        let pixels = (xs[0] * xs[2] * xs[3]) as f64;
        let bpp = (rate_bits(likelihoods_y) + rate_bits(likelihoods_z)).mul_scalar(T::c(1.0 / pixels));
        Ok(ForwardOutput {
            x_hat,
            y_hat,
            likelihoods_y,
            likelihoods_z,
            bpp,
        })
    }

    /// Deterministic reconstruction of a `[3, H, W]` image without entropy
    /// coding, clamped to `[0, 1]`, with the model's rate estimate.
    pub fn reconstruct(&self, img: &Tensor<f32>) -> Result<(Tensor<f32>, f64)> {
        let (h, w) = image_dims(img)?;
        let padded = pad_replicate(img, PAD_MULTIPLE);
        let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let x = g.constant(padded.reshape(&[1, 3, ph, pw]));
        let out = self.forward(&p, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        let bits = out.bpp.item() as f64 * (ph * pw) as f64;
        let x_hat = out.x_hat.value().as_ref().clone().reshape(&[3, ph, pw]);
        Ok((crop(&x_hat, h, w).map(|v| v.clamp(0.0, 1.0)), bits / (h * w) as f64))
    }

    /// Compress a `[3, H, W]` image in `[0, 1]`.
    pub fn compress(&self, img: &Tensor<f32>) -> Result<Compressed> {
        let (h, w) = image_dims(img)?;
        let padded = pad_replicate(img, PAD_MULTIPLE);
        let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let x = g.constant(padded.reshape(&[1, 3, ph, pw]));
        let y = analysis_transform(&self.transforms, &p, x, &self.cfg)?;
        let z = hyper_analysis(&self.transforms, &p, y, &self.cfg)?;

        let (z_mean, z_scale) = self.z_prior(&p);
        let (z_mean, z_scale) = (z_mean.value(), z_scale.value());
        let z_val = z.value();
        let (nh, zh, zw) = (z_val.shape()[1], z_val.shape()[2], z_val.shape()[3]);
        let tables = ScaleTable::get();
        let mut enc = RangeEncoder::new();
        let mut z_symbols = Vec::with_capacity(z_val.numel());
        let mut z_hat = Tensor::zeros(z_val.shape());
        let mut table_bits = 0.0;
        for c in 0..nh {
            let table = tables.table_for(z_scale.data()[c] as f64);
            let mean = z_mean.data()[c];
            for i in 0..zh * zw {
                let at = c * zh * zw + i;
                let s = (z_val.data()[at] - mean).round().clamp(-1e9, 1e9) as i32;
                encode_symbol(&mut enc, table, s);
                table_bits += symbol_cost_bits(table, s);
                z_symbols.push(s);
                z_hat.data_mut()[at] = s as f32 + mean;
            }
        }
        let mut streams = vec![enc.finish()];

        let hyper = hyper_synthesis(&self.transforms, &p, g.constant(z_hat), &self.cfg)?.value();
        let code = encode_latent(&self.context, &self.params, &hyper, &y.value())?;
        streams.extend(code.streams);
        let header = Header {
            width: u32::try_from(w).map_err(|_| Error::Data("image too wide".into()))?,
            height: u32::try_from(h).map_err(|_| Error::Data("image too tall".into()))?,
            scale_id: self.cfg.scale.id(),
        };
        let bitstream = Bitstream { header, streams };
        Ok(Compressed {
            bytes: bitstream.to_bytes(),
            bitstream,
            z_symbols,
            y_symbols: code.symbols,
            y_hat: code.y_hat,
            table_bits: table_bits + code.table_bits,
        })
    }

    /// Recover the latents from a stream.
    pub fn decode_latents(&self, bytes: &[u8]) -> Result<Decoded> {
        let bs = Bitstream::from_bytes(bytes)?;
        let header = bs.header;
        if Scale::from_id(header.scale_id) != Some(self.cfg.scale) {
            return Err(BitstreamError::ScaleMismatch {
                expected: self.cfg.scale.id(),
                found: header.scale_id,
            }
            .into());
        }
        let ph = (header.height as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let pw = (header.width as usize).div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
        let (lh, lw) = (ph / LATENT_STRIDE, pw / LATENT_STRIDE);
        let (zh, zw) = (lh / 4, lw / 4);
        let nh = self.cfg.hyper_channels;

        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let (z_mean, z_scale) = self.z_prior(&p);
        let (z_mean, z_scale) = (z_mean.value(), z_scale.value());
        let tables = ScaleTable::get();
        let mut dec = RangeDecoder::new(&bs.streams[0]);
        let mut z_symbols = Vec::with_capacity(nh * zh * zw);
        let mut z_hat = Tensor::zeros(&[1, nh, zh, zw]);
        for c in 0..nh {
            let table = tables.table_for(z_scale.data()[c] as f64);
            for i in 0..zh * zw {
                let s = decode_symbol(&mut dec, table)?;
                z_symbols.push(s);
                z_hat.data_mut()[c * zh * zw + i] = s as f32 + z_mean.data()[c];
            }
        }
        dec.finish()?;
        let hyper = hyper_synthesis(&self.transforms, &p, g.constant(z_hat), &self.cfg)?.value();
        let (y_symbols, y_hat) = decode_latent(self.context.layout(), (lh, lw), &bs.streams[1..], |k, pass, s: &Tensor<f32>| {
            params_from_state(&self.context, &self.params, &hyper, s, k, pass)
        })?;
        Ok(Decoded {
            header,
            z_symbols,
            y_symbols,
            y_hat,
        })
    }

    /// Decode a stream to a `[3, H, W]` image clamped to `[0, 1]`.
    pub fn decompress(&self, bytes: &[u8]) -> Result<Tensor<f32>> {
        let d = self.decode_latents(bytes)?;
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let x_hat = synthesis_transform(&self.transforms, &p, g.constant(d.y_hat), &self.cfg)?.value();
        let (_, _, ph, pw) = x_hat.dims4();
        let x_hat = x_hat.as_ref().clone().reshape(&[3, ph, pw]);
        Ok(crop(&x_hat, d.header.height as usize, d.header.width as usize).map(|v| v.clamp(0.0, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b): (f32, f32) = (rng.random_range(0.02..0.2), rng.random_range(0.02..0.2));
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), i / w % h, i % w);
            0.5 + 0.4 * ((a * x as f32 + c as f32).sin() * (b * y as f32).cos())
        })
    }

    #[test]
    fn compress_round_trip_with_odd_size() {
        let codec = Codec::random(CodecConfig::toy(), 1).unwrap();
        let img = smooth_image(70, 100, 2);
        let c = codec.compress(&img).unwrap();
        let d = codec.decode_latents(&c.bytes).unwrap();
        assert_eq!((d.header.width, d.header.height), (100, 70));
        assert_eq!(d.y_symbols, c.y_symbols);
        assert_eq!(d.z_symbols, c.z_symbols);
        assert_eq!(d.y_hat, c.y_hat);
        let out = codec.decompress(&c.bytes).unwrap();
        assert_eq!(out.shape(), &[3, 70, 100]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(codec.compress(&img).unwrap().bytes, c.bytes);
    }

    #[test]
    fn eval_forward_rate_matches_coded_symbols() {
        let codec = Codec::random(CodecConfig::toy(), 3).unwrap();
        let img = smooth_image(64, 128, 4);
        let (_, bpp) = codec.reconstruct(&img).unwrap();
        let c = codec.compress(&img).unwrap();
        let coded_bpp = c.bytes.len() as f64 * 8.0 / (64.0 * 128.0);
        assert!(coded_bpp <= bpp * 1.02 + 64.0 * 8.0 / (64.0 * 128.0), "{coded_bpp} vs {bpp}");
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let codec = Codec::random(CodecConfig::toy(), 5).unwrap();
        codec.save(&path).unwrap();
        let back = Codec::load(&path).unwrap();
        assert_eq!(back.params, codec.params);
        assert_eq!(back.cfg, codec.cfg);
        let mut cfg = CodecConfig::toy();
        cfg.backbone_channels = 32;
        assert!(matches!(Codec::from_params(cfg, codec.params.clone()), Err(Error::Checkpoint(_))));
    }
}
