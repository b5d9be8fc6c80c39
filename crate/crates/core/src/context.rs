//! Spatial-channel context model.
//!
//! Latent channels are split into five uneven groups decoded in order. Each
//! group is decoded in two checkerboard passes: anchors (`(i + j)` even)
//! first, conditioned on the hyper context and on earlier groups, then the
//! remaining cells, additionally conditioned on the group's own anchors.
//!
//! Decoding order, which the bitstream follows: groups 0 to 4; within a
//! group the anchor pass, then the non-anchor pass; within a pass channel by
//! channel, each in raster order over the pass's cells.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::entropy::{decode_symbol, encode_symbol, symbol_cost_bits, RangeDecoder, RangeEncoder, ScaleTable, SIGMA_MIN};
use crate::error::{BitstreamError, Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::transforms::{CodecConfig, Scale};

pub const NUM_GROUPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pass {
    Anchor,
    NonAnchor,
}

impl Pass {
    pub const BOTH: [Pass; 2] = [Pass::Anchor, Pass::NonAnchor];

    pub fn index(self) -> usize {
        match self {
            Pass::Anchor => 0,
            Pass::NonAnchor => 1,
        }
    }

    pub fn contains(self, i: usize, j: usize) -> bool {
        is_anchor(i, j) == (self == Pass::Anchor)
    }
}

pub fn is_anchor(i: usize, j: usize) -> bool {
    (i + j) % 2 == 0
}

/// Channel partition into the five decoding groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl GroupLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() != NUM_GROUPS || sizes.contains(&0) {
            return Err(Error::Usage(format!(
                "group layout needs {NUM_GROUPS} positive sizes, got {sizes:?}"
            )));
        }
        let offsets = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        Ok(Self { sizes, offsets })
    }

    pub fn for_config(cfg: &CodecConfig) -> Result<Self> {
        let layout = match &cfg.group_sizes {
            Some(sizes) => Self::new(sizes.clone())?,
            None => make_group_layout(cfg.latent_channels)?,
        };
        if layout.total() != cfg.latent_channels {
            return Err(Error::Usage(format!(
                "group sizes sum to {}, latent has {} channels",
                layout.total(),
                cfg.latent_channels
            )));
        }
        Ok(layout)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, k: usize) -> usize {
        self.sizes[k]
    }

    /// First channel of group `k`.
    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Default layouts: `[16, 16, 32, 64, 192]` at full width and the same
/// 1:1:2:2:4 proportions for the toy width.
pub fn make_group_layout(m: usize) -> Result<GroupLayout> {
    let sizes = match m {
        80 => vec![8, 8, 16, 16, 32],
        320 => vec![16, 16, 32, 64, 192],
        _ => {
            return Err(Error::Usage(format!(
                "no default channel groups for M={m}; give group_sizes explicitly"
            )))
        }
    };
    GroupLayout::new(sizes)
}

/// `(anchor, non_anchor)` row-major boolean masks.
pub fn checkerboard_masks(h: usize, w: usize) -> (Vec<bool>, Vec<bool>) {
    let anchor: Vec<bool> = (0..h * w).map(|p| is_anchor(p / w, p % w)).collect();
    let non_anchor = anchor.iter().map(|a| !a).collect();
    (anchor, non_anchor)
}

fn anchor_mask_tensor<T: Real>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[1, 1, h, w], |p| if is_anchor(p / w, p % w) { T::one() } else { T::zero() })
}

/// Cells of one pass in raster order.
pub fn pass_positions(h: usize, w: usize, pass: Pass) -> Vec<(usize, usize)> {
    (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| pass.contains(i, j))
        .collect()
}

#[derive(Clone, Debug)]
struct GroupNets {
    channel: Option<(Conv2d, Conv2d)>,
    spatial: Conv2d,
    aggregate: [Conv2d; 3],
}

/// Parameter networks for every group.
#[derive(Clone, Debug)]
pub struct ContextModel {
    layout: GroupLayout,
    hyper_channels: usize,
    groups: Vec<GroupNets>,
}

impl ContextModel {
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        let layout = GroupLayout::for_config(cfg)?;
        let m = cfg.latent_channels;
        let hyper_channels = cfg.hyper_ctx_channels();
        let (h1, h2) = match cfg.scale {
            Scale::Toy => (3 * m / 2, 6 * m / 5),
            Scale::Full => (640, 512),
        };
        let groups = (0..NUM_GROUPS)
            .map(|k| {
                let g = layout.size(k);
                let prev = layout.offset(k);
                let channel = (k > 0).then(|| {
                    let mid = (2 * g).max(32);
                    (
                        Conv2d::new(format!("ctx.g{k}.channel0"), prev, mid, 5, 1),
                        Conv2d::new(format!("ctx.g{k}.channel1"), mid, 2 * g, 5, 1),
                    )
                });
                let spatial = Conv2d::new(format!("ctx.g{k}.spatial"), g, 2 * g, 5, 1);
                let agg_in = hyper_channels + if k > 0 { 4 * g } else { 2 * g };
                let aggregate = [
                    Conv2d::new(format!("ctx.g{k}.agg0"), agg_in, h1, 1, 1),
                    Conv2d::new(format!("ctx.g{k}.agg1"), h1, h2, 1, 1),
                    Conv2d::new(format!("ctx.g{k}.agg2"), h2, 2 * g, 1, 1),
                ];
                GroupNets {
                    channel,
                    spatial,
                    aggregate,
                }
            })
            .collect();
        Ok(Self {
            layout,
            hyper_channels,
            groups,
        })
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        for g in &self.groups {
            if let Some((a, b)) = &g.channel {
                a.init(store, 2.0, rng);
                b.init(store, 1.0, rng);
            }
            g.spatial.init(store, 1.0, rng);
            g.aggregate[0].init(store, 2.0, rng);
            g.aggregate[1].init(store, 2.0, rng);
            g.aggregate[2].init(store, 1.0, rng);
        }
    }

    /// Mean and scale for group `k` in `pass`.
    ///
    /// `prev` holds groups `0..k` (`[B, offset(k), h, w]`, ignored for
    /// `k = 0`). `spatial_known` holds group `k` itself and is only read at
    /// anchor cells, and only for the non-anchor pass. Outputs are
    /// `[B, size(k), h, w]` and are meaningful at the pass's cells.
    pub fn entropy_params<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        prev: Option<Var<'g, T>>,
        spatial_known: Option<Var<'g, T>>,
        hyper: Var<'g, T>,
        k: usize,
        pass: Pass,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        if k >= NUM_GROUPS {
            return Err(Error::Usage(format!("group index {k} out of range")));
        }
        let hs = hyper.shape();
        if hs.len() != 4 || hs[1] != self.hyper_channels {
            return Err(Error::Shape(format!(
                "hyper context must be [B, {}, h, w], got {hs:?}",
                self.hyper_channels
            )));
        }
        let (b, h, w) = (hs[0], hs[2], hs[3]);
        let g = self.layout.size(k);
        let check = |what: &str, v: &Var<'g, T>, c: usize| -> Result<()> {
            if v.shape() != [b, c, h, w] {
                return Err(Error::Shape(format!("{what}: expected {:?}, got {:?}", [b, c, h, w], v.shape())));
            }
            Ok(())
        };
        let nets = &self.groups[k];
        let graph = p.graph();

        let mut parts = vec![hyper];
        if let Some((c0, c1)) = &nets.channel {
            let prev = prev.ok_or_else(|| Error::Usage(format!("group {k} needs the earlier groups")))?;
            check("previous groups", &prev, self.layout.offset(k))?;
            parts.push(c1.forward(p, c0.forward(p, prev).relu()));
        }
        let spatial = match pass {
            Pass::Anchor => graph.constant(Tensor::zeros(&[b, 2 * g, h, w])),
            Pass::NonAnchor => {
                let known = spatial_known
                    .ok_or_else(|| Error::Usage("non-anchor pass needs the decoded anchors".into()))?;
                check("spatial context", &known, g)?;
                let masked = known.mul_const(&anchor_mask_tensor(h, w));
                nets.spatial.forward(p, masked)
            }
        };
        parts.push(spatial);

        let x = Var::cat(&parts, 1);
        let x = nets.aggregate[0].forward(p, x).relu();
        let x = nets.aggregate[1].forward(p, x).relu();
        let out = nets.aggregate[2].forward(p, x);
        let mu = out.narrow(1, 0, g);
        let sigma = out.narrow(1, g, g).softplus().add_scalar(T::c(SIGMA_MIN));
        Ok((mu, sigma))
    }
}

/// Result of entropy coding one latent.
#[derive(Clone, Debug)]
pub struct LatentCode {
    /// Integer symbols `round(y - mu)`, laid out like the latent `[M, h, w]`.
    pub symbols: Vec<i32>,
    /// Dequantised latent `symbols + mu`, `[1, M, h, w]`.
    pub y_hat: Tensor<f32>,
    /// One stream per group and pass.
    pub streams: Vec<Vec<u8>>,
    /// Cost of the symbols under the quantised tables.
    pub table_bits: f64,
}

/// Parameter source for the decoders: `(group, pass, current latent)` to
/// `(mu, sigma)` for that group, each `[1, size, h, w]`.
pub trait ParamsFn: FnMut(usize, Pass, &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {}
impl<F: FnMut(usize, Pass, &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)>> ParamsFn for F {}

/// Evaluate [`ContextModel::entropy_params`] on a detached copy of a
/// partially decoded latent `[1, M, h, w]`.
pub fn params_from_state(
    model: &ContextModel,
    params: &ParamStore<f32>,
    hyper: &Tensor<f32>,
    state: &Tensor<f32>,
    k: usize,
    pass: Pass,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let graph = Graph::new();
    let p = Bound::new(&graph, params, false);
    let layout = model.layout();
    let prev = (k > 0).then(|| graph.constant(state.narrow(1, 0, layout.offset(k))));
    let own = graph.constant(state.narrow(1, layout.offset(k), layout.size(k)));
    let (mu, sigma) = model.entropy_params(&p, prev, Some(own), graph.constant(hyper.clone()), k, pass)?;
    let (mu, sigma) = (mu.value(), sigma.value());
    Ok(((*mu).clone(), (*sigma).clone()))
}

fn latent_dims(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[1, m, h, w] => Ok((m, h, w)),
        s => Err(Error::Shape(format!("expected a single latent [1, M, h, w], got {s:?}"))),
    }
}

/// Quantise and code `y` (`[1, M, h, w]`) pass by pass.
pub fn encode_latent(
    model: &ContextModel,
    params: &ParamStore<f32>,
    hyper: &Tensor<f32>,
    y: &Tensor<f32>,
) -> Result<LatentCode> {
    let (m, h, w) = latent_dims(y)?;
    let layout = model.layout().clone();
    let tables = ScaleTable::get();
    let mut state = Tensor::zeros(&[1, m, h, w]);
    let mut symbols = vec![0i32; m * h * w];
    let mut streams = Vec::with_capacity(2 * NUM_GROUPS);
    let mut table_bits = 0.0;
    for k in 0..NUM_GROUPS {
        for pass in Pass::BOTH {
            let (mu, sigma) = params_from_state(model, params, hyper, &state, k, pass)?;
            let mut enc = RangeEncoder::new();
            let positions = pass_positions(h, w, pass);
            for gc in 0..layout.size(k) {
                let c = layout.offset(k) + gc;
                for &(i, j) in &positions {
                    let at = gc * h * w + i * w + j;
                    let mu_v = mu.data()[at];
                    let residual = (y.data()[c * h * w + i * w + j] - mu_v).round();
                    let s = residual.clamp(-1e9, 1e9) as i32;
                    let table = tables.table_for(sigma.data()[at] as f64);
                    encode_symbol(&mut enc, table, s);
                    table_bits += symbol_cost_bits(table, s);
                    symbols[c * h * w + i * w + j] = s;
                    state.data_mut()[c * h * w + i * w + j] = s as f32 + mu_v;
                }
            }
            streams.push(enc.finish());
        }
    }
    Ok(LatentCode {
        symbols,
        y_hat: state,
        streams,
        table_bits,
    })
}

fn check_streams(streams: &[Vec<u8>]) -> Result<()> {
    if streams.len() != 2 * NUM_GROUPS {
        return Err(BitstreamError::Corrupt("wrong number of latent streams").into());
    }
    Ok(())
}

/// Two-pass parallel decoder: one parameter evaluation per group and pass.
/// Returns the symbols and the dequantised latent.
pub fn decode_latent(
    layout: &GroupLayout,
    shape: (usize, usize),
    streams: &[Vec<u8>],
    mut params_fn: impl ParamsFn,
) -> Result<(Vec<i32>, Tensor<f32>)> {
    check_streams(streams)?;
    let (h, w) = shape;
    let m = layout.total();
    let tables = ScaleTable::get();
    let mut state = Tensor::zeros(&[1, m, h, w]);
    let mut symbols = vec![0i32; m * h * w];
    for k in 0..NUM_GROUPS {
        for pass in Pass::BOTH {
            let (mu, sigma) = params_fn(k, pass, &state)?;
            let mut dec = RangeDecoder::new(&streams[2 * k + pass.index()]);
            let positions = pass_positions(h, w, pass);
            for gc in 0..layout.size(k) {
                let c = layout.offset(k) + gc;
                for &(i, j) in &positions {
                    let at = gc * h * w + i * w + j;
                    let s = decode_symbol(&mut dec, tables.table_for(sigma.data()[at] as f64))?;
                    symbols[c * h * w + i * w + j] = s;
                    state.data_mut()[c * h * w + i * w + j] = s as f32 + mu.data()[at];
                }
            }
            dec.finish()?;
        }
    }
    Ok((symbols, state))
}

/// Reference decoder that re-evaluates the parameters before every single
/// symbol from the whole partially decoded latent. It relies on the
/// parameter networks' own masking for causality, so agreement with
/// [`decode_latent`] checks that masking.
pub fn serial_reference_decode(
    layout: &GroupLayout,
    shape: (usize, usize),
    streams: &[Vec<u8>],
    mut params_fn: impl ParamsFn,
) -> Result<(Vec<i32>, Tensor<f32>)> {
    check_streams(streams)?;
    let (h, w) = shape;
    let m = layout.total();
    let tables = ScaleTable::get();
    let mut state = Tensor::zeros(&[1, m, h, w]);
    let mut symbols = vec![0i32; m * h * w];
    for k in 0..NUM_GROUPS {
        for pass in Pass::BOTH {
            let mut dec = RangeDecoder::new(&streams[2 * k + pass.index()]);
            let positions = pass_positions(h, w, pass);
            for gc in 0..layout.size(k) {
                let c = layout.offset(k) + gc;
                for &(i, j) in &positions {
                    let (mu, sigma) = params_fn(k, pass, &state)?;
                    let at = gc * h * w + i * w + j;
                    let s = decode_symbol(&mut dec, tables.table_for(sigma.data()[at] as f64))?;
                    symbols[c * h * w + i * w + j] = s;
                    state.data_mut()[c * h * w + i * w + j] = s as f32 + mu.data()[at];
                }
            }
            dec.finish()?;
        }
    }
    Ok((symbols, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_model() -> (ContextModel, ParamStore<f32>) {
        let cfg = CodecConfig::toy();
        let model = ContextModel::new(&cfg).unwrap();
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rand_chacha::ChaCha8Rng::seed_from_u64(11));
        (model, store)
    }

    #[test]
    fn default_layouts() {
        assert_eq!(make_group_layout(80).unwrap().sizes(), &[8, 8, 16, 16, 32]);
        assert_eq!(make_group_layout(320).unwrap().sizes(), &[16, 16, 32, 64, 192]);
        assert!(make_group_layout(96).is_err());
        let l = GroupLayout::new(vec![1, 2, 3, 4, 5]).unwrap();
        assert_eq!((l.offset(4), l.total()), (10, 15));
        assert!(GroupLayout::new(vec![1, 0, 3, 4, 5]).is_err());
    }

    #[test]
    fn mask_counts() {
        for (h, w, anchors) in [(1, 1, 1), (2, 2, 2), (3, 3, 5), (4, 7, 14)] {
            let (a, n) = checkerboard_masks(h, w);
            assert_eq!(a.iter().filter(|&&x| x).count(), anchors);
            assert!(a.iter().zip(&n).all(|(x, y)| x != y));
            assert!(a[0]);
        }
    }

    #[test]
    fn anchor_params_ignore_spatial_input_and_clamp_sigma() {
        let (model, store) = toy_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let hyper = Tensor::zeros(&[1, 160, 3, 3]);
        let a = Tensor::randn(&[1, 80, 3, 3], 2.0, &mut rng);
        let b = Tensor::randn(&[1, 80, 3, 3], 2.0, &mut rng);
        let pa = params_from_state(&model, &store, &hyper, &a, 0, Pass::Anchor).unwrap();
        let pb = params_from_state(&model, &store, &hyper, &b, 0, Pass::Anchor).unwrap();
        assert_eq!(pa, pb);
        assert!(pa.1.data().iter().all(|&s| s >= SIGMA_MIN as f32));
        assert!(pa.0.all_finite());
    }

    #[test]
    fn round_trip_small_grids() {
        let (model, store) = toy_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for (h, w) in [(1, 1), (2, 3), (4, 4)] {
            let hyper = Tensor::randn(&[1, 160, h, w], 1.0, &mut rng);
            let y = Tensor::randn(&[1, 80, h, w], 3.0, &mut rng);
            let code = encode_latent(&model, &store, &hyper, &y).unwrap();
            let pf = |k, pass, s: &Tensor<f32>| params_from_state(&model, &store, &hyper, s, k, pass);
            let (sym, y_hat) = decode_latent(model.layout(), (h, w), &code.streams, pf).unwrap();
            assert_eq!(sym, code.symbols);
            assert_eq!(y_hat, code.y_hat);
            let (sym2, _) = serial_reference_decode(model.layout(), (h, w), &code.streams, pf).unwrap();
            assert_eq!(sym2, code.symbols);
        }
    }
}
