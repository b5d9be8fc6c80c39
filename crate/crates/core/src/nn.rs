//! Named parameter storage and the small set of layers the networks use.
//!
//! Layers are plain descriptors (name, shape, stride); their weights live in
//! a [`ParamStore`] under `"{name}.weight"` / `"{name}.bias"`. For each
//! forward pass the store is bound into a [`Graph`], which yields a
//! [`Bound`] view from which layers look up their variables.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Parameters keyed by canonical dotted name, kept in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Same names, all-zero tensors.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, prefix stripped.
    pub fn subset(&self, prefix: &str) -> Self {
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Insert every entry of `other` with `prefix` prepended.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }
}

/// A [`ParamStore`] placed on a graph.
pub struct Bound<'g, T: Real> {
    graph: &'g Graph<T>,
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    /// Bind every parameter; `tracked` decides whether gradients flow into
    /// them.
    pub fn new(graph: &'g Graph<T>, store: &ParamStore<T>, tracked: bool) -> Self {
        let vars = store
            .iter()
            .map(|(k, v)| {
                let var = if tracked {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.to_string(), var)
            })
            .collect();
        Self { graph, vars }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn get(&self, name: &str) -> Var<'g, T> {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'g, T>> {
        self.vars.get(name).copied()
    }

    /// Replace one bound variable, e.g. with a reparameterised weight.
    pub fn set(&mut self, name: &str, var: Var<'g, T>) {
        self.vars.insert(name.to_string(), var);
    }

    /// Gradients for every bound parameter, zero where unreached.
    pub fn grads(&self, grads: &Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, &v) in &self.vars {
            out.insert(k.clone(), grads.get_or_zeros(v));
        }
        out
    }
}

/// Uniform init with variance `gain / fan_in`.
fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<f32> {
    let bound = (3.0 * gain / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Square-kernel convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding.
    pub fn new(name: impl Into<String>, ci: usize, co: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            ci,
            co,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, gain: f64, rng: &mut R) {
        let fan_in = self.ci * self.k * self.k;
        store.insert(
            self.weight_name(),
            init_uniform(&[self.co, self.ci, self.k, self.k], fan_in, gain, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.co]));
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(
            p.get(&self.weight_name()),
            Some(p.get(&self.bias_name())),
            self.stride,
            self.pad,
        )
    }
}

/// Square-kernel transposed convolution that upsamples by `stride`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, ci: usize, co: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            ci,
            co,
            k,
            stride,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, gain: f64, rng: &mut R) {
        // each output pixel sees about ci * k^2 / stride^2 taps
        let fan_in = (self.ci * self.k * self.k / (self.stride * self.stride)).max(1);
        store.insert(
            self.weight_name(),
            init_uniform(&[self.ci, self.co, self.k, self.k], fan_in, gain, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.co]));
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose2d(
            p.get(&self.weight_name()),
            Some(p.get(&self.bias_name())),
            self.stride,
            self.k / 2,
            self.stride - 1,
        )
    }
}

/// `x + conv1x1(relu(conv3x3(relu(conv1x1(x)))))` with a halved middle width.
#[derive(Clone, Debug)]
pub struct ResBottleneck {
    reduce: Conv2d,
    mid: Conv2d,
    expand: Conv2d,
}

impl ResBottleneck {
    pub fn new(name: &str, channels: usize) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            reduce: Conv2d::new(format!("{name}.reduce"), channels, hidden, 1, 1),
            mid: Conv2d::new(format!("{name}.mid"), hidden, hidden, 3, 1),
            expand: Conv2d::new(format!("{name}.expand"), hidden, channels, 1, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore<f32>, rng: &mut R) {
        self.reduce.init(store, 2.0, rng);
        self.mid.init(store, 2.0, rng);
        // small residual branch at start keeps the stack close to identity
        self.expand.init(store, 0.1, rng);
    }

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.reduce.forward(p, x).relu();
        let h = self.mid.forward(p, h).relu();
        x + self.expand.forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bound_grads_cover_every_parameter() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new("a", 2, 3, 3, 1);
        conv.init(&mut store, 1.0, &mut rng);
        store.insert("unused", Tensor::ones(&[2]));
        let store = store.cast::<f64>();
        let g = Graph::new();
        let p = Bound::new(&g, &store, true);
        let x = g.constant(Tensor::ones(&[1, 2, 4, 4]));
        let loss = conv.forward(&p, x).sum();
        let grads = p.grads(&g.backward(loss));
        assert!(grads.same_layout(&store));
        assert_eq!(grads.get("unused").unwrap().sum(), 0.0);
        // d sum / d bias = number of output pixels
        assert_eq!(grads.get("a.bias").unwrap().data(), &[16.0; 3]);
    }

    #[test]
    fn transposed_conv_doubles_resolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let up = ConvTranspose2d::new("up", 4, 2, 5, 2);
        up.init(&mut store, 1.0, &mut rng);
        let g = Graph::new();
        let p = Bound::new(&g, &store, false);
        let y = up.forward(&p, g.constant(Tensor::ones(&[1, 4, 3, 5])));
        assert_eq!(y.shape(), vec![1, 2, 6, 10]);
    }

    #[test]
    fn subset_and_prefix_round_trip() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x.w", Tensor::ones(&[2]));
        let mut b = ParamStore::new();
        b.extend_prefixed("codec.", &a);
        assert_eq!(b.subset("codec."), a);
        assert!(b.subset("disc.").is_empty());
    }
}
