//! Elementwise, reduction and structural operations.

use std::f64::consts::{PI, SQRT_2};
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Var;
use crate::tensor::{broadcast_binary, Real, Tensor};

// Named methods back the operator impls below.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Real> Var<'g, T> {
    fn unary(
        self,
        value: Tensor<T>,
        local_grad: impl Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'g, T> {
        let x = self.value();
        self.graph.record(value, &[self], move |g, _| {
            vec![Some(local_grad(g, &x))]
        })
    }

    fn elementwise(self, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var<'g, T> {
        let value = self.value().map(f);
        self.unary(value, move |g, x| g.zip_map(x, |gi, xi| gi * df(xi)))
    }

    pub fn add(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(value, &[self, rhs], move |g, need| {
            vec![
                need[0].then(|| g.sum_to_shape(&sa)),
                need[1].then(|| g.sum_to_shape(&sb)),
            ]
        })
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record(value, &[self, rhs], move |g, need| {
            vec![
                need[0].then(|| g.sum_to_shape(&sa)),
                need[1].then(|| g.map(|v| -v).sum_to_shape(&sb)),
            ]
        })
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x * y);
        self.graph.record(value, &[self, rhs], move |g, need| {
            vec![
                need[0].then(|| broadcast_binary(g, &b, |u, v| u * v).sum_to_shape(a.shape())),
                need[1].then(|| broadcast_binary(g, &a, |u, v| u * v).sum_to_shape(b.shape())),
            ]
        })
    }

    pub fn div(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), rhs.value());
        let value = broadcast_binary(&a, &b, |x, y| x / y);
        self.graph.record(value, &[self, rhs], move |g, need| {
            vec![
                need[0].then(|| broadcast_binary(g, &b, |u, v| u / v).sum_to_shape(a.shape())),
                need[1].then(|| {
                    let ga = broadcast_binary(g, &a, |u, v| u * v);
                    let b2 = b.map(|v| v * v);
                    broadcast_binary(&ga, &b2, |u, v| -u / v).sum_to_shape(b.shape())
                }),
            ]
        })
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let value = self.value().map(|v| v + s);
        self.graph.record(value, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, s: T) -> Var<'g, T> {
        let value = self.value().map(|v| v * s);
        self.graph.record(value, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    /// Multiply by a constant tensor broadcast against `self` (masks, fixed weights).
    pub fn mul_const(self, c: &Tensor<T>) -> Var<'g, T> {
        let k = self.graph.constant(c.clone());
        self.mul(k)
    }

    pub fn square(self) -> Var<'g, T> {
        self.elementwise(|x| x * x, |x| x + x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let y = self.value().map(|x| x.sqrt());
        let y2 = y.clone();
        self.unary(y, move |g, _| g.zip_map(&y2, |gi, yi| gi / (yi + yi)))
    }

    pub fn exp(self) -> Var<'g, T> {
        let y = self.value().map(|x| x.exp());
        let y2 = y.clone();
        self.unary(y, move |g, _| g.zip_map(&y2, |gi, yi| gi * yi))
    }

    pub fn ln(self) -> Var<'g, T> {
        self.elementwise(|x| x.ln(), |x| x.recip())
    }

    pub fn abs(self) -> Var<'g, T> {
        self.elementwise(
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        self.elementwise(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x| if x > T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let y = self.value().map(sigmoid);
        let y2 = y.clone();
        self.unary(y, move |g, _| {
            g.zip_map(&y2, |gi, yi| gi * yi * (T::one() - yi))
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'g, T> {
        self.elementwise(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'g, T> {
        self.elementwise(softplus, sigmoid)
    }

    /// Standard normal CDF, evaluated through `erfc` in double precision.
    pub fn normal_cdf(self) -> Var<'g, T> {
        self.elementwise(
            |x| T::c(normal_cdf(x.f64())),
            |x| {
                let v = x.f64();
                T::c((-0.5 * v * v).exp() / (2.0 * PI).sqrt())
            },
        )
    }

    /// `max(x, lo)`; the gradient is zero where the bound is active.
    pub fn clamp_min(self, lo: T) -> Var<'g, T> {
        self.elementwise(
            move |x| x.max(lo),
            move |x| if x >= lo { T::one() } else { T::zero() },
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.graph.record(Tensor::scalar(v.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum().mul_scalar(T::c(1.0 / n as f64))
    }

    /// Sum over `dims`, keeping them as size-1 axes.
    pub fn sum_dims(self, dims: &[usize]) -> Var<'g, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = v.sum_dims_keep(dims);
        self.graph.record(out, &[self], move |g, _| {
            let ones = Tensor::<T>::ones(&shape);
            vec![Some(broadcast_binary(&ones, g, |_, gv| gv))]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let v = self.value();
        let old = v.shape().to_vec();
        let out = (*v).clone().reshape(shape);
        self.graph.record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&old))]
        })
    }

    /// Slice of `len` entries along `dim`.
    pub fn narrow(self, dim: usize, start: usize, len: usize) -> Var<'g, T> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let out = v.narrow(dim, start, len);
        self.graph.record(out, &[self], move |g, _| {
            let mut parts: Vec<Tensor<T>> = Vec::with_capacity(3);
            if start > 0 {
                let mut s = shape.clone();
                s[dim] = start;
                parts.push(Tensor::zeros(&s));
            }
            parts.push(g.clone());
            let tail = shape[dim] - start - len;
            if tail > 0 {
                let mut s = shape.clone();
                s[dim] = tail;
                parts.push(Tensor::zeros(&s));
            }
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            vec![Some(Tensor::cat(&refs, dim))]
        })
    }

    /// Concatenate along `dim`.
    pub fn cat(parts: &[Var<'g, T>], dim: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "cat of zero variables");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::cat(&refs, dim);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[dim]).collect();
        parts[0].graph.record(out, parts, move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let piece = n.then(|| g.narrow(dim, start, len));
                    start += len;
                    piece
                })
                .collect()
        })
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'g, T> {
        let v = self.value();
        let (b, c, h, w) = v.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let src = v.data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            for y in 0..oh {
                for x in 0..ow {
                    out[p * oh * ow + y * ow + x] = src[p * h * w + (y / factor) * w + x / factor];
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, oh, ow], out);
        self.graph.record(out, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for y in 0..oh {
                    for x in 0..ow {
                        dx[p * h * w + (y / factor) * w + x / factor] += gd[p * oh * ow + y * ow + x];
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[b, c, h, w], dx))]
        })
    }

    /// `round(x - offset) + offset` in the forward pass, identity gradient
    /// to `x` and none to `offset` (straight-through estimator).
    pub fn ste_round(self, offset: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let value = match offset {
            Some(o) => broadcast_binary(&x, &o.value(), |v, m| (v - m).round() + m),
            None => x.map(|v| v.round()),
        };
        match offset {
            Some(o) => self
                .graph
                .record(value, &[self, o], |g, _| vec![Some(g.clone()), None]),
            None => self.graph.record(value, &[self], |g, _| vec![Some(g.clone())]),
        }
    }
}

impl<'g, T: Real> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Real> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Real> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Real> Div for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}

impl<'g, T: Real> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        self.mul_scalar(-T::one())
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Standard normal CDF `0.5 * erfc(-x / sqrt(2))`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::super::{gradcheck, Graph};
    use super::*;

    fn sample(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn broadcast_arithmetic_gradients() {
        let a = sample(&[2, 3, 2, 2], 1);
        let b = sample(&[1, 3, 1, 1], 2).map(|v| v.abs() + 0.5);
        let err = gradcheck::check(&[a, b], 1e-6, |_, v| {
            ((v[0] * v[1]) + v[0] / v[1] - v[1]).square().mean()
        });
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn smooth_unary_gradients() {
        let a = sample(&[3, 4], 3);
        let err = gradcheck::check(&[a], 1e-6, |_, v| {
            let x = v[0];
            (x.silu() + x.softplus() + x.sigmoid() + x.normal_cdf() + x.exp().ln() + x.square().add_scalar(0.1).sqrt()).sum()
        });
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn structural_gradients() {
        let a = sample(&[1, 4, 2, 3], 4);
        let b = sample(&[1, 2, 2, 3], 5);
        let err = gradcheck::check(&[a, b], 1e-6, |_, v| {
            let c = Var::cat(&[v[0], v[1]], 1);
            let n = c.narrow(1, 1, 4).upsample_nearest(2);
            (n.square().sum_dims(&[1]) * n.narrow(1, 0, 1)).reshape(&[2, 12]).sum()
        });
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn ste_round_passes_identity_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![2.4, -1.6, 0.49]));
        let mu = g.leaf(Tensor::from_vec(&[3], vec![0.4, 0.0, 0.0]));
        let q = x.ste_round(Some(mu));
        assert_eq!(q.value().data(), &[2.4, -2.0, 0.0]);
        let grads = g.backward(q.sum());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(grads.get(mu).is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = (x.detach() * x).sum();
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn normal_cdf_tails() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!(normal_cdf(-30.0) > 0.0);
        assert!((normal_cdf(0.5) - normal_cdf(-0.5) - 0.382_924_922_548_026).abs() < 1e-12);
    }
}
