//! Fused operations with hand-written backward passes: patch-wise Gram
//! matrices, channel unit-normalisation and spectral weight normalisation.

use super::Var;
use crate::tensor::{gemm, Real, Tensor};

/// Spatial tiling of an `h x w` map into `patch x patch` tiles; edge tiles
/// keep whatever remains.
pub(crate) fn patch_grid(h: usize, w: usize, patch: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut tiles = Vec::new();
    let mut y = 0;
    while y < h {
        let ph = patch.min(h - y);
        let mut x = 0;
        while x < w {
            let pw = patch.min(w - x);
            tiles.push((y, x, ph, pw));
            x += patch;
        }
        y += patch;
    }
    tiles
}

fn gather_patch<T: Real>(plane: &[T], c: usize, h: usize, w: usize, tile: (usize, usize, usize, usize), out: &mut Vec<T>) {
    let (y0, x0, ph, pw) = tile;
    out.clear();
    for ci in 0..c {
        for y in y0..y0 + ph {
            let row = ci * h * w + y * w;
            out.extend_from_slice(&plane[row + x0..row + x0 + pw]);
        }
    }
}

fn scatter_patch<T: Real>(plane: &mut [T], c: usize, h: usize, w: usize, tile: (usize, usize, usize, usize), src: &[T]) {
    let (y0, x0, ph, pw) = tile;
    let mut k = 0;
    for ci in 0..c {
        for y in y0..y0 + ph {
            let row = ci * h * w + y * w;
            for v in &mut plane[row + x0..row + x0 + pw] {
                *v += src[k];
                k += 1;
            }
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// Gram matrices of every `patch x patch` tile of an NCHW feature map.
    ///
    /// Output is `[B, P, C, C]` with `P` tiles in raster order. With
    /// `normalize`, each Gram matrix is divided by its tile's area.
    pub fn patched_gram(self, patch: usize, normalize: bool) -> Var<'g, T> {
        assert!(patch > 0, "patch size must be positive");
        let f = self.value();
        let (b, c, h, w) = f.dims4();
        let tiles = patch_grid(h, w, patch);
        let p = tiles.len();
        let mut out = vec![T::zero(); b * p * c * c];
        let mut buf = Vec::new();
        for bi in 0..b {
            let plane = &f.data()[bi * c * h * w..(bi + 1) * c * h * w];
            for (ti, &tile) in tiles.iter().enumerate() {
                gather_patch(plane, c, h, w, tile, &mut buf);
                let area = tile.2 * tile.3;
                let alpha = if normalize { T::c(1.0 / area as f64) } else { T::one() };
                let o = &mut out[(bi * p + ti) * c * c..(bi * p + ti + 1) * c * c];
                gemm(false, true, c, c, area, alpha, &buf, &buf, T::zero(), o);
            }
        }
        let out = Tensor::from_vec(&[b, p, c, c], out);
        self.graph.record(out, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            let mut buf = Vec::new();
            let mut sym = vec![T::zero(); c * c];
            let mut dpatch = Vec::new();
            for bi in 0..b {
                let plane = &f.data()[bi * c * h * w..(bi + 1) * c * h * w];
                for (ti, &tile) in tiles.iter().enumerate() {
                    gather_patch(plane, c, h, w, tile, &mut buf);
                    let area = tile.2 * tile.3;
                    let alpha = if normalize { T::c(1.0 / area as f64) } else { T::one() };
                    let gg = &gd[(bi * p + ti) * c * c..(bi * p + ti + 1) * c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = gg[i * c + j] + gg[j * c + i];
                        }
                    }
                    dpatch.clear();
                    dpatch.resize(c * area, T::zero());
                    gemm(false, false, c, area, c, alpha, &sym, &buf, T::zero(), &mut dpatch);
                    scatter_patch(&mut dx[bi * c * h * w..(bi + 1) * c * h * w], c, h, w, tile, &dpatch);
                }
            }
            vec![Some(Tensor::from_vec(&[b, c, h, w], dx))]
        })
    }

    /// Divide each spatial position of an NCHW map by the L2 norm of its
    /// channel vector (plus `eps`).
    pub fn channel_normalize(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (b, c, h, w) = x.dims4();
        let hw = h * w;
        let xd = x.data();
        let mut norms = vec![T::zero(); b * hw];
        for bi in 0..b {
            for ci in 0..c {
                for s in 0..hw {
                    let v = xd[(bi * c + ci) * hw + s];
                    norms[bi * hw + s] += v * v;
                }
            }
        }
        for n in &mut norms {
            *n = n.sqrt();
        }
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                for s in 0..hw {
                    let i = (bi * c + ci) * hw + s;
                    out[i] = xd[i] / (norms[bi * hw + s] + eps);
                }
            }
        }
        let out = Tensor::from_vec(&[b, c, h, w], out);
        self.graph.record(out, &[self], move |g, _| {
            let gd = g.data();
            let xd = x.data();
            let mut dots = vec![T::zero(); b * hw];
            for bi in 0..b {
                for ci in 0..c {
                    for s in 0..hw {
                        let i = (bi * c + ci) * hw + s;
                        dots[bi * hw + s] += gd[i] * xd[i];
                    }
                }
            }
            let mut dx = vec![T::zero(); xd.len()];
            for bi in 0..b {
                for ci in 0..c {
                    for s in 0..hw {
                        let i = (bi * c + ci) * hw + s;
                        let n = norms[bi * hw + s];
                        let d = n + eps;
                        let mut v = gd[i] / d;
                        if n > T::zero() {
                            v -= dots[bi * hw + s] * xd[i] / (d * d * n);
                        }
                        dx[i] = v;
                    }
                }
            }
            vec![Some(Tensor::from_vec(&[b, c, h, w], dx))]
        })
    }

    /// `W / (u^T W v)` where `W` is `self` flattened to `[out, rest]` and
    /// `u`, `v` are fixed (non-differentiated) singular vector estimates.
    pub fn spectral_normalized(self, u: &[T], v: &[T]) -> Var<'g, T> {
        let wt = self.value();
        let rows = wt.shape()[0];
        let cols = wt.numel() / rows;
        assert_eq!(u.len(), rows, "left vector length");
        assert_eq!(v.len(), cols, "right vector length");
        let mut wv = vec![T::zero(); rows];
        gemm(false, false, rows, 1, cols, T::one(), wt.data(), v, T::zero(), &mut wv);
        let sigma: T = u.iter().zip(&wv).map(|(&a, &b)| a * b).sum();
        let out = wt.scale(T::one() / sigma);
        let (u, v) = (u.to_vec(), v.to_vec());
        self.graph.record(out, &[self], move |g, _| {
            // d/dW (W / s) with s = u^T W v:  G/s - <G, W>/s^2 * u v^T
            let gw: T = g.data().iter().zip(wt.data()).map(|(&a, &b)| a * b).sum();
            let k = gw / (sigma * sigma);
            let mut dw = g.scale(T::one() / sigma);
            let d = dw.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    d[r * cols + c] -= k * u[r] * v[c];
                }
            }
            vec![Some(dw)]
        })
    }
}

/// Power iteration on `w` (flattened to `[out, rest]`).
///
/// Runs `iters` rounds starting from `u`, updating it in place, and returns
/// the matching right vector `v` and the estimate `sigma = u^T W v`. With
/// `iters == 0`, `v` is derived from the current `u` without changing it.
pub fn power_iteration<T: Real>(w: &Tensor<T>, u: &mut [T], iters: usize) -> (Vec<T>, T) {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    assert_eq!(u.len(), rows);
    let eps = T::c(1e-12);
    let normalize = |x: &mut [T]| {
        let n = x.iter().map(|&a| a * a).sum::<T>().sqrt();
        for a in x.iter_mut() {
            *a /= n + eps;
        }
    };
    let mut v = vec![T::zero(); cols];
    let mut wv = vec![T::zero(); rows];
    let right = |u: &[T], v: &mut [T]| {
        gemm(true, false, cols, 1, rows, T::one(), w.data(), u, T::zero(), v);
    };
    if iters == 0 {
        right(u, &mut v);
        normalize(&mut v);
    }
    for _ in 0..iters {
        right(u, &mut v);
        normalize(&mut v);
        gemm(false, false, rows, 1, cols, T::one(), w.data(), &v, T::zero(), &mut wv);
        u.copy_from_slice(&wv);
        normalize(u);
    }
    gemm(false, false, rows, 1, cols, T::one(), w.data(), &v, T::zero(), &mut wv);
    let sigma = u.iter().zip(&wv).map(|(&a, &b)| a * b).sum();
    (v, sigma)
}
