//! 2-D convolution and transposed convolution via im2col + GEMM.

use super::Var;
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Real, Tensor};

/// Output height/width of a transposed convolution.
pub fn conv_transpose_out(h: usize, w: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> (usize, usize) {
    (
        (h - 1) * stride + k + out_pad - 2 * pad,
        (w - 1) * stride + k + out_pad - 2 * pad,
    )
}

fn bias_grad<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = g.dims4();
    let mut out = vec![T::zero(); c];
    let d = g.data();
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            let base = (bi * c + ci) * h * w;
            *o += d[base..base + h * w].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], out)
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (ci, &bv) in bias.iter().enumerate() {
        for v in &mut out[ci * plane..(ci + 1) * plane] {
            *v += bv;
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    /// Cross-correlation of `self` (`[B, Ci, H, W]`) with `weight`
    /// (`[Co, Ci, kh, kw]`), zero padding `pad` on every side.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (b, ci, h, wd) = x.dims4();
        let (co, wci, kh, kw) = w.dims4();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
        let geom = ConvGeom { kh, kw, stride, pad };
        let (oh, ow) = geom.out_size(h, wd);
        let kdim = ci * kh * kw;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let bias_val = bias.map(|v| v.value());

        let mut out = vec![T::zero(); b * co * oh * ow];
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * oh * ow] };
        for bi in 0..b {
            let xb = &x.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let cols: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, ci, h, wd, geom, &mut col);
                &col
            };
            let ob = &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow];
            gemm(false, false, co, oh * ow, kdim, T::one(), w.data(), cols, T::zero(), ob);
            if let Some(bv) = &bias_val {
                add_bias(ob, bv.data(), oh * ow);
            }
        }
        let out = Tensor::from_vec(&[b, co, oh, ow], out);

        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            inputs.push(bv);
        }
        self.graph.record(out, &inputs, move |g, need| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![T::zero(); b * ci * h * wd]);
            let mut dw = need[1].then(|| vec![T::zero(); co * kdim]);
            let mut col = vec![T::zero(); if pointwise { 0 } else { kdim * oh * ow }];
            let mut dcol = vec![T::zero(); if pointwise { 0 } else { kdim * oh * ow }];
            for bi in 0..b {
                let gb = &gd[bi * co * oh * ow..(bi + 1) * co * oh * ow];
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                    let cols: &[T] = if pointwise {
                        xb
                    } else {
                        im2col(xb, ci, h, wd, geom, &mut col);
                        &col
                    };
                    gemm(false, true, co, kdim, oh * ow, T::one(), gb, cols, T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                    if pointwise {
                        gemm(true, false, kdim, oh * ow, co, T::one(), w.data(), gb, T::zero(), dxb);
                    } else {
                        gemm(true, false, kdim, oh * ow, co, T::one(), w.data(), gb, T::zero(), &mut dcol);
                        col2im(&dcol, ci, h, wd, geom, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_vec(&[b, ci, h, wd], d)),
                dw.map(|d| Tensor::from_vec(&[co, ci, kh, kw], d)),
            ];
            if need.len() == 3 {
                grads.push(need[2].then(|| bias_grad(g)));
            }
            grads
        })
    }

    /// Transposed convolution of `self` (`[B, Ci, H, W]`) with `weight`
    /// (`[Ci, Co, kh, kw]`); the adjoint of [`Var::conv2d`] with the same
    /// stride and padding, plus `out_pad` extra rows/columns at the far edge.
    pub fn conv_transpose2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (b, ci, h, wd) = x.dims4();
        let (wci, co, kh, kw) = w.dims4();
        assert_eq!(ci, wci, "conv_transpose2d: input has {ci} channels, kernel expects {wci}");
        assert!(out_pad < stride.max(1) || out_pad == 0, "output padding must be < stride");
        let geom = ConvGeom { kh, kw, stride, pad };
        let (oh, ow) = conv_transpose_out(h, wd, kh, stride, pad, out_pad);
        debug_assert_eq!(geom.out_size(oh, ow), (h, wd));
        let kdim = co * kh * kw;
        let bias_val = bias.map(|v| v.value());

        let mut out = vec![T::zero(); b * co * oh * ow];
        let mut col = vec![T::zero(); kdim * h * wd];
        for bi in 0..b {
            let xb = &x.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            gemm(true, false, kdim, h * wd, ci, T::one(), w.data(), xb, T::zero(), &mut col);
            let ob = &mut out[bi * co * oh * ow..(bi + 1) * co * oh * ow];
            col2im(&col, co, oh, ow, geom, ob);
            if let Some(bv) = &bias_val {
                add_bias(ob, bv.data(), oh * ow);
            }
        }
        let out = Tensor::from_vec(&[b, co, oh, ow], out);

        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            inputs.push(bv);
        }
        self.graph.record(out, &inputs, move |g, need| {
            let gd = g.data();
            let mut dx = need[0].then(|| vec![T::zero(); b * ci * h * wd]);
            let mut dw = need[1].then(|| vec![T::zero(); ci * kdim]);
            let mut gcol = vec![T::zero(); kdim * h * wd];
            for bi in 0..b {
                let gb = &gd[bi * co * oh * ow..(bi + 1) * co * oh * ow];
                im2col(gb, co, oh, ow, geom, &mut gcol);
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                    gemm(false, false, ci, h * wd, kdim, T::one(), w.data(), &gcol, T::zero(), dxb);
                }
                if let Some(dw) = dw.as_mut() {
                    let xb = &x.data()[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                    gemm(false, true, ci, kdim, h * wd, T::one(), xb, &gcol, T::one(), dw);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::from_vec(&[b, ci, h, wd], d)),
                dw.map(|d| Tensor::from_vec(&[ci, co, kh, kw], d)),
            ];
            if need.len() == 3 {
                grads.push(need[2].then(|| bias_grad(g)));
            }
            grads
        })
    }
}
