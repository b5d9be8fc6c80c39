//! Full-reference quality metrics on `[3, H, W]` images in `[0, 1]`.

use crate::error::{Error, Result};
use crate::eval_io::image::image_dims;
use crate::tensor::Tensor;

/// Reported PSNR for identical images, and the upper clamp.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / MSE)` in dB, at most [`PSNR_CAP`].
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    same_image_shape(x, y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / x.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn same_image_shape(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(usize, usize)> {
    let dims = image_dims(x)?;
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(dims)
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WIN: usize = 11;
const WIN_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Smallest image side accepted by [`ms_ssim`]: the 11-tap window must
/// still fit after four halvings.
pub const MS_SSIM_MIN_SIDE: usize = (WIN - 1) * 16 + 1;

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; WIN] {
    let mut w = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WIN_SIGMA * WIN_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// One channel plane.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable Gaussian filter without padding.
    fn filter(&self, win: &[f64; WIN]) -> Plane {
        let ow = self.w - WIN + 1;
        let oh = self.h - WIN + 1;
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = (0..WIN).map(|k| win[k] * self.data[y * self.w + x + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..WIN).map(|k| win[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, data: out }
    }

    /// 2x2 average pooling; an odd side gets one zero row or column of
    /// padding on each end and windows always divide by four.
    fn downsample(&self) -> Plane {
        let (py, px) = (self.h % 2, self.w % 2);
        let oh = (self.h + 2 * py - 2) / 2 + 1;
        let ow = (self.w + 2 * px - 2) / 2 + 1;
        let at = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
                0.0
            } else {
                self.data[y as usize * self.w + x as usize]
            }
        };
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let y0 = (2 * y) as isize - py as isize;
                let x0 = (2 * x) as isize - px as isize;
                out[y * ow + x] = (at(y0, x0) + at(y0, x0 + 1) + at(y0 + 1, x0) + at(y0 + 1, x0 + 1)) / 4.0;
            }
        }
        Plane { h: oh, w: ow, data: out }
    }
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(x: &Plane, y: &Plane, win: &[f64; WIN]) -> (f64, f64) {
    let mu1 = x.filter(win);
    let mu2 = y.filter(win);
    let s11 = x.map2(x, |a, b| a * b).filter(win);
    let s22 = y.map2(y, |a, b| a * b).filter(win);
    let s12 = x.map2(y, |a, b| a * b).filter(win);
    let n = mu1.data.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (m1, m2) = (mu1.data[i], mu2.data[i]);
        let v1 = s11.data[i] - m1 * m1;
        let v2 = s22.data[i] - m2 * m2;
        let v12 = s12.data[i] - m1 * m2;
        let c = (2.0 * v12 + C2) / (v1 + v2 + C2);
        cs += c;
        ssim += (2.0 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1) * c;
    }
    (ssim / n as f64, cs / n as f64)
}

/// Five-scale MS-SSIM with an 11-tap Gaussian window (sigma 1.5), valid
/// filtering and 2x2 average pooling between scales, averaged over
/// channels. Negative per-scale terms are clipped to zero.
pub fn ms_ssim(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
    let (h, w) = same_image_shape(x, y)?;
    if h.min(w) < MS_SSIM_MIN_SIDE {
        return Err(Error::Data(format!(
            "MS-SSIM needs both sides of at least {MS_SSIM_MIN_SIDE} pixels, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let plane = |t: &Tensor<f32>, c: usize| Plane {
        h,
        w,
        data: t.data()[c * h * w..(c + 1) * h * w].iter().map(|&v| v as f64).collect(),
    };
    let mut total = 0.0;
    for c in 0..3 {
        let (mut a, mut b) = (plane(x, c), plane(y, c));
        let mut value = 1.0;
        for (level, &weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_cs(&a, &b, &win);
            if level + 1 < MS_SSIM_WEIGHTS.len() {
                value *= cs.max(0.0).powf(weight);
                a = a.downsample();
                b = b.downsample();
            } else {
                value *= ssim.max(0.0).powf(weight);
            }
        }
        total += value;
    }
    Ok(total / 3.0)
}
