//! 8-bit image files to and from `[3, H, W]` tensors in `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decode any supported file to RGB; gray images are replicated to three
/// channels and alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data))
}

/// `round(255 v)` clamped to `[0, 255]`, channel-interleaved.
pub fn to_rgb8(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = image_dims(img)?;
    let mut out = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            out[3 * p + c] = (img.data()[c * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((w, h, out))
}

pub fn from_rgb8(width: usize, height: usize, pixels: &[u8]) -> Result<Tensor<f32>> {
    if pixels.len() != 3 * width * height {
        return Err(Error::Data(format!(
            "{} bytes do not form a {width}x{height} RGB image",
            pixels.len()
        )));
    }
    let hw = width * height;
    let mut data = vec![0f32; 3 * hw];
    for (p, px) in pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, height, width], data))
}

/// Write as 8-bit RGB; the format follows the extension (PNG expected).
pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (w, h, raw) = to_rgb8(img)?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

/// Snap values to the 8-bit grid, as a save/load round trip would.
pub fn quantize_8bit(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
}

pub fn image_dims(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape() {
        &[3, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::Shape(format!("expected an image [3, H, W], got {s:?}"))),
    }
}

/// Extend `[C, H, W]` to the next multiple of `multiple` in both directions
/// by repeating the last row and column.
pub fn pad_replicate(img: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let [c, h, w] = img.shape() else {
        panic!("pad_replicate expects [C, H, W]");
    };
    let (c, h, w) = (*c, *h, *w);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    Tensor::from_fn(&[c, ph, pw], |idx| {
        let ch = idx / (ph * pw);
        let y = (idx / pw % ph).min(h - 1);
        let x = (idx % pw).min(w - 1);
        img.data()[ch * h * w + y * w + x]
    })
}

/// Top-left `h x w` window of `[C, H, W]`.
pub fn crop(img: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    img.narrow(1, 0, h).narrow(2, 0, w)
}
