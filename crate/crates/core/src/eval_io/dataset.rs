//! Training images and seed-deterministic batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval_io::image::{crop, load_image, pad_replicate, quantize_8bit};
use crate::tensor::Tensor;

/// In-memory images `[3, H, W]` with names, sorted by name.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    names: Vec<String>,
    images: Vec<Tensor<f32>>,
}

const EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "ppm", "tif"];

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

impl Dataset {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut ds = Self::default();
        for path in list_images(dir)? {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            ds.push(name, load_image(&path)?);
        }
        Ok(ds)
    }

    /// `n` procedural images of `size x size`, 8-bit quantised.
    pub fn synthetic<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Self {
        let mut ds = Self::default();
        for i in 0..n {
            ds.push(format!("synthetic_{i:04}.png"), synthetic_image(size, size, rng));
        }
        ds
    }

    pub fn push(&mut self, name: String, image: Tensor<f32>) {
        let at = self.names.partition_point(|n| *n < name);
        self.names.insert(at, name);
        self.images.insert(at, image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    /// First `n` images and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Self {
            names: self.names[r.clone()].to_vec(),
            images: self.images[r].to_vec(),
        };
        (part(0..n), part(n..self.len()))
    }

    /// Stack random `crop x crop` windows of the given images into
    /// `[B, 3, crop, crop]`; smaller images are edge-padded first.
    pub fn crops<R: Rng + ?Sized>(&self, indices: &[usize], crop_size: usize, rng: &mut R) -> Tensor<f32> {
        let parts: Vec<Tensor<f32>> = indices
            .iter()
            .map(|&i| {
                let img = &self.images[i];
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let img = if h < crop_size || w < crop_size {
                    pad_replicate(img, crop_size)
                } else {
                    img.clone()
                };
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let y = rng.random_range(0..=h - crop_size);
                let x = rng.random_range(0..=w - crop_size);
                crop(&img.narrow(1, y, h - y).narrow(2, x, w - x), crop_size, crop_size)
                    .reshape(&[1, 3, crop_size, crop_size])
            })
            .collect();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        Tensor::cat(&refs, 0)
    }
}

/// Random permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Procedural image with smooth shading, flat shapes with hard edges,
/// oriented gratings and fine grain, so that both structure and texture
/// are present.
pub fn synthetic_image<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Tensor<f32> {
    let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (c0, c1) = (color(), color());
    let angle = rng.random::<f32>() * std::f32::consts::TAU;
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = ((h * h + w * w) as f32).sqrt();
    let mut img = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f32 * ca + y as f32 * sa) / diag + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * h * w + y * w + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    enum Shape {
        Ellipse,
        Rect,
        Grating { freq: f32, dir: (f32, f32), amp: f32 },
    }
    let n_shapes = rng.random_range(4..10);
    for _ in 0..n_shapes {
        let cy = rng.random::<f32>() * h as f32;
        let cx = rng.random::<f32>() * w as f32;
        let ry = (0.08 + 0.3 * rng.random::<f32>()) * h as f32;
        let rx = (0.08 + 0.3 * rng.random::<f32>()) * w as f32;
        let col = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let shape = match rng.random_range(0..3) {
            0 => Shape::Ellipse,
            1 => Shape::Rect,
            _ => {
                let a = rng.random::<f32>() * std::f32::consts::PI;
                Shape::Grating {
                    freq: 0.15 + 0.9 * rng.random::<f32>(),
                    dir: (a.cos(), a.sin()),
                    amp: 0.1 + 0.2 * rng.random::<f32>(),
                }
            }
        };
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                let inside = match shape {
                    Shape::Rect => dy.abs() < 1.0 && dx.abs() < 1.0,
                    _ => dy * dy + dx * dx < 1.0,
                };
                if !inside {
                    continue;
                }
                for c in 0..3 {
                    let v = &mut img[c * h * w + y * w + x];
                    *v = match shape {
                        Shape::Grating { freq, dir, amp } => {
                            *v + amp * (freq * (x as f32 * dir.0 + y as f32 * dir.1)).sin()
                        }
                        _ => col[c],
                    };
                }
            }
        }
    }

    let grain = 0.01 + 0.04 * rng.random::<f32>();
    for y in 0..h {
        for x in 0..w {
            let n: f32 = rng.sample::<f32, _>(StandardNormal) * grain;
            for c in 0..3 {
                img[c * h * w + y * w + x] += n;
            }
        }
    }
    quantize_8bit(&Tensor::from_vec(&[3, h, w], img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_image(40, 30, &mut ChaCha8Rng::seed_from_u64(1));
        let b = synthetic_image(40, 30, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 40, 30]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crops_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ds = Dataset::default();
        ds.push("b".into(), synthetic_image(80, 70, &mut rng));
        ds.push("a".into(), synthetic_image(20, 20, &mut rng));
        assert_eq!(ds.name(0), "a");
        let batch = ds.crops(&[0, 1, 1], 64, &mut rng);
        assert_eq!(batch.shape(), &[3, 3, 64, 64]);
        // the small image is edge padded, so its last row repeats
        let img0 = batch.narrow(0, 0, 1);
        assert_eq!(img0.narrow(2, 63, 1), img0.narrow(2, 62, 1));
    }

    #[test]
    fn directory_listing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(list_images(dir.path()), Err(Error::Data(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for name in ["z.png", "a.png"] {
            crate::eval_io::image::save_image(&synthetic_image(8, 8, &mut rng), &dir.path().join(name)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let ds = Dataset::from_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.name(0), "a.png");
    }
}
