//! Per-image evaluation of a codec and rate-distortion summaries.
//!
//! Report CSV columns: `filename, bpp, psnr_db, ms_ssim, lpips`, then one
//! column per extra metric, one row per image sorted by file name, and a
//! final row named `mean`. `ms_ssim` is `NaN` for images too small for five
//! scales; means skip `NaN` entries.

use std::path::Path;

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::eval_io::dataset::Dataset;
use crate::eval_io::image::quantize_8bit;
use crate::eval_io::metrics::{ms_ssim, psnr, MS_SSIM_MIN_SIDE};
use crate::losses::{lpips_distance, FeatureExtractor};
use crate::tensor::Tensor;

/// A named full-reference metric, for scores beyond the built-in ones.
pub trait Metric {
    fn name(&self) -> &str;
    fn compute(&self, reference: &Tensor<f32>, reconstruction: &Tensor<f32>) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub filename: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub lpips: f64,
    pub extra: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub extra_names: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub mean: ReportRow,
}

const BASE_COLUMNS: [&str; 5] = ["filename", "bpp", "psnr_db", "ms_ssim", "lpips"];

fn nan_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.filter(|v| !v.is_nan()) {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl Report {
    pub fn new(extra_names: Vec<String>, mut rows: Vec<ReportRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("report has no images".into()));
        }
        if rows.iter().any(|r| r.extra.len() != extra_names.len()) {
            return Err(Error::Data("every row needs one value per extra metric".into()));
        }
        rows.sort_by(|a, b| a.filename.cmp(&b.filename));
        let col = |f: &dyn Fn(&ReportRow) -> f64| nan_mean(rows.iter().map(f));
        let mean = ReportRow {
            filename: "mean".into(),
            bpp: col(&|r| r.bpp),
            psnr_db: col(&|r| r.psnr_db),
            ms_ssim: col(&|r| r.ms_ssim),
            lpips: col(&|r| r.lpips),
            extra: (0..extra_names.len()).map(|i| col(&|r| r.extra[i])).collect(),
        };
        Ok(Self { extra_names, rows, mean })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = BASE_COLUMNS
            .iter()
            .copied()
            .chain(self.extra_names.iter().map(String::as_str))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let mut rec = vec![
                row.filename.clone(),
                row.bpp.to_string(),
                row.psnr_db.to_string(),
                row.ms_ssim.to_string(),
                row.lpips.to_string(),
            ];
            rec.extend(row.extra.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < BASE_COLUMNS.len() || header.iter().zip(BASE_COLUMNS).any(|(a, b)| a != b) {
            return Err(Error::Data(format!("not an evaluation report (columns {header:?})")));
        }
        let extra_names: Vec<String> = header.iter().skip(BASE_COLUMNS.len()).map(String::from).collect();
        let mut rows = Vec::new();
        let mut mean = None;
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or_default()
                    .parse()
                    .map_err(|_| Error::Data(format!("bad number in column {}", header.get(i).unwrap_or("?"))))
            };
            let row = ReportRow {
                filename: rec.get(0).unwrap_or_default().to_string(),
                bpp: num(1)?,
                psnr_db: num(2)?,
                ms_ssim: num(3)?,
                lpips: num(4)?,
                extra: (BASE_COLUMNS.len()..header.len()).map(num).collect::<Result<_>>()?,
            };
            if row.filename == "mean" {
                mean = Some(row);
            } else {
                rows.push(row);
            }
        }
        let report = Self::new(extra_names, rows)?;
        if mean.is_none() {
            return Err(Error::Data("report lacks its mean row".into()));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Compress, decompress and score every image. Reconstructions are
/// snapped to 8 bits, as they would be when saved.
pub fn evaluate_dataset(
    codec: &Codec,
    data: &Dataset,
    features: &FeatureExtractor,
    extra: &[&dyn Metric],
) -> Result<Report> {
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = data.image(i);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let bytes = codec.compress(x)?.bytes;
        let x_hat = quantize_8bit(&codec.decompress(&bytes)?);
        let ms = if h.min(w) >= MS_SSIM_MIN_SIDE {
            ms_ssim(x, &x_hat)?
        } else {
            f64::NAN
        };
        rows.push(ReportRow {
            filename: data.name(i).to_string(),
            bpp: (bytes.len() * 8) as f64 / (h * w) as f64,
            psnr_db: psnr(x, &x_hat)?,
            ms_ssim: ms,
            lpips: lpips_distance(features, x, &x_hat),
            extra: extra.iter().map(|m| m.compute(x, &x_hat)).collect::<Result<_>>()?,
        });
    }
    Report::new(extra.iter().map(|m| m.name().to_string()).collect(), rows)
}

/// [`evaluate_dataset`] over the images of a directory.
pub fn evaluate_model(
    codec: &Codec,
    image_dir: &Path,
    features: &FeatureExtractor,
    extra: &[&dyn Metric],
) -> Result<Report> {
    evaluate_dataset(codec, &Dataset::from_dir(image_dir)?, features, extra)
}

/// Rate-distortion points from the mean rows of several reports, sorted by
/// bpp: `series, bpp, psnr_db, ms_ssim, lpips`.
pub fn rd_curve_csv(reports: &[(String, Report)]) -> Result<String> {
    let mut points: Vec<(&str, &ReportRow)> = reports.iter().map(|(n, r)| (n.as_str(), &r.mean)).collect();
    points.sort_by(|a, b| a.1.bpp.total_cmp(&b.1.bpp));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "bpp", "psnr_db", "ms_ssim", "lpips"]).map_err(csv_err)?;
    for (name, m) in points {
        w.write_record([
            name.to_string(),
            m.bpp.to_string(),
            m.psnr_db.to_string(),
            m.ms_ssim.to_string(),
            m.lpips.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, bpp: f64, ms: f64) -> ReportRow {
        ReportRow {
            filename: name.into(),
            bpp,
            psnr_db: 30.0 + bpp,
            ms_ssim: ms,
            lpips: 0.1,
            extra: vec![bpp * 2.0],
        }
    }

    #[test]
    fn mean_row_and_csv_round_trip() {
        let r = Report::new(
            vec!["double".into()],
            vec![row("b,odd.png", 0.5, f64::NAN), row("a.png", 0.25, 0.9)],
        )
        .unwrap();
        assert_eq!(r.rows[0].filename, "a.png");
        assert_eq!(r.mean.bpp, 0.375);
        assert_eq!(r.mean.ms_ssim, 0.9);
        assert_eq!(r.mean.extra, vec![0.75]);
        let text = r.to_csv().unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("filename,bpp,psnr_db,ms_ssim,lpips,double\n"));
        let back = Report::from_csv(&text).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].filename, "b,odd.png");
        assert_eq!(back.mean.bpp, r.mean.bpp);
    }

    #[test]
    fn empty_and_malformed() {
        assert!(Report::new(vec![], vec![]).is_err());
        assert!(Report::from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn rd_points_sorted_by_rate() {
        let hi = Report::new(vec!["double".into()], vec![row("x", 0.3, 0.9)]).unwrap();
        let lo = Report::new(vec!["double".into()], vec![row("x", 0.1, 0.8)]).unwrap();
        let text = rd_curve_csv(&[("hi".into(), hi), ("lo".into(), lo)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "series,bpp,psnr_db,ms_ssim,lpips");
        assert!(lines[1].starts_with("lo,0.1,"));
        assert!(lines[2].starts_with("hi,0.3,"));
    }
}
