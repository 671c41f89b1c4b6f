//! Full-reference quality metrics: PSNR and windowed SSIM.
//!
//! SSIM follows the usual formulation: an 11x11 Gaussian window with
//! sigma 1.5, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, evaluated at every
//! fully-contained window position and averaged. Three-channel images are
//! reduced to BT.601 luma first.

use std::fmt::Write as _;
use std::path::Path;

use crate::imageio;
use crate::raingen::DatasetManifest;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Single-channel planes used by SSIM: luma for RGB, the plane itself for
/// gray, each channel separately otherwise.
fn ssim_planes(t: &Tensor) -> Vec<Vec<f64>> {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let mut planes = Vec::new();
    for b in 0..n {
        let item = &t.data()[b * c * hw..(b + 1) * c * hw];
        if c == 3 {
            planes.push(
                (0..hw)
                    .map(|i| LUMA_WEIGHTS[0] * item[i] + LUMA_WEIGHTS[1] * item[hw + i] + LUMA_WEIGHTS[2] * item[2 * hw + i])
                    .collect(),
            );
        } else {
            planes.extend(item.chunks(hw).map(<[f64]>::to_vec));
        }
    }
    planes
}

/// "Valid" separable filtering: output is `(h - k + 1) x (w - k + 1)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h - k.len() + 1, w - k.len() + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(j, kv)| kv * tmp[(y + j) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> f64 {
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Mean SSIM with unit data range.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_range(a, b, 1.0)
}

pub fn ssim_with_range(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    a.same_shape(b)?;
    let (_, _, h, w) = a.check_nchw("ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let pa = ssim_planes(a);
    let pb = ssim_planes(b);
    let sum: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w, data_range)).sum();
    Ok(sum / pa.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len();
        let psnr_db = per_image.iter().map(|r| r.psnr_db).sum::<f64>() / n as f64;
        let ssim = per_image.iter().map(|r| r.ssim).sum::<f64>() / n as f64;
        MetricReport { psnr_db, ssim, n_images: n, per_image }
    }

    /// Per-image CSV rows followed by a `mean` row. Infinite PSNR prints as `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr_db,ssim\n");
        for r in &self.per_image {
            let _ = writeln!(s, "{},{},{:.6}", r.id, format_db(r.psnr_db), r.ssim);
        }
        let _ = writeln!(s, "mean,{},{:.6}", format_db(self.psnr_db), self.ssim);
        s
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Scores every record's model output (`<outputs>/<id>.png`) against its
/// clean image and averages.
pub fn evaluate_dataset(manifest: &DatasetManifest, manifest_dir: &Path, outputs: &Path) -> Result<MetricReport> {
    if manifest.records.is_empty() {
        return Err(Error::EmptyManifest("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let out_path = outputs.join(format!("{}.png", rec.id));
        if !out_path.is_file() {
            return Err(Error::MissingOutput(rec.id.clone()));
        }
        let clean = imageio::load_tensor(&manifest_dir.join(&rec.clean_path))?;
        let out = imageio::load_tensor(&out_path)?;
        rows.push(ImageMetrics {
            id: rec.id.clone(),
            psnr_db: psnr(&out, &clean, 1.0)?,
            ssim: ssim(&out, &clean)?,
        });
    }
    Ok(MetricReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::full(&[1, 1, 4, 4], 0.0);
        let b = Tensor::full(&[1, 1, 4, 4], 10.0);
        assert!((psnr(&a, &b, 255.0).unwrap() - 28.1308).abs() < 1e-3);
        let c = Tensor::full(&[1, 1, 4, 4], 1.0);
        assert_eq!(psnr(&a, &c, 1.0).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Tensor::zeros(&[1, 1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_identical_is_exactly_one() {
        let t = crate::gradcheck::probe_tensor(&[1, 3, 16, 16], 1).map(|v| 0.5 + 0.4 * v);
        assert_eq!(ssim(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Tensor::full(&[1, 3, 16, 16], 0.5);
        let b = Tensor::full(&[1, 3, 16, 16], 0.25);
        let expected = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros(&[1, 1, 10, 32]);
        assert!(matches!(ssim(&a, &a), Err(Error::TooSmall(_))));
    }

    #[test]
    fn csv_prints_inf() {
        let r = MetricReport::from_rows(vec![ImageMetrics { id: "a".into(), psnr_db: f64::INFINITY, ssim: 1.0 }]);
        assert!(r.to_csv().contains("mean,inf,1.000000"));
    }
}
