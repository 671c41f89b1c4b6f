//! Procedural rain synthesis.
//!
//! A rain layer is produced by seeding streak origins in uniform noise at a
//! target coverage, smearing them with an oriented line kernel, scaling by
//! an intensity, softening with a small Gaussian and clipping to `[0, 1]`.
//! Layers are composed additively with clean images, and the stored residual
//! is re-derived after clipping so that `rainy = clean + rain` holds exactly.

mod background;
mod dataset;

pub use background::procedural_background;
pub use dataset::{
    build_dataset, synthesize_sample, write_procedural_backgrounds, Dataset, DatasetManifest,
    ManifestRecord, SamplePair, MANIFEST_FILE, SCHEMA_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::label::DensityLabel;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Streak lengths are drawn for a 128 px reference frame and rescaled.
pub const REFERENCE_SIZE: f64 = 128.0;
pub const ORIENTATION_RANGE: (f64, f64) = (-45.0, 45.0);
pub const STREAK_LENGTH_RANGE: (u32, u32) = (8, 24);
pub const INTENSITY_RANGE: (f64, f64) = (0.7, 1.0);
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.0, 0.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    /// Fraction of pixels seeded as streak origins.
    pub coverage: f64,
    /// Streak length in pixels.
    pub streak_length: u32,
    /// Streak angle from vertical, degrees.
    pub orientation_deg: f64,
    /// Additive brightness.
    pub intensity: f64,
    /// Gaussian softening, pixels.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.coverage)
            && self.streak_length >= 1
            && self.intensity > 0.0
            && self.blur_sigma >= 0.0
            && self.blur_sigma.is_finite()
            && (-45.0..=45.0).contains(&self.orientation_deg);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("rain parameters out of range: {self:?}")))
        }
    }

    /// Rescales the streak length from the 128 px reference frame to an
    /// `h x w` image.
    pub fn scaled_to(&self, h: usize, w: usize) -> RainParams {
        let factor = h.min(w) as f64 / REFERENCE_SIZE;
        let len = ((self.streak_length as f64 * factor).round() as u32).clamp(1, h.min(w) as u32);
        RainParams { streak_length: len, ..self.clone() }
    }
}

/// Draws synthesis parameters for a density class.
pub fn density_to_params(label: DensityLabel, rng: &mut impl Rng) -> RainParams {
    let (lo, hi) = label.coverage_band();
    RainParams {
        coverage: rng.gen_range(lo..=hi),
        streak_length: rng.gen_range(STREAK_LENGTH_RANGE.0..=STREAK_LENGTH_RANGE.1),
        orientation_deg: rng.gen_range(ORIENTATION_RANGE.0..=ORIENTATION_RANGE.1),
        intensity: rng.gen_range(INTENSITY_RANGE.0..=INTENSITY_RANGE.1),
        blur_sigma: rng.gen_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1),
        seed: rng.gen(),
    }
}

/// Pixel offsets `(dy, dx)` of a line kernel of `len` taps at `deg` from vertical.
fn line_offsets(len: u32, deg: f64) -> Vec<(isize, isize)> {
    let (s, c) = deg.to_radians().sin_cos();
    (0..len)
        .map(|i| {
            let t = i as f64 - (len as f64 - 1.0) / 2.0;
            ((t * c).round() as isize, (t * s).round() as isize)
        })
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with wrap-around borders.
fn blur_wrapped(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + wrap(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[wrap(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Renders a single-channel `(1, 1, H, W)` rain layer.
///
/// The noise field depends only on `params.seed` and the shape, so raising
/// the coverage only ever adds streak origins.
pub fn render_streaks(params: &RainParams, shape: (usize, usize)) -> Result<Tensor> {
    params.validate()?;
    let (h, w) = shape;
    let len = params.streak_length as usize;
    if h < len || w < len {
        return Err(Error::ShapeTooSmall(format!(
            "{h}x{w} image is smaller than streak length {len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let seeds: Vec<f64> = (0..h * w)
        .map(|_| if rng.gen::<f64>() < params.coverage { 1.0 } else { 0.0 })
        .collect();

    let offsets = line_offsets(params.streak_length, params.orientation_deg);
    let tap = 1.0 / offsets.len() as f64;
    let mut layer = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let hits: f64 = offsets
                .iter()
                .map(|&(dy, dx)| {
                    let yy = (y as isize + dy).rem_euclid(h as isize) as usize;
                    let xx = (x as isize + dx).rem_euclid(w as isize) as usize;
                    seeds[yy * w + xx]
                })
                .sum();
            layer[y * w + x] = hits * tap * params.intensity;
        }
    }
    if params.blur_sigma > 0.0 {
        layer = blur_wrapped(&layer, h, w, params.blur_sigma);
    }
    for v in &mut layer {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[1, 1, h, w], layer)
}

/// Adds `rain` to `clean` and clips. Returns `(rainy, stored_rain)` with
/// `stored_rain = rainy - clean`, so the stored triple satisfies the
/// additive model exactly. A single-channel `rain` is replicated across the
/// channels of `clean`.
pub fn compose(clean: &Tensor, rain: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = clean.check_nchw("compose clean")?;
    let (rn, rc, rh, rw) = rain.check_nchw("compose rain")?;
    if (rn, rh, rw) != (n, h, w) || (rc != c && rc != 1) {
        return Err(Error::ShapeMismatch(format!(
            "clean {:?} vs rain {:?}",
            clean.shape(),
            rain.shape()
        )));
    }
    let rain = if rc == c { rain.clone() } else { rain.repeat_channels(c)? };
    let rainy = clean.zip_map(&rain, |x, r| (x + r).clamp(0.0, 1.0))?;
    let stored = rainy.zip_map(clean, |y, x| y - x)?;
    Ok((rainy, stored))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(coverage: f64, intensity: f64, seed: u64) -> RainParams {
        RainParams {
            coverage,
            streak_length: 6,
            orientation_deg: 20.0,
            intensity,
            blur_sigma: 0.4,
            seed,
        }
    }

    #[test]
    fn coverage_bands_follow_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            for label in DensityLabel::ALL {
                let p = density_to_params(label, &mut rng);
                let (lo, hi) = label.coverage_band();
                assert!(p.coverage >= lo && p.coverage <= hi);
                assert!((8..=24).contains(&p.streak_length));
                assert!(p.intensity >= INTENSITY_RANGE.0 && p.intensity <= INTENSITY_RANGE.1);
                assert!(p.blur_sigma <= 0.5 && p.orientation_deg.abs() <= 45.0);
            }
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = density_to_params(DensityLabel::Medium, &mut ChaCha8Rng::seed_from_u64(5));
        let b = density_to_params(DensityLabel::Medium, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_coverage_renders_nothing() {
        let t = render_streaks(&params(0.0, 1.0, 3), (32, 32)).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intensity_scales_exactly() {
        let half = render_streaks(&params(0.4, 0.5, 9), (24, 24)).unwrap();
        let full = render_streaks(&params(0.4, 1.0, 9), (24, 24)).unwrap();
        for (a, b) in half.data().iter().zip(full.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn identical_params_render_bit_identically() {
        let a = render_streaks(&params(0.3, 0.8, 1), (20, 30)).unwrap();
        let b = render_streaks(&params(0.3, 0.8, 1), (20, 30)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn too_small_shape_is_rejected() {
        let err = render_streaks(&params(0.3, 0.8, 1), (5, 30)).unwrap_err();
        assert!(matches!(err, Error::ShapeTooSmall(_)));
    }

    #[test]
    fn compose_examples() {
        let clean = Tensor::full(&[1, 3, 4, 4], 0.5);
        let (rainy, stored) = compose(&clean, &Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert_eq!(rainy, clean);
        assert!(stored.data().iter().all(|&v| v == 0.0));

        let (rainy, stored) = compose(&Tensor::full(&[1, 3, 4, 4], 0.4), &Tensor::full(&[1, 3, 4, 4], 0.3)).unwrap();
        assert!(rainy.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert!(stored.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));

        let (rainy, stored) = compose(&Tensor::full(&[1, 3, 4, 4], 0.9), &Tensor::full(&[1, 1, 4, 4], 0.4)).unwrap();
        assert!(rainy.data().iter().all(|&v| v == 1.0));
        assert!(stored.data().iter().all(|&v| (v - 0.1).abs() < 1e-12));

        let err = compose(&Tensor::zeros(&[1, 3, 4, 4]), &Tensor::zeros(&[1, 3, 4, 5])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn scaled_length_fits_image() {
        let p = RainParams { streak_length: 24, ..params(0.2, 1.0, 0) };
        assert_eq!(p.scaled_to(64, 80).streak_length, 12);
        assert_eq!(p.scaled_to(2, 2).streak_length, 1);
    }
}
