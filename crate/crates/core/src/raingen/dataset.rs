use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{density_to_params, procedural_background, render_streaks, RainParams};
use crate::imageio::{self, quantize};
use crate::label::DensityLabel;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// TOML integers are signed 64-bit, so seeds travel as decimal strings.
mod seed_string {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredParams {
    coverage: f64,
    streak_length: u32,
    orientation_deg: f64,
    intensity: f64,
    blur_sigma: f64,
    #[serde(with = "seed_string")]
    seed: u64,
}

impl From<&RainParams> for StoredParams {
    fn from(p: &RainParams) -> Self {
        StoredParams {
            coverage: p.coverage,
            streak_length: p.streak_length,
            orientation_deg: p.orientation_deg,
            intensity: p.intensity,
            blur_sigma: p.blur_sigma,
            seed: p.seed,
        }
    }
}

impl From<StoredParams> for RainParams {
    fn from(p: StoredParams) -> Self {
        RainParams {
            coverage: p.coverage,
            streak_length: p.streak_length,
            orientation_deg: p.orientation_deg,
            intensity: p.intensity,
            blur_sigma: p.blur_sigma,
            seed: p.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "RawRecord", from = "RawRecord")]
pub struct ManifestRecord {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub clean_path: PathBuf,
    pub rainy_path: PathBuf,
    pub rain_path: PathBuf,
    pub label: DensityLabel,
    pub params: RainParams,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    clean_path: PathBuf,
    rainy_path: PathBuf,
    rain_path: PathBuf,
    label: DensityLabel,
    params: StoredParams,
}

impl From<ManifestRecord> for RawRecord {
    fn from(r: ManifestRecord) -> Self {
        RawRecord {
            id: r.id,
            clean_path: r.clean_path,
            rainy_path: r.rainy_path,
            rain_path: r.rain_path,
            label: r.label,
            params: (&r.params).into(),
        }
    }
}

impl From<RawRecord> for ManifestRecord {
    fn from(r: RawRecord) -> Self {
        ManifestRecord {
            id: r.id,
            clean_path: r.clean_path,
            rainy_path: r.rainy_path,
            rain_path: r.rain_path,
            label: r.label,
            params: r.params.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    #[serde(with = "seed_string")]
    pub global_seed: u64,
    pub counts_per_label: BTreeMap<DensityLabel, usize>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::CorruptDataset(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::CorruptDataset(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let total: usize = self.counts_per_label.values().sum();
        if total != self.records.len() {
            return Err(Error::CorruptDataset(format!(
                "label counts sum to {total} but there are {} records",
                self.records.len()
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::write(path, e))
    }
}

/// One loaded record. All three images are `(1, 3, H, W)` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    pub clean: Tensor,
    pub rain: Tensor,
    pub rainy: Tensor,
    pub label: DensityLabel,
    pub params: RainParams,
}

impl SamplePair {
    /// Builds a pair from 8-bit clean and rainy images. The rain tensor is
    /// `rainy - clean` evaluated in floating point, so the additive identity
    /// holds bitwise.
    pub fn from_images(id: String, clean: &RgbImage, rainy: &RgbImage, label: DensityLabel, params: RainParams) -> Self {
        let clean = imageio::rgb_to_tensor(clean);
        let rainy = imageio::rgb_to_tensor(rainy);
        let rain = rainy.zip_map(&clean, |y, x| y - x).unwrap();
        SamplePair { id, clean, rain, rainy, label, params }
    }

    /// `max |rainy - clean - rain|`; zero for every well-formed pair.
    pub fn identity_residual(&self) -> f64 {
        self.rainy
            .data()
            .iter()
            .zip(self.clean.data())
            .zip(self.rain.data())
            .map(|((y, x), r)| (y - x - r).abs())
            .fold(0.0, f64::max)
    }
}

/// Applies a rain layer to an 8-bit clean image.
///
/// Returns `(rainy, rain, params)` where `params` carries the streak length
/// rescaled to the image, and `rain = rainy - clean` per channel in 8-bit
/// integers.
pub fn synthesize_sample(clean: &RgbImage, params: &RainParams) -> Result<(RgbImage, RgbImage, RainParams)> {
    let (w, h) = (clean.width() as usize, clean.height() as usize);
    let params = params.scaled_to(h, w);
    let layer = render_streaks(&params, (h, w))?;
    let mut rainy = RgbImage::new(w as u32, h as u32);
    let mut rain = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in clean.enumerate_pixels() {
        let r = quantize(layer.at(0, 0, y as usize, x as usize));
        let wet = Rgb([0, 1, 2].map(|c| px[c].saturating_add(r)));
        rain.put_pixel(x, y, Rgb([0, 1, 2].map(|c| wet[c] - px[c])));
        rainy.put_pixel(x, y, wet);
    }
    Ok((rainy, rain, params))
}

fn list_clean_images(clean_dir: &Path) -> Result<Vec<(PathBuf, RgbImage)>> {
    let entries = std::fs::read_dir(clean_dir).map_err(|_| Error::EmptyCleanDir(clean_dir.to_path_buf()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match imageio::read_rgb(&p) {
            Ok(img) => out.push((p, img)),
            Err(e) => debug!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCleanDir(clean_dir.to_path_buf()));
    }
    Ok(out)
}

/// Synthesizes `3 * per_label_count` labelled pairs from the images in
/// `clean_dir` and writes them, plus `manifest.toml`, under `out_dir`.
///
/// The output is a pure function of the clean images and `seed`.
pub fn build_dataset(clean_dir: &Path, per_label_count: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if per_label_count == 0 {
        return Err(Error::InvalidArgument("per_label_count must be at least 1".into()));
    }
    let sources = list_clean_images(clean_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::write(out_dir, e))?;

    // Draw every sample's recipe up front so that generation order does not
    // affect the random stream.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::with_capacity(3 * per_label_count);
    for label in DensityLabel::ALL {
        for i in 0..per_label_count {
            let src = rng.gen_range(0..sources.len());
            let params = density_to_params(label, &mut rng);
            plan.push((format!("{label}_{i:05}"), label, src, params));
        }
    }

    let mut records = Vec::with_capacity(plan.len());
    let mut counts = BTreeMap::new();
    for (id, label, src, params) in plan {
        let clean = &sources[src].1;
        let (rainy, rain, params) = synthesize_sample(clean, &params)?;
        let rec = ManifestRecord {
            clean_path: PathBuf::from("clean").join(format!("{id}.png")),
            rainy_path: PathBuf::from("rainy").join(format!("{id}.png")),
            rain_path: PathBuf::from("rain").join(format!("{id}.png")),
            id,
            label,
            params,
        };
        imageio::write_rgb(&out_dir.join(&rec.clean_path), clean)?;
        imageio::write_rgb(&out_dir.join(&rec.rainy_path), &rainy)?;
        imageio::write_rgb(&out_dir.join(&rec.rain_path), &rain)?;
        *counts.entry(label).or_insert(0) += 1;
        records.push(rec);
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        global_seed: seed,
        counts_per_label: counts,
        records,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Writes `count` procedural clean scenes of size `h x w` into `dir`.
pub fn write_procedural_backgrounds(dir: &Path, count: usize, seed: u64, h: usize, w: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("bg_{i:05}.png"));
            let img = procedural_background(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64), h, w);
            imageio::write_rgb(&path, &img)?;
            Ok(path)
        })
        .collect()
}

/// A manifest together with its decoded samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    /// Loads every record of the manifest at `path`, checking that the stored
    /// rain layer equals `rainy - clean` exactly in 8-bit.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(path)?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut samples = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let clean = imageio::read_rgb(&root.join(&rec.clean_path))?;
            let rainy = imageio::read_rgb(&root.join(&rec.rainy_path))?;
            let rain = imageio::read_rgb(&root.join(&rec.rain_path))?;
            if clean.dimensions() != rainy.dimensions() || clean.dimensions() != rain.dimensions() {
                return Err(Error::CorruptDataset(format!("record {}: image sizes differ", rec.id)));
            }
            let consistent = clean
                .pixels()
                .zip(rainy.pixels())
                .zip(rain.pixels())
                .all(|((x, y), r)| (0..3).all(|c| x[c] as u16 + r[c] as u16 == y[c] as u16));
            if !consistent {
                warn!("record {} violates rainy = clean + rain", rec.id);
                return Err(Error::CorruptDataset(format!(
                    "record {}: rainy != clean + rain",
                    rec.id
                )));
            }
            samples.push(SamplePair::from_images(rec.id.clone(), &clean, &rainy, rec.label, rec.params.clone()));
        }
        Ok(Dataset { root, manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
