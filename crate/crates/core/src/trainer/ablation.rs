use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::derain::{train_derainer, DerainTrainConfig, RunOptions};
use super::eval::{evaluate_derainer, input_report, LabelSource};
use crate::derainer::{Derainer, Variant};
use crate::metrics::format_db;
use crate::raingen::SamplePair;
use crate::{Error, Result};

/// Published full-scale PSNR / SSIM per variant, for annotation only.
pub const PUBLISHED_REFERENCE: [(Variant, f64, f64); 4] = [
    (Variant::Single, 26.05, 0.8893),
    (Variant::YangMulti, 26.75, 0.8901),
    (Variant::MultiNoLabel, 27.56, 0.9028),
    (Variant::DidMdn, 27.95, 0.9087),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Shared budget; the variant field is overwritten per row.
    pub base: DerainTrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { base: DerainTrainConfig::default(), seeds: vec![1, 2, 3], variants: Variant::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub psnr_per_seed: Vec<f64>,
    pub ssim_per_seed: Vec<f64>,
    pub psnr_median: f64,
    pub ssim_median: f64,
    pub published_psnr: f64,
    pub published_ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub input_psnr: f64,
    pub input_ssim: f64,
    pub n_train: usize,
    pub n_test: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let seeds = self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "# seeds: {seeds}; steps per run: {}; train pairs: {}; test pairs: {}", self.steps, self.n_train, self.n_test);
        let _ = writeln!(s, "# rainy input: psnr {} ssim {:.4}", format_db(self.input_psnr), self.input_ssim);
        let _ = writeln!(s, "# published full-scale ordering: DID-MDN 27.95 > Multi-no-label 27.56 > Yang-Multi 26.75 > Single 26.05");
        let _ = writeln!(s, "config,psnr_db,ssim,psnr_per_seed,ssim_per_seed,published_psnr_db,published_ssim");
        for r in &self.rows {
            let per = |v: &[f64], p: usize| v.iter().map(|x| format!("{x:.prec$}", prec = p)).collect::<Vec<_>>().join(" ");
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{},{},{:.2},{:.4}",
                r.variant.name(),
                r.psnr_median,
                r.ssim_median,
                per(&r.psnr_per_seed, 4),
                per(&r.ssim_per_seed, 4),
                r.published_psnr,
                r.published_ssim
            );
        }
        s
    }
}

/// Trains every variant for every seed under the same budget and scores
/// each on `test` with ground-truth labels. Returns the report together
/// with the trained parameters per `(variant, seed)`.
pub fn run_ablation(
    train: &[SamplePair],
    test: &[SamplePair],
    cfg: &AblationConfig,
) -> Result<(AblationReport, Vec<(Variant, u64, crate::params::ParamStore)>)> {
    if cfg.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed and one variant".into()));
    }
    let inputs = input_report(test)?;
    let mut rows = Vec::new();
    let mut trained = Vec::new();
    for &variant in &cfg.variants {
        let run_cfg = DerainTrainConfig { model: cfg.base.model.clone().with_variant(variant), optim: cfg.base.optim.clone() };
        let model = Derainer::new(run_cfg.model.clone())?;
        let (mut psnrs, mut ssims) = (Vec::new(), Vec::new());
        for &seed in &cfg.seeds {
            let out = train_derainer(train, &run_cfg, seed, &RunOptions::default())?;
            let report = evaluate_derainer(&model, &out.checkpoint.model_params, test, LabelSource::GroundTruth)?;
            info!("{variant} seed {seed}: {:.3} dB / {:.4}", report.psnr_db, report.ssim);
            psnrs.push(report.psnr_db);
            ssims.push(report.ssim);
            trained.push((variant, seed, out.checkpoint.model_params));
        }
        let (_, published_psnr, published_ssim) = PUBLISHED_REFERENCE.iter().copied().find(|r| r.0 == variant).unwrap();
        rows.push(AblationRow {
            variant,
            psnr_median: median(&psnrs),
            ssim_median: median(&ssims),
            psnr_per_seed: psnrs,
            ssim_per_seed: ssims,
            published_psnr,
            published_ssim,
        });
    }
    Ok((
        AblationReport {
            rows,
            seeds: cfg.seeds.clone(),
            steps: cfg.base.optim.total_steps(train.len()),
            input_psnr: inputs.psnr_db,
            input_ssim: inputs.ssim,
            n_train: train.len(),
            n_test: test.len(),
        },
        trained,
    ))
}
