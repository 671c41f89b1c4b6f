//! Optimisation: learning-rate schedule, Adam with decoupled weight decay,
//! joint random cropping, checkpoints and the training loops.

mod ablation;
mod checkpoint;
mod classify;
mod derain;
mod eval;

pub use ablation::{run_ablation, AblationConfig, AblationReport, AblationRow, PUBLISHED_REFERENCE};
pub use checkpoint::{config_hash, hex, Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use classify::{
    train_classifier, ClassifierCurveRow, ClassifierOutcome, ClassifierTrainConfig, Stage,
};
pub use derain::{epoch_order, CONFIG_KEY, CURVE_HEADER, train_derainer, CurveRow, DerainTrainConfig, RunOptions, TrainOutcome};
pub use eval::{classifier_accuracy, evaluate_derainer, input_report, LabelSource};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::raingen::SamplePair;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps, applied after `epochs`.
    pub max_steps: Option<usize>,
    /// Training crop `(h, w)`; full images when absent.
    pub crop: Option<(usize, usize)>,
    pub flip: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 1e-3,
            lr_drop_epoch: 20,
            lr_drop_factor: 10.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            epochs: 80,
            max_steps: None,
            crop: None,
            flip: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr0, self.lr_drop_factor, self.beta1, self.beta2, self.eps]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.weight_decay < 0.0 || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::InvalidArgument("batch size, epochs and step cap must be positive".into()));
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::InvalidArgument("crop must be non-empty".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n_samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

pub(crate) fn all_finite(grads: &BTreeMap<String, Tensor>) -> bool {
    grads.values().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Piecewise-constant schedule with a single drop.
pub fn lr_schedule(epoch: usize, cfg: &OptimConfig) -> f64 {
    if epoch < cfg.lr_drop_epoch {
        cfg.lr0
    } else {
        cfg.lr0 / cfg.lr_drop_factor
    }
}

/// Adam moments and per-parameter step counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub steps: BTreeMap<String, u64>,
}

impl AdamState {
    /// One update of every parameter accepted by `trainable`. Parameters
    /// without a gradient are treated as having a zero gradient, so they
    /// still decay.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &OptimConfig,
        trainable: impl Fn(&str) -> bool,
    ) {
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
            let decay = 1.0 - lr * cfg.weight_decay;
            let g = grads.get(name);
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                *pv *= decay;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *pv -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

/// Crops the same window from clean, rainy and rain, then flips all three
/// horizontally with probability 0.5.
pub fn random_crop(pair: &SamplePair, crop: (usize, usize), rng: &mut impl Rng) -> Result<SamplePair> {
    random_crop_with(pair, Some(crop), true, rng)
}

/// As [`random_crop`]; `None` keeps the full frame and `flip = false`
/// disables flipping. The generator is advanced identically in all cases.
pub fn random_crop_with(
    pair: &SamplePair,
    crop: Option<(usize, usize)>,
    flip: bool,
    rng: &mut impl Rng,
) -> Result<SamplePair> {
    let (_, _, h, w) = pair.clean.check_nchw("crop source")?;
    let (ch, cw) = crop.unwrap_or((h, w));
    if ch > h || cw > w {
        return Err(Error::CropTooLarge(format!("{ch}x{cw} crop from a {h}x{w} image")));
    }
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(0.5) && flip;
    let cut = |t: &Tensor| -> Result<Tensor> {
        let c = t.crop(y0, x0, ch, cw)?;
        Ok(if flip { c.flip_horizontal() } else { c })
    };
    Ok(SamplePair {
        id: pair.id.clone(),
        clean: cut(&pair.clean)?,
        rain: cut(&pair.rain)?,
        rainy: cut(&pair.rainy)?,
        label: pair.label,
        params: pair.params.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::DensityLabel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_drops_once() {
        let cfg = OptimConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.001);
        assert_eq!(lr_schedule(19, &cfg), 0.001);
        assert_eq!(lr_schedule(20, &cfg), 0.0001);
        assert_eq!(lr_schedule(79, &cfg), 0.0001);
    }

    #[test]
    fn step_accounting() {
        let cfg = OptimConfig { epochs: 3, ..Default::default() };
        assert_eq!(cfg.steps_per_epoch(12), 12);
        assert_eq!(cfg.total_steps(12), 36);
        let capped = OptimConfig { max_steps: Some(5), ..cfg };
        assert_eq!(capped.total_steps(12), 5);
    }

    #[test]
    fn unused_params_decay_geometrically() {
        let cfg = OptimConfig::default();
        let mut params = ParamStore::new();
        params.insert("p", Tensor::full(&[2], 1.0));
        let mut opt = AdamState::default();
        for _ in 0..10 {
            opt.step(&mut params, &BTreeMap::new(), 0.1, &cfg, |_| true);
        }
        let expected = (1.0 - 0.1 * 1e-4f64).powi(10);
        assert!((params.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn crop_keeps_identity_and_is_deterministic() {
        let clean = crate::gradcheck::probe_tensor(&[1, 3, 10, 12], 1).map(|v| 0.4 + 0.2 * v);
        let rainy = clean.map(|v| (v + 0.3).min(1.0));
        let rain = rainy.zip_map(&clean, |y, x| y - x).unwrap();
        let pair = SamplePair {
            id: "x".into(),
            clean,
            rain,
            rainy,
            label: DensityLabel::Light,
            params: crate::raingen::RainParams {
                coverage: 0.1,
                streak_length: 8,
                orientation_deg: 0.0,
                intensity: 0.8,
                blur_sigma: 0.0,
                seed: 0,
            },
        };
        let a = random_crop(&pair, (6, 8), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = random_crop(&pair, (6, 8), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(a.rainy.bit_eq(&b.rainy));
        assert_eq!(a.clean.shape(), &[1, 3, 6, 8]);
        assert_eq!(a.identity_residual(), 0.0);
        let err = random_crop(&pair, (11, 8), &mut ChaCha8Rng::seed_from_u64(4)).unwrap_err();
        assert!(matches!(err, Error::CropTooLarge(_)));
    }
}
