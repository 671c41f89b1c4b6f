use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::derain::{crop_rng, epoch_order, make_batch, CONFIG_KEY};
use super::{all_finite, config_hash, lr_schedule, AdamState, Checkpoint, OptimConfig, RngState};
use crate::classifier::{Classifier, ClassifierConfig, EXTRACTOR, HEAD};
use crate::graph::Graph;
use crate::label::DensityLabel;
use crate::params::ParamStore;
use crate::raingen::SamplePair;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Residual extractor alone, heavy-density pairs only.
    Residual,
    /// Classification head with the extractor frozen.
    Head,
    /// Both parts on the summed objective.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Residual => "residual",
            Stage::Head => "head",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub model: ClassifierConfig,
    /// Optimizer settings; `crop` applies to the residual stage only.
    pub optim: OptimConfig,
    pub residual_steps: usize,
    pub head_steps: usize,
    pub joint_steps: usize,
    /// Learning-rate multiplier for the joint stage.
    #[serde(default = "default_joint_lr_scale")]
    pub joint_lr_scale: f64,
}

fn default_joint_lr_scale() -> f64 {
    0.1
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            model: ClassifierConfig::default(),
            optim: OptimConfig { crop: Some((32, 32)), ..Default::default() },
            residual_steps: 600,
            head_steps: 3000,
            joint_steps: 300,
            joint_lr_scale: default_joint_lr_scale(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierCurveRow {
    pub stage: Stage,
    pub step: usize,
    pub residual: f64,
    pub classification: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<ClassifierCurveRow>,
    /// Parameters after each completed stage, in stage order.
    pub stage_params: Vec<ParamStore>,
}

impl ClassifierOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("stage,step,loss_residual,loss_classification,total,lr\n");
        for r in &self.curve {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e}",
                r.stage.name(),
                r.step,
                r.residual,
                r.classification,
                r.total,
                r.lr
            );
        }
        s
    }
}

/// Runs the three-stage protocol: residual extractor on heavy pairs, head
/// on frozen residual estimates, then both jointly.
pub fn train_classifier(
    samples: &[SamplePair],
    cfg: &ClassifierTrainConfig,
    seed: u64,
    out_dir: Option<&PathBuf>,
) -> Result<ClassifierOutcome> {
    for label in DensityLabel::ALL {
        if !samples.iter().any(|s| s.label == label) {
            return Err(Error::MissingLabelClass(label));
        }
    }
    cfg.optim.validate()?;
    let clf = Classifier::new(cfg.model.clone())?;
    let mut params = clf.init(seed)?;
    let mut adam = AdamState::default();
    let mut rng = crop_rng(seed);
    let mut curve = Vec::new();
    let mut stage_params = Vec::new();
    let mut meta = BTreeMap::from([
        ("kind".to_string(), "classifier".to_string()),
        ("seed".to_string(), seed.to_string()),
        (CONFIG_KEY.to_string(), toml::to_string(cfg).expect("configs serialize to TOML")),
    ]);
    let mut global = 0usize;

    // Residual stage.
    let heavy: Vec<SamplePair> = samples.iter().filter(|s| s.label == DensityLabel::Heavy).cloned().collect();
    let per_epoch = cfg.optim.steps_per_epoch(heavy.len());
    let mut order = Vec::new();
    info!("classifier residual stage: {} steps on {} heavy pairs", cfg.residual_steps, heavy.len());
    for step in 0..cfg.residual_steps {
        let (epoch, within) = (step / per_epoch, step % per_epoch);
        if within == 0 {
            order = epoch_order(heavy.len(), seed, epoch);
        }
        let idx = &order[within * cfg.optim.batch_size..((within + 1) * cfg.optim.batch_size).min(heavy.len())];
        let batch = make_batch(&heavy, idx, &cfg.optim, &mut rng)?;
        let mut g = Graph::new();
        let y = g.input(batch.rainy);
        let r = g.input(batch.rain);
        let r_hat = clf.estimate_residual_var(&mut g, &params, y)?;
        let loss = g.mse(r_hat, r)?;
        let value = check_finite(&g, loss, global)?;
        let grads = g.backward(loss)?.into_params();
        if !all_finite(&grads) {
            return Err(Error::DivergenceDetected { step: global, last_good: None });
        }
        let lr = lr_schedule(epoch, &cfg.optim);
        adam.step(&mut params, &grads, lr, &cfg.optim, |n| n.starts_with(EXTRACTOR));
        curve.push(ClassifierCurveRow { stage: Stage::Residual, step: global, residual: value, classification: 0.0, total: value, lr });
        global += 1;
    }
    meta.insert("stage1_end".into(), global.to_string());
    stage_params.push(params.clone());

    // Head stage on cached residual estimates; the extractor is frozen so
    // its output per image is fixed.
    let cached = samples
        .iter()
        .map(|s| clf.estimate_residual(&params, &s.rainy))
        .collect::<Result<Vec<Tensor>>>()?;
    let per_epoch = cfg.optim.steps_per_epoch(samples.len());
    info!("classifier head stage: {} steps on {} pairs", cfg.head_steps, samples.len());
    for step in 0..cfg.head_steps {
        let (epoch, within) = (step / per_epoch, step % per_epoch);
        if within == 0 {
            order = epoch_order(samples.len(), seed ^ 0x4ead, epoch);
        }
        let idx = &order[within * cfg.optim.batch_size..((within + 1) * cfg.optim.batch_size).min(samples.len())];
        let items: Vec<Tensor> = idx
            .iter()
            .map(|&i| if rng.gen_bool(0.5) && cfg.optim.flip { cached[i].flip_horizontal() } else { cached[i].clone() })
            .collect();
        let targets: Vec<usize> = idx.iter().map(|&i| samples[i].label.index()).collect();
        let mut g = Graph::new();
        g.freeze_prefix(EXTRACTOR);
        let r_hat = g.input(Tensor::stack(&items)?);
        let logits = clf.classify_head_var(&mut g, &params, r_hat)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let value = check_finite(&g, loss, global)?;
        let grads = g.backward(loss)?.into_params();
        if !all_finite(&grads) {
            return Err(Error::DivergenceDetected { step: global, last_good: None });
        }
        let lr = lr_schedule(epoch, &cfg.optim);
        adam.step(&mut params, &grads, lr, &cfg.optim, |n| n.starts_with(HEAD));
        curve.push(ClassifierCurveRow { stage: Stage::Head, step: global, residual: 0.0, classification: value, total: value, lr });
        global += 1;
    }
    meta.insert("stage2_end".into(), global.to_string());
    stage_params.push(params.clone());

    // Joint stage on full frames.
    let full = OptimConfig { crop: None, ..cfg.optim.clone() };
    info!("classifier joint stage: {} steps", cfg.joint_steps);
    for step in 0..cfg.joint_steps {
        let (epoch, within) = (step / per_epoch, step % per_epoch);
        if within == 0 {
            order = epoch_order(samples.len(), seed ^ 0x701e, epoch);
        }
        let idx = &order[within * cfg.optim.batch_size..((within + 1) * cfg.optim.batch_size).min(samples.len())];
        let batch = make_batch(samples, idx, &full, &mut rng)?;
        let targets: Vec<usize> = idx.iter().map(|&i| samples[i].label.index()).collect();
        let mut g = Graph::new();
        let y = g.input(batch.rainy);
        let r = g.input(batch.rain);
        let out = clf.forward_vars(&mut g, &params, y)?;
        let l_res = g.mse(out.residual, r)?;
        let l_cls = g.cross_entropy(out.logits, &targets)?;
        let loss = g.add(l_res, l_cls)?;
        let value = check_finite(&g, loss, global)?;
        let grads = g.backward(loss)?.into_params();
        if !all_finite(&grads) {
            return Err(Error::DivergenceDetected { step: global, last_good: None });
        }
        let lr = cfg.joint_lr_scale * lr_schedule(epoch, &cfg.optim);
        adam.step(&mut params, &grads, lr, &cfg.optim, |_| true);
        curve.push(ClassifierCurveRow {
            stage: Stage::Joint,
            step: global,
            residual: g.value(l_res).item(),
            classification: g.value(l_cls).item(),
            total: value,
            lr,
        });
        global += 1;
    }
    meta.insert("stage3_end".into(), global.to_string());
    stage_params.push(params.clone());

    let checkpoint = Checkpoint {
        config_hash: config_hash(cfg),
        epoch: 0,
        step: global as u64,
        rng_state: RngState::capture(&rng),
        meta,
        model_params: params,
        optim_state: adam,
    };
    let outcome = ClassifierOutcome { checkpoint, curve, stage_params };
    if let Some(dir) = out_dir {
        outcome.checkpoint.save(&dir.join("checkpoint.bin"))?;
        let path = dir.join("loss_curve.csv");
        std::fs::write(&path, outcome.curve_csv()).map_err(|e| Error::write(&path, e))?;
    }
    Ok(outcome)
}

fn check_finite(g: &Graph, loss: crate::graph::Var, step: usize) -> Result<f64> {
    let v = g.value(loss).item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::DivergenceDetected { step, last_good: None })
    }
}
