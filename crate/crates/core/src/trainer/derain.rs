use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{all_finite, config_hash, lr_schedule, random_crop_with, AdamState, Checkpoint, OptimConfig, RngState};
use crate::derainer::{Derainer, DerainerConfig};
use crate::graph::Graph;
use crate::raingen::SamplePair;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Everything that determines a de-raining run besides the data and seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerainTrainConfig {
    pub model: DerainerConfig,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Receives `checkpoint.bin` and `loss_curve.csv` when set.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop once this many total steps have been taken.
    pub stop_after: Option<usize>,
    /// Snapshot interval in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub residual: f64,
    pub detail: f64,
    pub feature: f64,
    pub total: f64,
    pub lr: f64,
}

/// Metadata key holding the TOML training configuration.
pub const CONFIG_KEY: &str = "config";

pub const CURVE_HEADER: &str = "step,loss_residual,loss_detail,loss_feature,total,lr";

impl CurveRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.residual, self.detail, self.feature, self.total, self.lr
        )
    }

    pub fn bit_eq(&self, other: &CurveRow) -> bool {
        self.step == other.step
            && [self.residual, self.detail, self.feature, self.total, self.lr]
                .iter()
                .zip([other.residual, other.detail, other.feature, other.total, other.lr])
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
}

/// Sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub(crate) fn crop_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Crops and stacks one mini-batch.
pub(crate) fn make_batch(
    samples: &[SamplePair],
    idx: &[usize],
    optim: &OptimConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SamplePair> {
    let items = idx
        .iter()
        .map(|&i| random_crop_with(&samples[i], optim.crop, optim.flip, rng))
        .collect::<Result<Vec<_>>>()?;
    if items.len() == 1 {
        return Ok(items.into_iter().next().unwrap());
    }
    let stack = |f: fn(&SamplePair) -> &Tensor| Tensor::stack(&items.iter().map(|p| f(p).clone()).collect::<Vec<_>>());
    Ok(SamplePair {
        id: items[0].id.clone(),
        clean: stack(|p| &p.clean)?,
        rain: stack(|p| &p.rain)?,
        rainy: stack(|p| &p.rainy)?,
        label: items[0].label,
        params: items[0].params.clone(),
    })
}

/// Trains the de-raining network on `samples` with ground-truth labels.
pub fn train_derainer(samples: &[SamplePair], cfg: &DerainTrainConfig, seed: u64, opts: &RunOptions) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyManifest("no training pairs".into()));
    }
    cfg.optim.validate()?;
    let model = Derainer::new(cfg.model.clone())?;
    let hash = config_hash(cfg);
    let config_text = toml::to_string(cfg).expect("configs serialize to TOML");
    let optim = &cfg.optim;
    let n = samples.len();
    let per_epoch = optim.steps_per_epoch(n);
    let total = optim.total_steps(n);
    let stop = opts.stop_after.map_or(total, |s| s.min(total));

    let (mut params, mut adam, mut rng, mut step) = match &opts.resume {
        Some(ck) => {
            ck.check_config(&hash)?;
            (ck.model_params.clone(), ck.optim_state.clone(), ck.rng_state.restore(), ck.step as usize)
        }
        None => (model.init(seed), AdamState::default(), crop_rng(seed), 0),
    };
    let snapshot = |params: &crate::params::ParamStore, adam: &AdamState, rng: &ChaCha8Rng, step: usize| Checkpoint {
        config_hash: hash,
        epoch: (step / per_epoch) as u64,
        step: step as u64,
        rng_state: RngState::capture(rng),
        meta: BTreeMap::from([
            ("kind".to_string(), "derainer".to_string()),
            ("seed".to_string(), seed.to_string()),
            ("variant".to_string(), cfg.model.variant.name().to_string()),
            (CONFIG_KEY.to_string(), config_text.clone()),
        ]),
        model_params: params.clone(),
        optim_state: adam.clone(),
    };
    let mut last_good = snapshot(&params, &adam, &rng, step);
    let mut curve = Vec::with_capacity(stop.saturating_sub(step));
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    info!("training {} on {n} pairs: steps {step}..{stop} of {total}", cfg.model.variant);

    while step < stop {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(n, seed, epoch);
            order_epoch = epoch;
        }
        let within = step % per_epoch;
        let idx = &order[within * optim.batch_size..((within + 1) * optim.batch_size).min(n)];
        let batch = make_batch(samples, idx, optim, &mut rng)?;
        let labels: Vec<_> = idx.iter().map(|&i| samples[i].label).collect();

        let mut g = Graph::new();
        let y = g.input(batch.rainy);
        let clean = g.input(batch.clean);
        let rain = g.input(batch.rain);
        let out = model.forward_vars(&mut g, &params, y, &labels)?;
        let loss = model.loss_vars(&mut g, &out, clean, rain)?;
        let terms = loss.terms(&g, cfg.model.lambda_f);
        if !terms.total.is_finite() {
            return Err(Error::DivergenceDetected { step, last_good: Some(Box::new(last_good)) });
        }
        let grads = g.backward(loss.total)?.into_params();
        if !all_finite(&grads) {
            return Err(Error::DivergenceDetected { step, last_good: Some(Box::new(last_good)) });
        }
        let lr = lr_schedule(epoch, optim);
        adam.step(&mut params, &grads, lr, optim, |_| true);
        curve.push(CurveRow {
            step,
            residual: terms.residual,
            detail: terms.detail,
            feature: terms.feature,
            total: terms.total,
            lr,
        });
        step += 1;
        if step % 100 == 0 {
            debug!("step {step}: total {:.5}", terms.total);
        }
        if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 {
            last_good = snapshot(&params, &adam, &rng, step);
            if let Some(dir) = &opts.out_dir {
                last_good.save(&dir.join("checkpoint.bin"))?;
            }
        }
    }

    let checkpoint = snapshot(&params, &adam, &rng, step);
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join("checkpoint.bin"))?;
        write_curve(&dir.join("loss_curve.csv"), &curve, opts.resume.is_some())?;
    }
    Ok(TrainOutcome { checkpoint, curve })
}

fn write_curve(path: &std::path::Path, rows: &[CurveRow], append: bool) -> Result<()> {
    let mut text = String::new();
    let append = append && path.is_file();
    if !append {
        let _ = writeln!(text, "{CURVE_HEADER}");
    }
    for r in rows {
        let _ = writeln!(text, "{}", r.csv_line());
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::write(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::write(path, e))
}
