//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward code it is used to verify.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::Result;

/// Denominator floor for the relative error, so entries with vanishing
/// gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, what: String, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(rel);
            if rel >= self.max_rel_err {
                self.worst = format!("{what}: analytic {analytic:.6e}, numeric {numeric:.6e}");
            }
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

fn pick_indices(len: usize, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Compares `analytic` parameter gradients against central differences of
/// `loss`, probing up to `per_tensor` entries of every parameter.
pub fn check_params(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    per_tensor: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (name, t) in params.iter() {
        let Some(grad) = analytic.get(name) else { continue };
        for i in pick_indices(t.len(), per_tensor, &mut rng) {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            report.record(format!("{name}[{i}]"), grad.data()[i], (up - down) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Same as [`check_params`] for the gradient with respect to one input tensor.
pub fn check_input(
    x: &Tensor,
    analytic: &Tensor,
    loss: impl Fn(&Tensor) -> Result<f64>,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in pick_indices(x.len(), samples, &mut rng) {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = loss(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = loss(&probe)?;
        probe.data_mut()[i] = orig;
        report.record(format!("input[{i}]"), analytic.data()[i], (up - down) / (2.0 * eps));
    }
    Ok(report)
}

/// A fixed pseudo-random tensor in `[-1, 1)`, used as a projection direction
/// to turn tensor outputs into scalars.
pub fn probe_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}
