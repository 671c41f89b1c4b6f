#![allow(dead_code)]

use std::collections::BTreeMap;

use didmdn::derainer::FeatureExtractor;
use didmdn::gradcheck::{check_params, probe_tensor};
use didmdn::graph::{Graph, Var};
use didmdn::label::DensityLabel;
use didmdn::netblocks::BlockShape;
use didmdn::params::ParamStore;
use didmdn::raingen::{density_to_params, procedural_background, synthesize_sample, SamplePair};
use didmdn::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_EPS: f64 = 1e-6;

pub type Build = dyn Fn(&mut Graph, &ParamStore, Var) -> Result<Var>;

/// Per-window SSIM with explicit loops and a 2-D Gaussian built directly.
pub fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (_, c, h, w) = a.dims4();
    let luma = |t: &Tensor, y: usize, x: usize| {
        if c == 3 {
            0.299 * t.at(0, 0, y, x) + 0.587 * t.at(0, 1, y, x) + 0.114 * t.at(0, 2, y, x)
        } else {
            t.at(0, 0, y, x)
        }
    };
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-d2).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    ma += k * luma(a, y0 + i, x0 + j);
                    mb += k * luma(b, y0 + i, x0 + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    let da = luma(a, y0 + i, x0 + j) - ma;
                    let db = luma(b, y0 + i, x0 + j) - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Maps a probe tensor from [-1, 1] to [0, 1].
pub fn unit(t: Tensor) -> Tensor {
    t.map(|v| 0.5 + 0.5 * v)
}

pub fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    unit(probe_tensor(&[1, c, h, w], seed))
}

pub fn tiny_block() -> BlockShape {
    BlockShape { n_layers: 2, growth: 2, transition_channels: 3 }
}

/// Projects the output of `build` onto a fixed probe to get a scalar loss.
pub fn projected(store: &ParamStore, x: &Tensor, build: &Build) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = build(&mut g, store, xv)?;
    let probe = probe_tensor(g.shape(out), 77);
    let loss = g.dot(out, probe)?;
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?.into_params()))
}

/// Zero-initialised biases put every dead unit exactly on the ReLU kink,
/// where central differences are meaningless; nudge them off it.
pub fn off_kink(store: &ParamStore) -> ParamStore {
    let mut out = store.clone();
    for (i, (name, t)) in out.iter_mut().enumerate() {
        if name.ends_with(".bias") {
            let shift = probe_tensor(t.shape(), 1000 + i as u64);
            *t = t.zip_map(&shift, |b, s| b + 0.05 * s).unwrap();
        }
    }
    out
}

/// Largest relative error over sampled parameter entries. Panics if some
/// parameter gets no gradient at all.
pub fn max_param_grad_err(store: &ParamStore, x: &Tensor, build: &Build, per_tensor: usize) -> f64 {
    let store = &off_kink(store);
    let (_, grads) = projected(store, x, build).unwrap();
    assert_eq!(grads.len(), store.len(), "every parameter should receive a gradient");
    let report = check_params(store, &grads, |p| Ok(projected(p, x, build)?.0), per_tensor, GRAD_EPS, 5).unwrap();
    assert!(report.checked > 0);
    report.max_rel_err
}

/// Keeps only the parameters under `prefix`, names unchanged.
pub fn only(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    out.absorb(prefix, store.subset(prefix));
    out
}

/// `n_per_label` in-memory pairs per density level on procedural backgrounds.
pub fn synth_pairs(n_per_label: usize, size: u32, seed: u64) -> Vec<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for label in DensityLabel::ALL {
        for i in 0..n_per_label {
            let clean = procedural_background(seed * 100 + out.len() as u64, size as usize, size as usize);
            let params = density_to_params(label, &mut rng);
            let (rainy, _, params) = synthesize_sample(&clean, &params).unwrap();
            out.push(SamplePair::from_images(format!("{label}_{i}"), &clean, &rainy, label, params));
        }
    }
    out
}

/// Scalar triple-loop evaluation of the normalized feature distance.
pub fn feature_loss_oracle(a: &Tensor, b: &Tensor, f: &FeatureExtractor) -> f64 {
    fn apply(x: &Tensor, f: &FeatureExtractor) -> Tensor {
        let mut cur = x.clone();
        for (w, bias) in &f.layers {
            let (_, c_in, h, wd) = cur.dims4();
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let pad = (k / 2) as isize;
            let mut out = Tensor::zeros(&[1, c_out, h, wd]);
            for o in 0..c_out {
                for y in 0..h {
                    for x in 0..wd {
                        let mut acc = bias.data()[o];
                        for i in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (yy, xx) = (y as isize + ky as isize - pad, x as isize + kx as isize - pad);
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                        acc += w.data()[((o * c_in + i) * k + ky) * k + kx]
                                            * cur.at(0, i, yy as usize, xx as usize);
                                    }
                                }
                            }
                        }
                        out.set(0, o, y, x, acc.max(0.0));
                    }
                }
            }
            cur = out;
        }
        cur
    }
    let (fa, fb) = (apply(a, f), apply(b, f));
    let (_, c, h, w) = fa.dims4();
    let mut sum = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                sum += (fa.at(0, ch, y, x) - fb.at(0, ch, y, x)).powi(2);
            }
        }
    }
    sum / (c * h * w) as f64
}

/// Mean squared difference with a plain loop.
pub fn mse_oracle(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
