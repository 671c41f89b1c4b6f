mod common;

use common::synth_pairs;
use std::collections::BTreeMap;

use didmdn::classifier::{ClassifierConfig, EXTRACTOR, HEAD};
use didmdn::derainer::{DerainerConfig, Variant};
use didmdn::label::DensityLabel;
use didmdn::params::ParamStore;
use didmdn::trainer::{
    epoch_order, lr_schedule, random_crop, train_classifier, train_derainer, AdamState, Checkpoint,
    ClassifierTrainConfig, DerainTrainConfig, OptimConfig, RunOptions,
};
use didmdn::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_cfg(variant: Variant, steps: usize) -> DerainTrainConfig {
    DerainTrainConfig {
        model: DerainerConfig::toy().with_variant(variant),
        optim: OptimConfig { max_steps: Some(steps), crop: Some((16, 16)), ..OptimConfig::default() },
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = OptimConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 0.001);
    assert_eq!(lr_schedule(20, &cfg), 0.0001);
    assert_eq!(lr_schedule(79, &cfg), 0.0001);
    assert_eq!((cfg.beta1, cfg.weight_decay, cfg.batch_size, cfg.epochs), (0.9, 1e-4, 1, 80));
}

/// Hand-rolled single-scalar Adam with decoupled decay.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, p: f64, g: f64, lr: f64, c: &OptimConfig) -> f64 {
        self.t += 1;
        let p = p - lr * c.weight_decay * p;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let m_hat = self.m / (1.0 - c.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - c.beta2.powi(self.t));
        p - lr * m_hat / (v_hat.sqrt() + c.eps)
    }
}

#[test]
fn adam_matches_scalar_reference() {
    // Minimize (p - 3)^2 from p = 0.
    let cfg = OptimConfig { weight_decay: 0.01, ..OptimConfig::default() };
    let mut params = ParamStore::new();
    params.insert("p", Tensor::scalar(0.0));
    let mut adam = AdamState::default();
    let mut reference = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
    let mut p_ref = 0.0;
    for step in 0..100 {
        let lr = if step < 50 { 0.05 } else { 0.005 };
        let p = params.get("p").unwrap().item();
        let grad = BTreeMap::from([("p".to_string(), Tensor::scalar(2.0 * (p - 3.0)))]);
        adam.step(&mut params, &grad, lr, &cfg, |_| true);
        p_ref = reference.step(p_ref, 2.0 * (p_ref - 3.0), lr, &cfg);
        assert!((params.get("p").unwrap().item() - p_ref).abs() <= 1e-9, "step {step}");
    }
    assert_eq!(adam.steps["p"], 100);
}

#[test]
fn epoch_accounting_at_batch_one() {
    let cfg = OptimConfig::default();
    for n in [1, 12, 300] {
        assert_eq!(cfg.steps_per_epoch(n), n);
        assert_eq!(cfg.total_steps(n), 80 * n);
    }
    let order = epoch_order(12, 3, 0);
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    assert_ne!(epoch_order(12, 3, 0), epoch_order(12, 3, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn crops_keep_the_additive_model(seed in any::<u64>(), ch in 1usize..=24, cw in 1usize..=24) {
        let pair = &synth_pairs(1, 24, 2)[0];
        let c = random_crop(pair, (ch, cw), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(c.clean.shape(), &[1, 3, ch, cw][..]);
        prop_assert_eq!(c.identity_residual(), 0.0);
        let again = random_crop(pair, (ch, cw), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(again.rainy.bit_eq(&c.rainy));
    }
}

#[test]
fn full_size_crop_is_identity_or_mirror() {
    let pair = &synth_pairs(1, 16, 3)[0];
    for seed in 0..8 {
        let c = random_crop(pair, (16, 16), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert!(c.rainy.bit_eq(&pair.rainy) || c.rainy.bit_eq(&pair.rainy.flip_horizontal()));
    }
    let err = random_crop(pair, (16, 17), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::CropTooLarge(_)));
}

#[test]
fn derainer_loss_decreases_on_a_toy_set() {
    let data = synth_pairs(2, 16, 5)[..4].to_vec();
    for seed in [1, 2, 3] {
        let out = train_derainer(&data, &toy_cfg(Variant::DidMdn, 200), seed, &RunOptions::default()).unwrap();
        assert_eq!(out.curve.len(), 200);
        let head: f64 = out.curve[..4].iter().map(|r| r.total).sum();
        let tail: f64 = out.curve[196..].iter().map(|r| r.total).sum();
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
        for r in &out.curve {
            assert!((r.total - (r.residual + r.detail + r.feature)).abs() <= 1e-9);
        }
    }
}

#[test]
fn derainer_training_is_deterministic() {
    let data = synth_pairs(1, 16, 6);
    let cfg = toy_cfg(Variant::DidMdn, 12);
    let a = train_derainer(&data, &cfg, 9, &RunOptions::default()).unwrap();
    let b = train_derainer(&data, &cfg, 9, &RunOptions::default()).unwrap();
    assert!(a.curve.iter().zip(&b.curve).all(|(x, y)| x.bit_eq(y)));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let c = train_derainer(&data, &cfg, 10, &RunOptions::default()).unwrap();
    assert!(!a.curve[0].bit_eq(&c.curve[0]));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = synth_pairs(1, 16, 7);
    let cfg = toy_cfg(Variant::MultiNoLabel, 10);
    let dir = tempfile::tempdir().unwrap();
    let full = train_derainer(&data, &cfg, 4, &RunOptions::default()).unwrap();

    let first = train_derainer(
        &data,
        &cfg,
        4,
        &RunOptions { out_dir: Some(dir.path().to_path_buf()), stop_after: Some(4), ..Default::default() },
    )
    .unwrap();
    assert_eq!(first.curve.len(), 4);
    let saved = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(saved.step, 4);
    let second = train_derainer(
        &data,
        &cfg,
        4,
        &RunOptions { out_dir: Some(dir.path().to_path_buf()), resume: Some(saved), ..Default::default() },
    )
    .unwrap();
    let stitched: Vec<_> = first.curve.iter().chain(&second.curve).collect();
    assert_eq!(stitched.len(), full.curve.len());
    for (a, b) in stitched.iter().zip(&full.curve) {
        assert!(a.bit_eq(b), "step {}", a.step);
    }
    assert!(second.checkpoint.model_params.bit_eq(&full.checkpoint.model_params));
    let csv = std::fs::read_to_string(dir.path().join("loss_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn resume_under_another_config_is_rejected() {
    let data = synth_pairs(1, 16, 8);
    let cfg = toy_cfg(Variant::Single, 2);
    let out = train_derainer(&data, &cfg, 1, &RunOptions::default()).unwrap();
    let other = DerainTrainConfig { model: DerainerConfig { lambda_f: 0.5, ..cfg.model.clone() }, ..cfg };
    let err = train_derainer(&data, &other, 1, &RunOptions { resume: Some(out.checkpoint), ..Default::default() });
    assert!(matches!(err, Err(Error::ConfigMismatch(_))));
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let data = synth_pairs(1, 16, 9);
    let out = train_derainer(&data, &toy_cfg(Variant::DidMdn, 3), 2, &RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert!(loaded.model_params.bit_eq(&out.checkpoint.model_params));
    assert_eq!(loaded.optim_state, out.checkpoint.optim_state);
    assert_eq!(loaded.rng_state, out.checkpoint.rng_state);
    let path2 = dir.path().join("b.bin");
    loaded.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(Checkpoint::load_expecting(&path2, &[0u8; 32]), Err(Error::ConfigMismatch(_))));
}

#[test]
fn derainer_training_errors() {
    let cfg = toy_cfg(Variant::DidMdn, 5);
    assert!(matches!(train_derainer(&[], &cfg, 0, &RunOptions::default()), Err(Error::EmptyManifest(_))));

    let mut data = synth_pairs(1, 16, 10);
    for p in &mut data {
        p.rainy.data_mut()[0] = f64::NAN;
    }
    let opts = RunOptions { checkpoint_every: 1, ..Default::default() };
    match train_derainer(&data, &toy_cfg(Variant::DidMdn, 5), 0, &opts) {
        Err(Error::DivergenceDetected { step, last_good }) => {
            assert_eq!(step, 0);
            assert_eq!(last_good.unwrap().step, 0);
        }
        other => panic!("{other:?}"),
    }
}

fn tiny_classifier_cfg(steps: (usize, usize, usize)) -> ClassifierTrainConfig {
    ClassifierTrainConfig {
        model: ClassifierConfig { input_size: (16, 16), ..ClassifierConfig::toy() },
        optim: OptimConfig { crop: Some((16, 16)), ..OptimConfig::default() },
        residual_steps: steps.0,
        head_steps: steps.1,
        joint_steps: steps.2,
        joint_lr_scale: 0.1,
    }
}

fn changed(a: &ParamStore, b: &ParamStore, prefix: &str) -> (usize, usize) {
    let mut moved = 0;
    let mut total = 0;
    for (name, t) in a.iter().filter(|(n, _)| n.starts_with(prefix)) {
        total += 1;
        if !t.bit_eq(b.get(name).unwrap()) {
            moved += 1;
        }
    }
    (moved, total)
}

#[test]
fn classifier_stages_respect_the_freeze_contract() {
    let data = synth_pairs(2, 16, 11);
    let cfg = tiny_classifier_cfg((3, 3, 3));
    let out = train_classifier(&data, &cfg, 1, None).unwrap();
    let init = didmdn::classifier::Classifier::new(cfg.model.clone()).unwrap().init(1).unwrap();
    let [s1, s2, s3] = [&out.stage_params[0], &out.stage_params[1], &out.stage_params[2]];

    let (moved, total) = changed(&init, s1, EXTRACTOR);
    assert_eq!(moved, total, "stage 1 trains the whole extractor");
    assert_eq!(changed(&init, s1, HEAD).0, 0, "stage 1 leaves the head alone");

    assert_eq!(changed(s1, s2, EXTRACTOR).0, 0, "stage 2 freezes the extractor");
    let (moved, total) = changed(s1, s2, HEAD);
    assert_eq!(moved, total);

    assert_eq!(changed(s2, s3, EXTRACTOR).0, changed(s2, s3, EXTRACTOR).1);
    assert_eq!(changed(s2, s3, HEAD).0, changed(s2, s3, HEAD).1);

    let meta = &out.checkpoint.meta;
    assert_eq!((meta["stage1_end"].as_str(), meta["stage2_end"].as_str(), meta["stage3_end"].as_str()), ("3", "6", "9"));
    assert_eq!(out.curve.len(), 9);
}

#[test]
fn classifier_requires_every_label() {
    let data: Vec<_> = synth_pairs(1, 16, 12).into_iter().filter(|p| p.label != DensityLabel::Medium).collect();
    let err = train_classifier(&data, &tiny_classifier_cfg((1, 1, 1)), 0, None);
    assert!(matches!(err, Err(Error::MissingLabelClass(DensityLabel::Medium))));
}

#[test]
fn classifier_training_is_deterministic() {
    let data = synth_pairs(1, 16, 13);
    let cfg = tiny_classifier_cfg((2, 3, 2));
    let a = train_classifier(&data, &cfg, 5, None).unwrap();
    let b = train_classifier(&data, &cfg, 5, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.curve_csv(), b.curve_csv());
}

#[test]
fn residual_stage_overfits_one_pair() {
    let pair = synth_pairs(1, 16, 14).pop().unwrap();
    assert_eq!(pair.label, DensityLabel::Heavy);
    let data: Vec<_> = synth_pairs(1, 16, 14);
    let cfg = ClassifierTrainConfig {
        optim: OptimConfig { crop: None, flip: false, lr_drop_epoch: 1_000_000, ..OptimConfig::default() },
        ..tiny_classifier_cfg((600, 0, 0))
    };
    let out = train_classifier(&data, &cfg, 3, None).unwrap();
    let clf = didmdn::classifier::Classifier::new(cfg.model.clone()).unwrap();
    let r_hat = clf.estimate_residual(&out.checkpoint.model_params, &pair.rainy).unwrap();
    let err = r_hat.max_abs_diff(&pair.rain).unwrap();
    assert!(err <= 0.05, "max |r_hat - r| = {err}");
}
