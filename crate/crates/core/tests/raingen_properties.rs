use std::path::Path;

use didmdn::label::DensityLabel;
use didmdn::raingen::{
    build_dataset, compose, density_to_params, render_streaks, write_procedural_backgrounds, Dataset,
    DatasetManifest, RainParams, MANIFEST_FILE,
};
use didmdn::{imageio, Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(coverage: f64, seed: u64) -> RainParams {
    RainParams { coverage, streak_length: 10, orientation_deg: 15.0, intensity: 0.8, blur_sigma: 0.3, seed }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coverage_lies_in_label_band(seed in any::<u64>(), idx in 0usize..3) {
        let label = DensityLabel::from_index(idx).unwrap();
        let p = density_to_params(label, &mut ChaCha8Rng::seed_from_u64(seed));
        let (lo, hi) = label.coverage_band();
        prop_assert!(p.coverage >= lo && p.coverage <= hi);
        prop_assert!(p.validate().is_ok());
        let again = density_to_params(label, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(p, again);
    }

    #[test]
    fn rain_layer_is_deterministic_and_bounded(seed in any::<u64>(), cov in 0.0f64..1.0) {
        let a = render_streaks(&params(cov, seed), (24, 20)).unwrap();
        let b = render_streaks(&params(cov, seed), (24, 20)).unwrap();
        prop_assert!(a.bit_eq(&b));
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn compose_satisfies_additive_model_exactly(seed in 0u64..500, level in 0.0f64..1.0) {
        let clean = didmdn::gradcheck::probe_tensor(&[1, 3, 12, 12], seed).map(|v| (level + 0.3 * v).clamp(0.0, 1.0));
        let rain = render_streaks(&params(0.5, seed), (12, 12)).unwrap();
        let (rainy, stored) = compose(&clean, &rain).unwrap();
        for ((y, x), r) in rainy.data().iter().zip(clean.data()).zip(stored.data()) {
            prop_assert_eq!(y - x - r, 0.0);
            prop_assert!((0.0..=1.0).contains(y));
        }
    }
}

#[test]
fn zero_coverage_gives_empty_layer() {
    let layer = render_streaks(&params(0.0, 3), (16, 16)).unwrap();
    assert!(layer.data().iter().all(|v| *v == 0.0));
}

#[test]
fn intensity_scales_linearly_before_clipping() {
    let lo = RainParams { intensity: 0.5, blur_sigma: 0.0, coverage: 0.05, ..params(0.0, 9) };
    let hi = RainParams { intensity: 1.0, ..lo.clone() };
    let a = render_streaks(&lo, (32, 32)).unwrap();
    let b = render_streaks(&hi, (32, 32)).unwrap();
    assert!(a.data().iter().any(|v| *v > 0.0));
    for (x, y) in a.data().iter().zip(b.data()) {
        if *y < 1.0 {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn brightness_increases_with_coverage_over_seeds() {
    for seed in 0..12 {
        let mean = |c: f64| render_streaks(&params(c, seed), (64, 64)).unwrap().mean();
        assert!(mean(0.9) > mean(0.1), "seed {seed}");
        let mids: Vec<f64> = DensityLabel::ALL
            .iter()
            .map(|l| {
                let (lo, hi) = l.coverage_band();
                mean((lo + hi) / 2.0)
            })
            .collect();
        assert!(mids[0] < mids[1] && mids[1] < mids[2], "seed {seed}: {mids:?}");
    }
}

#[test]
fn streaks_longer_than_image_are_rejected() {
    let p = RainParams { streak_length: 20, ..params(0.3, 1) };
    assert!(matches!(render_streaks(&p, (19, 40)), Err(Error::ShapeTooSmall(_))));
}

#[test]
fn compose_examples() {
    let c = |v| Tensor::full(&[1, 3, 4, 4], v);
    let r = |v| Tensor::full(&[1, 1, 4, 4], v);
    let (y, s) = compose(&c(0.5), &r(0.0)).unwrap();
    assert!(y.bit_eq(&c(0.5)) && s.data().iter().all(|v| *v == 0.0));
    let (y, s) = compose(&c(0.4), &r(0.3)).unwrap();
    assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    assert!(s.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    let (y, s) = compose(&c(0.9), &r(0.4)).unwrap();
    assert!(y.data().iter().all(|v| *v == 1.0));
    assert!(s.data().iter().all(|v| (v - 0.1).abs() < 1e-15));
    assert!(matches!(compose(&c(0.5), &Tensor::zeros(&[1, 1, 4, 5])), Err(Error::ShapeMismatch(_))));
}

#[test]
fn dataset_is_balanced_consistent_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let bg = dir.path().join("bg");
    write_procedural_backgrounds(&bg, 3, 4, 40, 40).unwrap();
    let m1 = build_dataset(&bg, 4, 21, &dir.path().join("a")).unwrap();
    let m2 = build_dataset(&bg, 4, 21, &dir.path().join("b")).unwrap();
    assert_eq!(m1.records.len(), 12);
    for label in DensityLabel::ALL {
        assert_eq!(m1.counts_per_label[&label], 4);
    }
    assert_eq!(m1, m2);
    assert_eq!(tree_bytes(&dir.path().join("a")), tree_bytes(&dir.path().join("b")));

    let other = build_dataset(&bg, 4, 22, &dir.path().join("c")).unwrap();
    assert_ne!(m1.records[0].params, other.records[0].params);

    let ds = Dataset::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    for (pair, rec) in ds.samples.iter().zip(&m1.records) {
        assert_eq!(pair.identity_residual(), 0.0);
        let (lo, hi) = rec.label.coverage_band();
        assert!(rec.params.coverage >= lo && rec.params.coverage <= hi);
        assert_eq!(pair.clean.shape(), &[1, 3, 40, 40]);
        assert!(pair.rainy.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let reread = DatasetManifest::read(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    assert_eq!(reread, m1);
}

#[test]
fn dataset_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(empty.join("notes.txt"), "not an image").unwrap();
    assert!(matches!(build_dataset(&empty, 2, 0, &dir.path().join("o")), Err(Error::EmptyCleanDir(_))));
    assert!(matches!(
        build_dataset(&dir.path().join("missing"), 2, 0, &dir.path().join("o")),
        Err(Error::EmptyCleanDir(_))
    ));

    let bg = dir.path().join("bg");
    write_procedural_backgrounds(&bg, 1, 0, 32, 32).unwrap();
    let root = dir.path().join("ds");
    let m = build_dataset(&bg, 1, 5, &root).unwrap();
    let rec = &m.records[2];
    let mut rainy = imageio::read_rgb(&root.join(&rec.rainy_path)).unwrap();
    let px = rainy.get_pixel_mut(3, 3);
    px[0] = px[0].wrapping_add(1);
    imageio::write_rgb(&root.join(&rec.rainy_path), &rainy).unwrap();
    assert!(matches!(Dataset::load(&root.join(MANIFEST_FILE)), Err(Error::CorruptDataset(_))));

    let mut bad = m.clone();
    bad.records.pop();
    bad.write(&root.join(MANIFEST_FILE)).unwrap();
    assert!(matches!(Dataset::load(&root.join(MANIFEST_FILE)), Err(Error::CorruptDataset(_))));
}
