//! Analytic gradients against central finite differences, 64-bit, 8x8 inputs
//! unless a layer needs more room.

mod common;

use common::{input, max_param_grad_err, only, tiny_block as tiny, Build, GRAD_EPS as EPS, GRAD_TOL as TOL};
use didmdn::classifier::{Classifier, ClassifierConfig};
use didmdn::derainer::{feature_loss_var, Derainer, DerainerConfig, FeatureExtractor, Variant};
use didmdn::gradcheck::{check_input, probe_tensor};
use didmdn::graph::{Graph, Var};
use didmdn::label::DensityLabel;
use didmdn::netblocks::{DenseBlock, DenseBlockConfig, Stream, StreamConfig, Transition, TransitionKind};
use didmdn::params::ParamStore;
use didmdn::{Result, Tensor};

fn check(store: &ParamStore, x: &Tensor, build: &Build, per_tensor: usize) {
    let err = max_param_grad_err(store, x, build, per_tensor);
    assert!(err <= TOL, "max relative error {err}");
}

#[test]
fn dense_block_gradients() {
    for kernel in [3, 5, 7] {
        let block = DenseBlock::new("db", DenseBlockConfig { n_layers: 3, growth: 2, kernel, in_channels: 3 });
        let mut store = ParamStore::new();
        block.init(&mut store, 1);
        let b = block.clone();
        check(&store, &input(3, 8, 8, 1), &move |g, s, x| b.forward(g, s, x), 12);
    }
}

#[test]
fn transition_gradients() {
    for kind in [TransitionKind::Down, TransitionKind::Up, TransitionKind::None] {
        let t = Transition::new("t", kind, 4, 3);
        let mut store = ParamStore::new();
        t.init(&mut store, 2);
        check(&store, &input(4, 8, 8, 2), &move |g, s, x| t.forward(g, s, x), 20);
    }
}

#[test]
fn stream_gradients_for_all_recipes() {
    for cfg in [StreamConfig::dense1(3, tiny()), StreamConfig::dense2(3, tiny()), StreamConfig::dense3(3, tiny())] {
        let stream = Stream::new("s", cfg).unwrap();
        let mut store = ParamStore::new();
        stream.init(&mut store, 3);
        check(&store, &input(3, 8, 8, 3), &move |g, s, x| stream.forward(g, s, x), 4);
    }
}

fn tiny_derainer(variant: Variant) -> Derainer {
    let cfg = DerainerConfig {
        block: tiny(),
        dilated_width: 3,
        head_hidden: 4,
        refine_hidden: 4,
        feature_width: 3,
        ..DerainerConfig::toy().with_variant(variant)
    };
    Derainer::new(cfg).unwrap()
}

#[test]
fn full_derainer_gradients_every_variant() {
    let clean = input(3, 8, 8, 4);
    let rainy = clean.map(|v| (v + 0.2).min(1.0));
    let rain = rainy.zip_map(&clean, |y, x| y - x).unwrap();
    for variant in Variant::ALL {
        let model = tiny_derainer(variant);
        let store = model.init(9);
        let (c, r) = (clean.clone(), rain.clone());
        let build = move |g: &mut Graph, s: &ParamStore, y: Var| -> Result<Var> {
            let out = model.forward_vars(g, s, y, &[DensityLabel::Medium])?;
            let cv = g.input(c.clone());
            let rv = g.input(r.clone());
            Ok(model.loss_vars(g, &out, cv, rv)?.total)
        };
        check(&store, &rainy, &build, 3);
    }
}

#[test]
fn feature_loss_input_gradient() {
    let f = FeatureExtractor::random(4, 11);
    let x = input(3, 8, 8, 5);
    let x_hat = input(3, 8, 8, 6);
    let eval = |xh: &Tensor| -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let a = g.input_with_grad(xh.clone());
        let b = g.input(x.clone());
        let l = feature_loss_var(&mut g, a, b, &f)?;
        let grads = g.backward(l)?;
        Ok((g.value(l).item(), grads.wrt(a).unwrap().clone()))
    };
    let (_, analytic) = eval(&x_hat).unwrap();
    let report = check_input(&x_hat, &analytic, |t| Ok(eval(t)?.0), 64, EPS, 6).unwrap();
    assert!(report.max_rel_err <= TOL, "{report:?}");
}

fn tiny_classifier(size: usize) -> Classifier {
    Classifier::new(ClassifierConfig {
        block: tiny(),
        residual_hidden: 4,
        head_channels: [3, 4, 3],
        fc_hidden: 6,
        adaptive_grid: (2, 2),
        input_size: (size, size),
        ..ClassifierConfig::default()
    })
    .unwrap()
}

#[test]
fn classifier_head_gradients() {
    let model = tiny_classifier(18);
    let store = only(&model.init(12).unwrap(), "cls.");
    let m = model.clone();
    let build = move |g: &mut Graph, s: &ParamStore, r: Var| m.classify_head_var(g, s, r);
    check(&store, &probe_tensor(&[1, 3, 18, 18], 8), &build, 12);

    // Cross-entropy on top of the head.
    let m = model.clone();
    let ce = move |g: &mut Graph, s: &ParamStore, r: Var| -> Result<Var> {
        let logits = m.classify_head_var(g, s, r)?;
        g.cross_entropy(logits, &[2])
    };
    check(&store, &probe_tensor(&[1, 3, 18, 18], 9), &ce, 12);
}

#[test]
fn residual_extractor_gradients() {
    let model = tiny_classifier(18);
    let store = only(&model.init(13).unwrap(), "extractor.");
    let build = move |g: &mut Graph, s: &ParamStore, y: Var| model.estimate_residual_var(g, s, y);
    check(&store, &input(3, 8, 8, 10), &build, 3);
}
