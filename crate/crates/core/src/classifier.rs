//! Residual-aware rain-density classifier.
//!
//! A label-free copy of the de-raining trunk estimates the rain residual;
//! a small conv / pool / fully-connected head classifies that residual into
//! light, medium or heavy.

use serde::{Deserialize, Serialize};

use crate::derainer::{three_streams, ResidualHead, Trunk};
use crate::graph::{Graph, Var};
use crate::kernels::pool_out;
use crate::label::DensityLabel;
use crate::netblocks::{self, conv, BlockShape};
use crate::params::{init_conv, init_linear, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Prefix of the residual-extractor parameters.
pub const EXTRACTOR: &str = "extractor.";
/// Prefix of the classification-head parameters.
pub const HEAD: &str = "cls.";
/// Pooled grid side at the original training resolution (657 px).
pub const NATIVE_POOLED: usize = 73;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub block: BlockShape,
    pub residual_hidden: usize,
    pub head_channels: [usize; 3],
    pub pool_kernel: usize,
    pub pool_stride: usize,
    /// Grid the pooled map is adaptively averaged to when it is not the
    /// native 73x73.
    pub adaptive_grid: (usize, usize),
    pub fc_hidden: usize,
    pub n_classes: usize,
    /// Image size the fully-connected layer is built for.
    pub input_size: (usize, usize),
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            block: BlockShape::default(),
            residual_hidden: 64,
            head_channels: [24, 64, 24],
            pool_kernel: 9,
            pool_stride: 9,
            adaptive_grid: (9, 9),
            fc_hidden: 512,
            n_classes: 3,
            input_size: (64, 64),
        }
    }
}

impl ClassifierConfig {
    pub fn toy() -> Self {
        ClassifierConfig {
            block: BlockShape { n_layers: 2, growth: 4, transition_channels: 8 },
            residual_hidden: 16,
            fc_hidden: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes != 3 {
            return Err(Error::InvalidArgument(format!("n_classes must be 3, got {}", self.n_classes)));
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 || self.fc_hidden == 0 {
            return Err(Error::InvalidArgument("pooling and FC sizes must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size of the map entering the fully-connected layer.
    pub fn pooled_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = pool_out(h, self.pool_kernel, self.pool_stride);
        let pw = pool_out(w, self.pool_kernel, self.pool_stride);
        if ph == 0 || pw == 0 {
            return Err(Error::TooSmall(format!(
                "{h}x{w} residual vanishes under {0}x{0} pooling",
                self.pool_kernel
            )));
        }
        if (ph, pw) == (NATIVE_POOLED, NATIVE_POOLED) {
            Ok((ph, pw))
        } else {
            Ok(self.adaptive_grid)
        }
    }

    pub fn fc_input_width(&self, h: usize, w: usize) -> Result<usize> {
        let (ph, pw) = self.pooled_dims(h, w)?;
        Ok(self.head_channels[2] * ph * pw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub predicted: DensityLabel,
    pub residual_estimate: Tensor,
}

/// Index of the largest logit; ties go to the lowest label code.
pub fn argmax_label(logits: &[f64]) -> DensityLabel {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    DensityLabel::from_index(best).expect("three logits")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierLoss {
    pub residual: f64,
    pub classification: f64,
    pub total: f64,
}

/// `L_{E,r} + L_C` for one example.
pub fn classifier_loss(r_hat: &Tensor, r: &Tensor, logits: &[f64], label: DensityLabel) -> Result<ClassifierLoss> {
    if logits.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 logits, got {}", logits.len())));
    }
    let residual = crate::metrics::mse(r_hat, r)?;
    let classification = crate::graph::log_sum_exp(logits) - logits[label.index()];
    Ok(ClassifierLoss { residual, classification, total: residual + classification })
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub trunk: Trunk,
    pub residual_head: ResidualHead,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub residual: Var,
    pub logits: Var,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let trunk = Trunk::streams("extractor.trunk", three_streams(cfg.block))?;
        let residual_head = ResidualHead {
            name: "extractor.head".into(),
            feature_channels: trunk.out_channels(),
            label_channels: 0,
            hidden: cfg.residual_hidden,
        };
        Ok(Classifier { cfg, trunk, residual_head })
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.trunk.init(&mut store, seed);
        self.residual_head.init(&mut store, seed);
        let [c1, c2, c3] = self.cfg.head_channels;
        init_conv(&mut store, seed, "cls.conv1", 3, c1, 3);
        init_conv(&mut store, seed, "cls.conv2", c1, c2, 3);
        init_conv(&mut store, seed, "cls.conv3", c2, c3, 3);
        let (h, w) = self.cfg.input_size;
        init_linear(&mut store, seed, "cls.fc1", self.cfg.fc_input_width(h, w)?, self.cfg.fc_hidden);
        init_linear(&mut store, seed, "cls.fc2", self.cfg.fc_hidden, self.cfg.n_classes);
        Ok(store)
    }

    pub fn estimate_residual_var(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(y).check_nchw("classifier input")?;
        let div = self.trunk.required_divisor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::IndivisibleDims { height: h, width: w, divisor: div });
        }
        let feats = self.trunk.forward(g, store, y)?;
        let fused = netblocks::fuse(g, &feats, None)?;
        self.residual_head.forward(g, store, fused)
    }

    /// Conv stack and pooling; the returned map is what the FC layer flattens.
    pub fn head_features(&self, g: &mut Graph, store: &ParamStore, r_hat: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(r_hat).check_nchw("classifier head")?;
        if c != 3 {
            return Err(Error::ChannelMismatch(format!("head expects 3 channels, got {c}")));
        }
        let (ph, pw) = self.cfg.pooled_dims(h, w)?;
        let mut x = r_hat;
        for name in ["cls.conv1", "cls.conv2", "cls.conv3"] {
            x = conv(g, store, name, x, 1, true)?;
        }
        let pooled = g.avg_pool(x, self.cfg.pool_kernel, self.cfg.pool_stride)?;
        if g.shape(pooled)[2..] == [ph, pw] {
            Ok(pooled)
        } else {
            g.adaptive_avg_pool(pooled, ph, pw)
        }
    }

    pub fn classify_head_var(&self, g: &mut Graph, store: &ParamStore, r_hat: Var) -> Result<Var> {
        let feats = self.head_features(g, store, r_hat)?;
        let w1 = g.param(store, "cls.fc1.weight")?;
        let b1 = g.param(store, "cls.fc1.bias")?;
        let hidden = g.linear(feats, w1, b1)?;
        let hidden = g.relu(hidden);
        let w2 = g.param(store, "cls.fc2.weight")?;
        let b2 = g.param(store, "cls.fc2.bias")?;
        g.linear(hidden, w2, b2)
    }

    pub fn forward_vars(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<ClassifierVars> {
        let residual = self.estimate_residual_var(g, store, y)?;
        let logits = self.classify_head_var(g, store, residual)?;
        Ok(ClassifierVars { residual, logits })
    }

    pub fn estimate_residual(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let r = self.estimate_residual_var(&mut g, store, yv)?;
        Ok(g.value(r).clone())
    }

    /// Logits for each batch item of a residual map.
    pub fn classify_head(&self, store: &ParamStore, r_hat: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let rv = g.input(r_hat.clone());
        let l = self.classify_head_var(&mut g, store, rv)?;
        Ok(g.value(l).data().chunks(self.cfg.n_classes).map(<[f64]>::to_vec).collect())
    }

    /// Full pass on a single `(1, 3, H, W)` image.
    pub fn forward(&self, store: &ParamStore, y: &Tensor) -> Result<ClassifierOutput> {
        if store.is_empty() {
            return Err(Error::UntrainedModel("classifier has no parameters".into()));
        }
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let out = self.forward_vars(&mut g, store, yv)?;
        let logits = g.value(out.logits).data()[..self.cfg.n_classes].to_vec();
        Ok(ClassifierOutput {
            predicted: argmax_label(&logits),
            logits,
            residual_estimate: g.value(out.residual).clone(),
        })
    }

    pub fn predict_density(&self, store: &ParamStore, y: &Tensor) -> Result<DensityLabel> {
        Ok(self.forward(store, y)?.predicted)
    }
}
