//! The density-aware multi-stream de-raining network and its loss.
//!
//! Forward pass: three dense streams (7x7, 5x5, 3x3) extract rain features,
//! the label map is appended, a two-conv head estimates the residual, the
//! residual is subtracted from the input, and two convs refine the result.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::label::DensityLabel;
use crate::netblocks::{self, batch_label_map, conv, BlockShape, LabelEncoding, Stream, StreamConfig};
use crate::params::{init_conv, init_conv_with_extra, param_rng, he_uniform, ParamStore};
use crate::raingen::SamplePair;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// One 5x5 stream, no label.
    Single,
    /// Two dilated convs at each of three dilation rates, with label.
    YangMulti,
    /// Three dense streams, no label.
    MultiNoLabel,
    /// Three dense streams plus the density label map.
    DidMdn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Single, Variant::YangMulti, Variant::MultiNoLabel, Variant::DidMdn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "Single",
            Variant::YangMulti => "Yang-Multi",
            Variant::MultiNoLabel => "Multi-no-label",
            Variant::DidMdn => "DID-MDN",
        }
    }

    pub fn uses_label(self) -> bool {
        matches!(self, Variant::DidMdn | Variant::YangMulti)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', ' '], "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerainerConfig {
    pub variant: Variant,
    pub block: BlockShape,
    /// Channels per dilated conv in the Yang-Multi trunk.
    pub dilated_width: usize,
    pub head_hidden: usize,
    pub refine_hidden: usize,
    pub lambda_f: f64,
    pub label_encoding: LabelEncoding,
    pub feature_width: usize,
    pub feature_seed: u64,
}

impl Default for DerainerConfig {
    fn default() -> Self {
        DerainerConfig {
            variant: Variant::DidMdn,
            block: BlockShape::default(),
            dilated_width: 32,
            head_hidden: 64,
            refine_hidden: 32,
            lambda_f: 1.0,
            label_encoding: LabelEncoding::Scalar,
            feature_width: 16,
            feature_seed: 0x5eed_f00d,
        }
    }
}

impl DerainerConfig {
    /// A narrow configuration that trains in minutes on one CPU core.
    pub fn toy() -> Self {
        DerainerConfig {
            block: BlockShape { n_layers: 2, growth: 4, transition_channels: 8 },
            dilated_width: 12,
            head_hidden: 32,
            refine_hidden: 16,
            feature_width: 8,
            ..Default::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0) || !self.lambda_f.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda_f must be >= 0, got {}", self.lambda_f)));
        }
        if self.head_hidden == 0 || self.refine_hidden == 0 || self.dilated_width == 0 {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Stream recipes for the dense-stream variants.
    pub fn streams(&self) -> Vec<StreamConfig> {
        match self.variant {
            Variant::Single => vec![StreamConfig::dense2(3, self.block)],
            Variant::YangMulti => Vec::new(),
            Variant::MultiNoLabel | Variant::DidMdn => three_streams(self.block),
        }
    }

    pub fn label_channels(&self) -> usize {
        if self.variant.uses_label() {
            self.label_encoding.channels()
        } else {
            0
        }
    }
}

pub fn three_streams(block: BlockShape) -> Vec<StreamConfig> {
    vec![StreamConfig::dense1(3, block), StreamConfig::dense2(3, block), StreamConfig::dense3(3, block)]
}

pub const DILATIONS: [usize; 3] = [1, 2, 3];

/// Feature trunk: either parallel dense streams or the dilated multi-scale
/// stack.
#[derive(Clone, Debug)]
pub enum Trunk {
    Streams(Vec<Stream>),
    Dilated { name: String, width: usize },
}

impl Trunk {
    /// Streams named `{prefix}.stream{k}` after their kernel (7 -> 1,
    /// 5 -> 2, 3 -> 3), so a 5x5 stream starts from the same weights whether
    /// or not the other two are present.
    pub fn streams(prefix: &str, cfgs: Vec<StreamConfig>) -> Result<Self> {
        let streams = cfgs
            .into_iter()
            .map(|c| Stream::new(format!("{prefix}.stream{}", (9 - c.kernel) / 2), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trunk::Streams(streams))
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Trunk::Streams(s) => s.iter().map(|s| s.cfg.out_channels()).sum(),
            Trunk::Dilated { width, .. } => DILATIONS.len() * width,
        }
    }

    pub fn required_divisor(&self) -> usize {
        match self {
            Trunk::Streams(s) => s.iter().map(|s| s.cfg.required_divisor()).max().unwrap_or(1),
            Trunk::Dilated { .. } => 1,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        match self {
            Trunk::Streams(s) => s.iter().for_each(|s| s.init(store, seed)),
            Trunk::Dilated { name, width } => {
                for d in DILATIONS {
                    init_conv(store, seed, &format!("{name}.d{d}.conv1"), 3, *width, 3);
                    init_conv(store, seed, &format!("{name}.d{d}.conv2"), *width, *width, 3);
                }
            }
        }
    }

    /// Feature maps per branch, each at input resolution.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        match self {
            Trunk::Streams(s) => s.iter().map(|s| s.forward(g, store, x)).collect(),
            Trunk::Dilated { name, .. } => DILATIONS
                .iter()
                .map(|&d| {
                    let h = conv(g, store, &format!("{name}.d{d}.conv1"), x, d, true)?;
                    conv(g, store, &format!("{name}.d{d}.conv2"), h, d, true)
                })
                .collect(),
        }
    }
}

/// Two 3x3 convs from fused features to a 3-channel residual, linear output.
#[derive(Clone, Debug)]
pub struct ResidualHead {
    pub name: String,
    pub feature_channels: usize,
    pub label_channels: usize,
    pub hidden: usize,
}

impl ResidualHead {
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        init_conv_with_extra(
            store,
            seed,
            &format!("{}.conv1", self.name),
            self.feature_channels,
            self.label_channels,
            self.hidden,
            3,
        );
        init_conv(store, seed, &format!("{}.conv2", self.name), self.hidden, 3, 3);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        let h = conv(g, store, &format!("{}.conv1", self.name), fused, 1, true)?;
        conv(g, store, &format!("{}.conv2", self.name), h, 1, false)
    }
}

/// A frozen convolutional feature map used by the feature loss. The default
/// is a seed-initialised two-conv ReLU network; any list of same-padded conv
/// layers can be supplied instead.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    /// `(weight, bias)` per layer, each followed by ReLU.
    pub layers: Vec<(Tensor, Tensor)>,
    pub layer_tag: String,
}

impl FeatureExtractor {
    pub fn random(width: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for (i, (c_in, c_out)) in [(3, width), (width, width)].into_iter().enumerate() {
            let mut rng = param_rng(seed, &format!("features.conv{i}"));
            layers.push((he_uniform(&[c_out, c_in, 3, 3], c_in * 9, &mut rng), Tensor::zeros(&[c_out])));
        }
        FeatureExtractor { layers, layer_tag: "relu2".into() }
    }

    pub fn identity() -> Self {
        FeatureExtractor { layers: Vec::new(), layer_tag: "input".into() }
    }

    pub fn from_layers(layers: Vec<(Tensor, Tensor)>, layer_tag: impl Into<String>) -> Result<Self> {
        for (w, b) in &layers {
            if w.shape().len() != 4 || b.shape() != [w.shape()[0]] {
                return Err(Error::ShapeMismatch(format!("feature layer {:?} / {:?}", w.shape(), b.shape())));
            }
        }
        Ok(FeatureExtractor { layers, layer_tag: layer_tag.into() })
    }

    /// `(C, H, W)` of the features for an `h x w` input.
    pub fn feature_dims(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let c = self.layers.last().map(|(wt, _)| wt.shape()[0]).unwrap_or(3);
        (c, h, w)
    }

    /// Records the extractor on `g`. Its weights enter as constants.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in &self.layers {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let y = g.conv2d(h, wv, Some(bv), 1)?;
            h = g.relu(y);
        }
        Ok(h)
    }
}

/// `1/(C W H) ||F(x_hat) - F(x)||^2`, averaged over the batch.
pub fn feature_loss_var(g: &mut Graph, x_hat: Var, x: Var, f: &FeatureExtractor) -> Result<Var> {
    g.value(x_hat).same_shape(g.value(x))?;
    let a = f.forward(g, x_hat)?;
    let b = f.forward(g, x)?;
    g.mse(a, b)
}

pub fn feature_loss(x_hat: &Tensor, x: &Tensor, f: &FeatureExtractor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.input(x_hat.clone());
    let b = g.input(x.clone());
    let l = feature_loss_var(&mut g, a, b, f)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerainOutput {
    pub residual: Tensor,
    pub coarse: Tensor,
    /// Unclipped refinement output; see [`DerainOutput::image`].
    pub refined: Tensor,
}

impl DerainOutput {
    /// The refined image clipped to the displayable range.
    pub fn image(&self) -> Tensor {
        self.refined.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DerainVars {
    pub residual: Var,
    pub coarse: Var,
    pub refined: Var,
}

/// Raw loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub residual: f64,
    pub detail: f64,
    pub feature: f64,
    pub lambda_f: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn recombine(&self) -> f64 {
        self.residual + self.detail + self.lambda_f * self.feature
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub residual: Var,
    pub detail: Var,
    pub feature: Var,
    pub total: Var,
}

impl LossVars {
    pub fn terms(&self, g: &Graph, lambda_f: f64) -> LossTerms {
        LossTerms {
            residual: g.value(self.residual).item(),
            detail: g.value(self.detail).item(),
            feature: g.value(self.feature).item(),
            lambda_f,
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Derainer {
    pub cfg: DerainerConfig,
    pub trunk: Trunk,
    pub head: ResidualHead,
    pub features: FeatureExtractor,
}

impl Derainer {
    pub fn new(cfg: DerainerConfig) -> Result<Self> {
        cfg.validate()?;
        let trunk = match cfg.variant {
            Variant::YangMulti => Trunk::Dilated { name: "trunk.dilated".into(), width: cfg.dilated_width },
            _ => Trunk::streams("trunk", cfg.streams())?,
        };
        let head = ResidualHead {
            name: "head".into(),
            feature_channels: trunk.out_channels(),
            label_channels: cfg.label_channels(),
            hidden: cfg.head_hidden,
        };
        let features = FeatureExtractor::random(cfg.feature_width, cfg.feature_seed);
        Ok(Derainer { cfg, trunk, head, features })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.trunk.init(&mut store, seed);
        self.head.init(&mut store, seed);
        init_conv(&mut store, seed, "refine.conv1", 3, self.cfg.refine_hidden, 3);
        init_conv(&mut store, seed, "refine.conv2", self.cfg.refine_hidden, 3, 3);
        store
    }

    pub fn required_divisor(&self) -> usize {
        self.trunk.required_divisor()
    }

    /// Records the forward pass for a batch with one label per item.
    pub fn forward_vars(&self, g: &mut Graph, store: &ParamStore, y: Var, labels: &[DensityLabel]) -> Result<DerainVars> {
        let (n, c, h, w) = g.value(y).check_nchw("derain input")?;
        if c != 3 {
            return Err(Error::ChannelMismatch(format!("expected an RGB input, got {c} channels")));
        }
        let div = self.required_divisor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::IndivisibleDims { height: h, width: w, divisor: div });
        }
        let feats = self.trunk.forward(g, store, y)?;
        let label_map = if self.cfg.variant.uses_label() {
            if labels.len() != n {
                return Err(Error::ShapeMismatch(format!("{} labels for a batch of {n}", labels.len())));
            }
            let map = batch_label_map(labels, (h, w), self.cfg.label_encoding)?;
            Some(g.input(map.tensor))
        } else {
            None
        };
        let fused = netblocks::fuse(g, &feats, label_map)?;
        let residual = self.head.forward(g, store, fused)?;
        let coarse = g.sub(y, residual)?;
        let r1 = conv(g, store, "refine.conv1", coarse, 1, true)?;
        let refined = conv(g, store, "refine.conv2", r1, 1, false)?;
        Ok(DerainVars { residual, coarse, refined })
    }

    pub fn forward(&self, store: &ParamStore, y: &Tensor, label: DensityLabel) -> Result<DerainOutput> {
        let mut g = Graph::new();
        let yv = g.input(y.clone());
        let n = y.shape().first().copied().unwrap_or(0);
        let out = self.forward_vars(&mut g, store, yv, &vec![label; n])?;
        Ok(DerainOutput {
            residual: g.value(out.residual).clone(),
            coarse: g.value(out.coarse).clone(),
            refined: g.value(out.refined).clone(),
        })
    }

    /// `L_{E,r} + L_{E,d} + lambda_F L_F` on the graph.
    pub fn loss_vars(&self, g: &mut Graph, out: &DerainVars, clean: Var, rain: Var) -> Result<LossVars> {
        let residual = g.mse(out.residual, rain)?;
        let detail = g.mse(out.refined, clean)?;
        let feature = feature_loss_var(g, out.refined, clean, &self.features)?;
        let weighted = g.scale(feature, self.cfg.lambda_f);
        let partial = g.add(residual, detail)?;
        let total = g.add(partial, weighted)?;
        Ok(LossVars { residual, detail, feature, total })
    }

    /// Forward plus loss for one training pair.
    pub fn pair_loss(&self, g: &mut Graph, store: &ParamStore, pair: &SamplePair) -> Result<LossVars> {
        let y = g.input(pair.rainy.clone());
        let clean = g.input(pair.clean.clone());
        let rain = g.input(pair.rain.clone());
        let out = self.forward_vars(g, store, y, &[pair.label])?;
        self.loss_vars(g, &out, clean, rain)
    }
}

/// Loss of an already computed output against its training pair.
pub fn derainer_loss(out: &DerainOutput, pair: &SamplePair, f: &FeatureExtractor, lambda_f: f64) -> Result<LossTerms> {
    let residual = crate::metrics::mse(&out.residual, &pair.rain)?;
    let detail = crate::metrics::mse(&out.refined, &pair.clean)?;
    let feature = feature_loss(&out.refined, &pair.clean, f)?;
    Ok(LossTerms {
        residual,
        detail,
        feature,
        lambda_f,
        total: residual + detail + lambda_f * feature,
    })
}
