//! Network building blocks: dense blocks, transition layers, multi-scale
//! dense streams, label maps and feature fusion.
//!
//! Every block exposes `init` (seeded, order-independent parameter creation
//! under a name prefix) and `forward` (records ops onto a [`Graph`]).

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::label::DensityLabel;
use crate::params::{init_conv, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Number of dense blocks in every stream.
pub const BLOCKS_PER_STREAM: usize = 6;

/// Same-padded conv with bias, optionally followed by ReLU. Parameters are
/// `{name}.weight` and `{name}.bias`.
pub fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, dilation: usize, relu: bool) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w, Some(b), dilation)?;
    Ok(if relu { g.relu(y) } else { y })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    Down,
    Up,
    None,
}

impl TransitionKind {
    /// Change in pyramid depth: `+1` halves the resolution.
    pub fn depth_step(self) -> i32 {
        match self {
            TransitionKind::Down => 1,
            TransitionKind::Up => -1,
            TransitionKind::None => 0,
        }
    }

    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            TransitionKind::Down => (h / 2, w / 2),
            TransitionKind::Up => (h * 2, w * 2),
            TransitionKind::None => (h, w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    pub n_layers: usize,
    pub growth: usize,
    pub kernel: usize,
    pub in_channels: usize,
}

impl DenseBlockConfig {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.n_layers * self.growth
    }

    pub fn validate(&self) -> Result<()> {
        if ![3, 5, 7].contains(&self.kernel) {
            return Err(Error::InvalidArgument(format!("dense-block kernel {} not in {{3,5,7}}", self.kernel)));
        }
        if self.in_channels == 0 || (self.n_layers > 0 && self.growth == 0) {
            return Err(Error::InvalidArgument(format!("degenerate dense block {self:?}")));
        }
        Ok(())
    }
}

/// Densely connected block: layer `l` sees the concatenation of the block
/// input and the outputs of layers `0..l`; the block returns all of them
/// concatenated.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub cfg: DenseBlockConfig,
    pub name: String,
}

impl DenseBlock {
    pub fn new(name: impl Into<String>, cfg: DenseBlockConfig) -> Self {
        DenseBlock { cfg, name: name.into() }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for l in 0..self.cfg.n_layers {
            let c_in = self.cfg.in_channels + l * self.cfg.growth;
            init_conv(store, seed, &self.layer_name(l), c_in, self.cfg.growth, self.cfg.kernel);
        }
    }

    fn layer_name(&self, l: usize) -> String {
        format!("{}.layer{l}", self.name)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(x).check_nchw("dense block")?;
        if c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch(format!(
                "{} expects {} channels, got {c}",
                self.name, self.cfg.in_channels
            )));
        }
        let mut features = vec![x];
        for l in 0..self.cfg.n_layers {
            let input = if features.len() == 1 { x } else { g.concat(&features)? };
            let out = conv(g, store, &self.layer_name(l), input, 1, true)?;
            features.push(out);
        }
        if features.len() == 1 {
            Ok(x)
        } else {
            g.concat(&features)
        }
    }
}

/// Transition layer: `down` is conv1x1 + ReLU + 2x2 average pool, `up` is
/// nearest 2x upsampling + conv3x3 + ReLU, `none` is conv1x1 + ReLU.
#[derive(Clone, Debug)]
pub struct Transition {
    pub kind: TransitionKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub name: String,
}

impl Transition {
    pub fn new(name: impl Into<String>, kind: TransitionKind, in_channels: usize, out_channels: usize) -> Self {
        Transition { kind, in_channels, out_channels, name: name.into() }
    }

    fn kernel(&self) -> usize {
        if self.kind == TransitionKind::Up {
            3
        } else {
            1
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        init_conv(store, seed, &self.name, self.in_channels, self.out_channels, self.kernel());
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).check_nchw("transition")?;
        match self.kind {
            TransitionKind::Down => {
                let y = conv(g, store, &self.name, x, 1, true)?;
                if h < 2 || w < 2 {
                    return Err(Error::TooSmall(format!("{h}x{w} input to a down transition")));
                }
                g.avg_pool(y, 2, 2)
            }
            TransitionKind::Up => {
                if h == 0 || w == 0 {
                    return Err(Error::TooSmall("empty input to an up transition".into()));
                }
                let y = g.upsample_nearest(x, 2)?;
                conv(g, store, &self.name, y, 1, true)
            }
            TransitionKind::None => conv(g, store, &self.name, x, 1, true),
        }
    }
}

/// Width settings shared by every block of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub n_layers: usize,
    pub growth: usize,
    /// Output channels of every transition layer.
    pub transition_channels: usize,
}

impl Default for BlockShape {
    fn default() -> Self {
        BlockShape { n_layers: 4, growth: 16, transition_channels: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub kernel: usize,
    pub transitions: Vec<TransitionKind>,
    pub blocks: Vec<DenseBlockConfig>,
    pub transition_channels: usize,
}

impl StreamConfig {
    pub fn from_recipe(kernel: usize, transitions: &[TransitionKind], in_channels: usize, shape: BlockShape) -> Self {
        let blocks = (0..transitions.len())
            .map(|i| DenseBlockConfig {
                n_layers: shape.n_layers,
                growth: shape.growth,
                kernel,
                in_channels: if i == 0 { in_channels } else { shape.transition_channels },
            })
            .collect();
        StreamConfig {
            kernel,
            transitions: transitions.to_vec(),
            blocks,
            transition_channels: shape.transition_channels,
        }
    }

    /// 7x7 kernels, three down and three up transitions.
    pub fn dense1(in_channels: usize, shape: BlockShape) -> Self {
        use TransitionKind::*;
        Self::from_recipe(7, &[Down, Down, Down, Up, Up, Up], in_channels, shape)
    }

    /// 5x5 kernels, two down, two no-sampling and two up transitions.
    pub fn dense2(in_channels: usize, shape: BlockShape) -> Self {
        use TransitionKind::*;
        Self::from_recipe(5, &[Down, Down, None, None, Up, Up], in_channels, shape)
    }

    /// 3x3 kernels, one down, four no-sampling and one up transition.
    pub fn dense3(in_channels: usize, shape: BlockShape) -> Self {
        use TransitionKind::*;
        Self::from_recipe(3, &[Down, None, None, None, None, Up], in_channels, shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != BLOCKS_PER_STREAM || self.transitions.len() != BLOCKS_PER_STREAM {
            return Err(Error::InvalidArgument(format!(
                "a stream needs exactly {BLOCKS_PER_STREAM} blocks and transitions"
            )));
        }
        let net: i32 = self.transitions.iter().map(|t| t.depth_step()).sum();
        if net != 0 {
            return Err(Error::InvalidArgument("stream has unequal down/up transition counts".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.kernel != self.kernel {
                return Err(Error::InvalidArgument(format!("block {i} kernel differs from stream kernel")));
            }
            if i > 0 && b.in_channels != self.transition_channels {
                return Err(Error::InvalidArgument(format!(
                    "block {i} expects {} channels but transitions emit {}",
                    b.in_channels, self.transition_channels
                )));
            }
        }
        Ok(())
    }

    /// Pyramid depth at which each block runs (0 = input resolution).
    pub fn block_depths(&self) -> Vec<i32> {
        let mut d = 0;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, t) in self.transitions.iter().enumerate() {
            out.push(d);
            if i + 1 < self.transitions.len() {
                d += t.depth_step();
            }
        }
        out
    }

    /// Input height and width must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        let max = self.block_depths().into_iter().max().unwrap_or(0).max(0);
        1 << max
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.iter().map(DenseBlockConfig::out_channels).sum()
    }
}

/// One stream: six dense blocks with transitions between them. Each block's
/// output is brought back to input resolution (nearest upsampling or
/// average pooling) and the six are concatenated channel-wise.
///
/// The first five transitions are learned layers. The sixth always returns
/// the last block to input resolution in a balanced recipe, so it is
/// realised by the same parameter-free resampling as the other taps.
#[derive(Clone, Debug)]
pub struct Stream {
    pub cfg: StreamConfig,
    pub name: String,
}

impl Stream {
    pub fn new(name: impl Into<String>, cfg: StreamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Stream { cfg, name: name.into() })
    }

    fn block(&self, i: usize) -> DenseBlock {
        DenseBlock::new(format!("{}.block{i}", self.name), self.cfg.blocks[i])
    }

    fn transition(&self, i: usize) -> Transition {
        Transition::new(
            format!("{}.trans{i}", self.name),
            self.cfg.transitions[i],
            self.cfg.blocks[i].out_channels(),
            self.cfg.transition_channels,
        )
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for i in 0..BLOCKS_PER_STREAM {
            self.block(i).init(store, seed);
            if i + 1 < BLOCKS_PER_STREAM {
                self.transition(i).init(store, seed);
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).check_nchw("stream")?;
        let div = self.cfg.required_divisor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::IndivisibleDims { height: h, width: w, divisor: div });
        }
        let depths = self.cfg.block_depths();
        let mut taps = Vec::with_capacity(BLOCKS_PER_STREAM);
        let mut cur = x;
        for i in 0..BLOCKS_PER_STREAM {
            let out = self.block(i).forward(g, store, cur)?;
            taps.push(resample_to_depth_zero(g, out, depths[i])?);
            if i + 1 < BLOCKS_PER_STREAM {
                cur = self.transition(i).forward(g, store, out)?;
            }
        }
        g.concat(&taps)
    }
}

fn resample_to_depth_zero(g: &mut Graph, x: Var, depth: i32) -> Result<Var> {
    match depth {
        0 => Ok(x),
        d if d > 0 => g.upsample_nearest(x, 1 << d),
        d => {
            let f = 1 << (-d);
            g.avg_pool(x, f, f)
        }
    }
}

/// How the density label is presented to the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelEncoding {
    /// One channel filled with the label code (1, 2 or 3).
    #[default]
    Scalar,
    /// Three indicator channels.
    OneHot,
}

impl LabelEncoding {
    pub fn channels(self) -> usize {
        match self {
            LabelEncoding::Scalar => 1,
            LabelEncoding::OneHot => 3,
        }
    }
}

/// A constant label map at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub tensor: Tensor,
}

/// Single-channel `(1, 1, H, W)` map filled with the label code.
pub fn make_label_map(label: DensityLabel, shape: (usize, usize)) -> LabelMap {
    LabelMap { tensor: Tensor::full(&[1, 1, shape.0, shape.1], label.code() as f64) }
}

/// Label maps for a batch, stacked along the batch axis.
pub fn batch_label_map(labels: &[DensityLabel], shape: (usize, usize), encoding: LabelEncoding) -> Result<LabelMap> {
    let items: Vec<Tensor> = labels
        .iter()
        .map(|&l| match encoding {
            LabelEncoding::Scalar => make_label_map(l, shape).tensor,
            LabelEncoding::OneHot => {
                let plane = shape.0 * shape.1;
                let mut data = vec![0.0; 3 * plane];
                data[l.index() * plane..(l.index() + 1) * plane].fill(1.0);
                Tensor::new(&[1, 3, shape.0, shape.1], data).unwrap()
            }
        })
        .collect();
    Ok(LabelMap { tensor: Tensor::stack(&items)? })
}

/// Concatenates stream features and, when given, the label map.
pub fn fuse(g: &mut Graph, streams: &[Var], label_map: Option<Var>) -> Result<Var> {
    let mut parts = streams.to_vec();
    parts.extend(label_map);
    g.concat(&parts)
}
