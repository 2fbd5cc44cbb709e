//! Recognition towers, the per-frame segmentation network and stream merging.
//!
//! Every stream runs the same six-block grammar. The RGB, flow and semantic
//! towers each end in their own classification head; the block outputs at
//! the merge point are averaged and fed to an independent copy of the
//! remaining blocks (the merged tower), whose head is the model's prediction.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::repflow::{compute_flow_batch, FlowParams, FlowVars};
use crate::tensor::init::{conv_fans, glorot_uniform};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub spatial_pool: bool,
    pub temporal_pool: bool,
    pub use_context_gate: bool,
    pub use_squeeze_excite: bool,
    pub se_reduction: usize,
    pub repeats: usize,
    pub use_skip: bool,
}

impl Default for BlockSpec {
    fn default() -> Self {
        BlockSpec {
            out_channels: 8,
            spatial_kernel: 3,
            temporal_kernel: 3,
            spatial_pool: false,
            temporal_pool: false,
            use_context_gate: true,
            use_squeeze_excite: true,
            se_reduction: 4,
            repeats: 1,
            use_skip: true,
        }
    }
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::config("block out_channels must be positive"));
        }
        if self.spatial_kernel % 2 == 0 || self.temporal_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "block kernels must be odd, got spatial {} temporal {}",
                self.spatial_kernel, self.temporal_kernel
            )));
        }
        if self.repeats == 0 {
            return Err(Error::config("block repeats must be at least 1"));
        }
        if self.use_squeeze_excite && (self.se_reduction == 0 || self.out_channels % self.se_reduction != 0) {
            return Err(Error::config(format!(
                "se_reduction {} does not divide out_channels {}",
                self.se_reduction, self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    pub blocks: Vec<BlockSpec>,
    pub merge_after_block: usize,
}

pub const NUM_BLOCKS: usize = 6;

impl Default for TowerConfig {
    fn default() -> Self {
        let widths = [8, 16, 24, 32, 48, 64];
        let spatial = [true, true, true, false, true, false];
        let temporal = [false, true, false, true, false, false];
        let kt = [3, 3, 3, 3, 1, 1];
        let blocks = (0..NUM_BLOCKS)
            .map(|i| BlockSpec {
                out_channels: widths[i],
                spatial_pool: spatial[i],
                temporal_pool: temporal[i],
                temporal_kernel: kt[i],
                ..BlockSpec::default()
            })
            .collect();
        TowerConfig {
            blocks,
            merge_after_block: 3,
        }
    }
}

impl TowerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != NUM_BLOCKS {
            return Err(Error::config(format!(
                "a tower has exactly {NUM_BLOCKS} blocks, got {}",
                self.blocks.len()
            )));
        }
        if !(1..NUM_BLOCKS).contains(&self.merge_after_block) {
            return Err(Error::config(format!(
                "merge_after_block must be in 1..{NUM_BLOCKS}, got {}",
                self.merge_after_block
            )));
        }
        self.blocks.iter().try_for_each(BlockSpec::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub output_stride: usize,
    pub num_classes: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            channels: vec![8, 16, 16, 16],
            dilations: vec![1, 1, 2, 4],
            output_stride: 4,
            num_classes: 4,
        }
    }
}

impl SegNetConfig {
    /// Number of stride-2 stages.
    pub fn downsamplings(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.output_stride.is_power_of_two() {
            return Err(Error::config(format!(
                "segmentation output_stride must be a power of 2, got {}",
                self.output_stride
            )));
        }
        if self.channels.is_empty() || self.channels.len() != self.dilations.len() {
            return Err(Error::config("segmentation channels and dilations must be non-empty and equally long"));
        }
        if self.downsamplings() > self.channels.len() {
            return Err(Error::config(format!(
                "output_stride {} needs {} stride-2 stages, only {} configured",
                self.output_stride,
                self.downsamplings(),
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.dilations.contains(&0) || self.num_classes == 0 {
            return Err(Error::config("segmentation channels, dilations and num_classes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Rgb,
    Flow,
    Semantic,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Rgb, Stream::Flow, Stream::Semantic];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
            Stream::Semantic => "semantic",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rgb" => Ok(Stream::Rgb),
            "flow" => Ok(Stream::Flow),
            "semantic" | "semantics" | "seg" => Ok(Stream::Semantic),
            other => Err(Error::config(format!("unknown stream {other:?}"))),
        }
    }
}

/// Parses a comma-separated stream list such as `rgb,flow`.
pub fn parse_streams(list: &str) -> Result<Vec<Stream>> {
    let mut streams = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Stream>>>()?;
    streams.sort();
    streams.dedup();
    Ok(streams)
}

/// Whether end-task gradients may flow into the flow layer and segmentation net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientGate {
    #[default]
    Propagate,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_actions: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub streams: Vec<Stream>,
    pub tower: TowerConfig,
    pub segnet: SegNetConfig,
    pub flow: FlowParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_actions: 8,
            frames: 8,
            height: 32,
            width: 32,
            streams: Stream::ALL.to_vec(),
            tower: TowerConfig::default(),
            segnet: SegNetConfig::default(),
            flow: FlowParams::default(),
        }
    }
}

/// `[T, C, H, W]` of one clip's features.
pub type FeatureShape = [usize; 4];

impl ModelConfig {
    pub fn has(&self, s: Stream) -> bool {
        self.streams.contains(&s)
    }

    pub fn merged(&self) -> bool {
        self.streams.len() >= 2
    }

    fn input_channels(&self, s: Stream) -> usize {
        match s {
            Stream::Rgb => 3,
            Stream::Flow => 2,
            Stream::Semantic => self.segnet.num_classes,
        }
    }

    fn input_shape(&self, s: Stream) -> FeatureShape {
        let c = self.input_channels(s);
        match s {
            Stream::Semantic => {
                let os = self.segnet.output_stride;
                [self.frames, c, self.height / os, self.width / os]
            }
            _ => [self.frames, c, self.height, self.width],
        }
    }

    /// Spatial pooling flags of `s`'s blocks. The semantic tower starts at the
    /// segmentation-logit resolution and skips its first few pools to line up
    /// with the other streams at the merge point.
    pub fn spatial_pools(&self, s: Stream) -> Vec<bool> {
        let mut skip = if s == Stream::Semantic { self.segnet.downsamplings() } else { 0 };
        self.tower
            .blocks
            .iter()
            .map(|b| {
                if b.spatial_pool && skip > 0 {
                    skip -= 1;
                    false
                } else {
                    b.spatial_pool
                }
            })
            .collect()
    }

    /// Feature shape after every block of stream `s`, checking that temporal
    /// kernels fit and pools have something to pool.
    pub fn block_shapes(&self, s: Stream) -> Result<Vec<FeatureShape>> {
        let pools = self.spatial_pools(s);
        let mut shape = self.input_shape(s);
        let mut out = Vec::with_capacity(NUM_BLOCKS);
        for (i, (b, &sp)) in self.tower.blocks.iter().zip(&pools).enumerate() {
            shape = block_output_shape(shape, b, sp, &format!("{s} block {}", i + 1))?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        self.segnet.validate()?;
        self.flow.validate()?;
        if self.num_actions < 2 {
            return Err(Error::config("num_actions must be at least 2"));
        }
        if self.frames < 2 && self.has(Stream::Flow) {
            return Err(Error::config("the flow stream needs at least 2 frames"));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("clip dimensions must be positive"));
        }
        if !self.has(Stream::Rgb) {
            return Err(Error::config("streams must include rgb"));
        }
        let mut sorted = self.streams.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.streams.len() {
            return Err(Error::config("duplicate stream in streams"));
        }
        if self.has(Stream::Semantic) {
            let os = self.segnet.output_stride;
            if self.height % os != 0 || self.width % os != 0 {
                return Err(Error::config(format!(
                    "frame size {}x{} is not divisible by output_stride {os}",
                    self.height, self.width
                )));
            }
        }
        let m = self.tower.merge_after_block - 1;
        let reference = self.block_shapes(Stream::Rgb)?[m];
        for &s in &self.streams {
            let shapes = self.block_shapes(s)?;
            if shapes[m] != reference {
                return Err(Error::config(format!(
                    "{s} stream reaches the merge point with shape {:?}, rgb with {reference:?}",
                    shapes[m]
                )));
            }
        }
        Ok(())
    }
}

fn block_output_shape(shape: FeatureShape, b: &BlockSpec, spatial_pool: bool, what: &str) -> Result<FeatureShape> {
    let [mut t, _, mut h, mut w] = shape;
    if b.temporal_kernel > t {
        return Err(Error::config(format!(
            "{what}: temporal kernel {} longer than {t} frames",
            b.temporal_kernel
        )));
    }
    if spatial_pool {
        if h < 2 || w < 2 {
            return Err(Error::config(format!("{what}: cannot pool {h}x{w} features")));
        }
        h /= 2;
        w /= 2;
    }
    if b.temporal_pool {
        if t < 2 {
            return Err(Error::config(format!("{what}: cannot pool {t} frames")));
        }
        t /= 2;
    }
    Ok([t, b.out_channels, h, w])
}

/// Tape handles of one repeat of a block.
#[derive(Debug, Clone, Copy)]
pub struct UnitWeights {
    pub conv: Var,
    pub conv_bias: Var,
    pub temporal: Var,
    /// Per-channel scale and offset of the context gate.
    pub gate: Option<(Var, Var)>,
    /// Bottleneck and expansion matrices of squeeze-excite.
    pub excite: Option<(Var, Var)>,
    /// 1x1 skip projection when channels change.
    pub projection: Option<Var>,
}

fn unit_prefix(prefix: &str, repeat: usize) -> String {
    if repeat == 0 {
        prefix.to_string()
    } else {
        format!("{prefix}.r{repeat}")
    }
}

impl UnitWeights {
    pub fn from_bound(bound: &Bound, prefix: &str, spec: &BlockSpec, in_channels: usize) -> Result<Self> {
        let p = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Ok(UnitWeights {
            conv: p("conv")?,
            conv_bias: p("conv_b")?,
            temporal: p("tconv")?,
            gate: if spec.use_context_gate { Some((p("cg_a")?, p("cg_b")?)) } else { None },
            excite: if spec.use_squeeze_excite { Some((p("se_w1")?, p("se_w2")?)) } else { None },
            projection: if spec.use_skip && in_channels != spec.out_channels { Some(p("proj")?) } else { None },
        })
    }
}

fn init_unit<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    spec: &BlockSpec,
    in_channels: usize,
) {
    let (c, k) = (spec.out_channels, spec.spatial_kernel);
    let shape = vec![c, in_channels, k, k];
    let (fi, fo) = conv_fans(&shape);
    store.insert(format!("{prefix}.conv"), glorot_uniform(rng, shape, fi, fo));
    store.insert(format!("{prefix}.conv_b"), Tensor::zeros(vec![c]).with_grad());
    let kt = spec.temporal_kernel;
    store.insert(format!("{prefix}.tconv"), glorot_uniform(rng, vec![c, kt], kt, kt));
    if spec.use_context_gate {
        store.insert(format!("{prefix}.cg_a"), Tensor::filled(vec![c], T::one()).with_grad());
        store.insert(format!("{prefix}.cg_b"), Tensor::zeros(vec![c]).with_grad());
    }
    if spec.use_squeeze_excite {
        let r = c / spec.se_reduction;
        store.insert(format!("{prefix}.se_w1"), glorot_uniform(rng, vec![c, r], c, r));
        store.insert(format!("{prefix}.se_w2"), glorot_uniform(rng, vec![r, c], r, c));
    }
    if spec.use_skip && in_channels != c {
        let shape = vec![c, in_channels, 1, 1];
        let (fi, fo) = conv_fans(&shape);
        store.insert(format!("{prefix}.proj"), glorot_uniform(rng, shape, fi, fo));
    }
}

/// Tiles a `[C]` vector into `[N, C]`.
fn tile_rows<T: Scalar>(tape: &mut Tape<T>, v: Var, n: usize) -> Result<Var> {
    let c = tape.shape(v).iter().product::<usize>();
    let src = (0..n).flat_map(|_| 0..c as u32).collect();
    tape.gather(v, src, vec![n, c])
}

/// `x ⊙ sigmoid(a ⊙ gap(x) + b)`, one gate value per clip and channel.
pub fn context_gate<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Var, offset: Var) -> Result<Var> {
    let pooled = tape.global_average_pool(x)?;
    let n = tape.shape(pooled)[0];
    let a = tile_rows(tape, scale, n)?;
    let z = tape.mul(pooled, a)?;
    let z = tape.add_row_bias(z, offset)?;
    let g = tape.sigmoid(z);
    tape.scale_channels(x, g)
}

/// `x ⊙ sigmoid(relu(gap(x) W₁) W₂)`.
pub fn squeeze_excite<T: Scalar>(tape: &mut Tape<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let pooled = tape.global_average_pool(x)?;
    let h = tape.matmul(pooled, w1)?;
    let h = tape.relu(h);
    let s = tape.matmul(h, w2)?;
    let s = tape.sigmoid(s);
    tape.scale_channels(x, s)
}

fn conv_frames<T: Scalar>(tape: &mut Tape<T>, x: Var, k: Var, bias: Option<Var>) -> Result<Var> {
    let [n, t, c, h, w] = dims5(tape, x)?;
    let flat = tape.reshape(x, vec![n * t, c, h, w])?;
    let mut y = tape.conv2d(flat, k, 1, 1, Padding::SameReplicate)?;
    if let Some(b) = bias {
        y = tape.add_channel_bias(y, b)?;
    }
    let co = tape.shape(y)[1];
    tape.reshape(y, vec![n, t, co, h, w])
}

fn dims5<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<[usize; 5]> {
    match *tape.shape(x) {
        [n, t, c, h, w] => Ok([n, t, c, h, w]),
        ref s => Err(Error::config(format!("expected [N, T, C, H, W] features, got {s:?}"))),
    }
}

/// One repeat: 2D conv, temporal conv, ReLU, optional pools, CG, SE, plus skip.
pub fn unit_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    w: &UnitWeights,
    spatial_pool: bool,
    temporal_pool: bool,
) -> Result<Var> {
    let mut y = conv_frames(tape, x, w.conv, Some(w.conv_bias))?;
    y = tape.conv1d_temporal(y, w.temporal)?;
    y = tape.relu(y);
    if spatial_pool {
        y = tape.max_pool2d(y)?;
    }
    if temporal_pool {
        y = tape.temporal_max_pool(y)?;
    }
    if let Some((a, b)) = w.gate {
        y = context_gate(tape, y, a, b)?;
    }
    if let Some((w1, w2)) = w.excite {
        y = squeeze_excite(tape, y, w1, w2)?;
    }
    if !spec.use_skip {
        return Ok(y);
    }
    let mut s = x;
    if let Some(p) = w.projection {
        s = conv_frames(tape, s, p, None)?;
    }
    if spatial_pool {
        s = tape.max_pool2d(s)?;
    }
    if temporal_pool {
        s = tape.temporal_max_pool(s)?;
    }
    if tape.shape(s) != tape.shape(y) {
        return Err(Error::config(format!(
            "block skip shape {:?} does not match body shape {:?}",
            tape.shape(s),
            tape.shape(y)
        )));
    }
    tape.add(y, s)
}

/// A full block; pooling happens in the first repeat only.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    spec: &BlockSpec,
    units: &[UnitWeights],
    spatial_pool: bool,
) -> Result<Var> {
    if units.len() != spec.repeats {
        return Err(Error::config(format!(
            "block has {} repeats but {} weight sets",
            spec.repeats,
            units.len()
        )));
    }
    let mut y = x;
    for (r, w) in units.iter().enumerate() {
        y = unit_forward(tape, y, spec, w, spatial_pool && r == 0, spec.temporal_pool && r == 0)?;
    }
    Ok(y)
}

/// Elementwise mean of equally shaped stream features.
pub fn merge_streams<T: Scalar>(tape: &mut Tape<T>, features: &[Var]) -> Result<Var> {
    if let Some(&first) = features.first() {
        let s = tape.shape(first).to_vec();
        if let Some(&bad) = features.iter().find(|&&f| tape.shape(f) != s) {
            return Err(Error::config(format!(
                "cannot merge features of shapes {s:?} and {:?}",
                tape.shape(bad)
            )));
        }
    }
    tape.mean_of(features)
}

/// Per-frame segmentation logits `[B, K, H/os, W/os]` from frames `[B, 3, H, W]`.
pub fn segnet_forward<T: Scalar>(tape: &mut Tape<T>, frames: Var, cfg: &SegNetConfig, bound: &Bound) -> Result<Var> {
    let mut x = frames;
    let down = cfg.downsamplings();
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let stride = if i < down { 2 } else { 1 };
        let k = bound.get(&format!("seg.s{}.conv", i + 1))?;
        let b = bound.get(&format!("seg.s{}.conv_b", i + 1))?;
        x = tape.conv2d(x, k, stride, d, Padding::SameReplicate)?;
        x = tape.add_channel_bias(x, b)?;
        x = tape.relu(x);
    }
    let k = bound.get("seg.cls.w")?;
    let b = bound.get("seg.cls.b")?;
    let y = tape.conv2d(x, k, 1, 1, Padding::SameReplicate)?;
    tape.add_channel_bias(y, b)
}

fn init_segnet<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &SegNetConfig) {
    let mut cin = 3;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let shape = vec![c, cin, 3, 3];
        let (fi, fo) = conv_fans(&shape);
        store.insert(format!("seg.s{}.conv", i + 1), glorot_uniform(rng, shape, fi, fo));
        store.insert(format!("seg.s{}.conv_b", i + 1), Tensor::zeros(vec![c]).with_grad());
        cin = c;
    }
    let shape = vec![cfg.num_classes, cin, 1, 1];
    let (fi, fo) = conv_fans(&shape);
    store.insert("seg.cls.w", glorot_uniform(rng, shape, fi, fo));
    store.insert("seg.cls.b", Tensor::zeros(vec![cfg.num_classes]).with_grad());
}

/// Logits and intermediate representations of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutputs {
    pub logits_rgb: Var,
    pub logits_flow: Option<Var>,
    pub logits_semantic: Option<Var>,
    /// The rgb logits when the model has a single stream.
    pub logits_merged: Var,
    /// `[N*T, K_seg, h, w]`.
    pub seg_logits: Option<Var>,
    /// `[N, T-1, 2, H, W]`.
    pub flow_field: Option<Var>,
}

impl StreamOutputs {
    pub fn logits(&self, s: Stream) -> Option<Var> {
        match s {
            Stream::Rgb => Some(self.logits_rgb),
            Stream::Flow => self.logits_flow,
            Stream::Semantic => self.logits_semantic,
        }
    }
}

/// A model configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn tower_prefix(tower: &str, block: usize) -> String {
    format!("{tower}.b{}", block + 1)
}

impl<T: Scalar> Model<T> {
    /// Validates `config` and draws every weight from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let m = config.tower.merge_after_block;
        let mut towers: Vec<(&str, usize, usize)> = config
            .streams
            .iter()
            .map(|&s| (s.name(), config.input_channels(s), 0))
            .collect();
        if config.merged() {
            towers.push(("merged", config.tower.blocks[m - 1].out_channels, m));
        }
        for (name, mut cin, start) in towers {
            for (i, spec) in config.tower.blocks.iter().enumerate().skip(start) {
                for r in 0..spec.repeats {
                    init_unit(&mut params, &mut rng, &unit_prefix(&tower_prefix(name, i), r), spec, cin);
                    cin = spec.out_channels;
                }
            }
            let k = config.num_actions;
            params.insert(format!("{name}.head.w"), glorot_uniform(&mut rng, vec![cin, k], cin, k));
            params.insert(format!("{name}.head.b"), Tensor::zeros(vec![k]).with_grad());
        }
        if config.has(Stream::Semantic) {
            init_segnet(&mut params, &mut rng, &config.segnet);
        }
        if config.has(Stream::Flow) {
            config.flow.register(&mut params)?;
        }
        Ok(Model { config, params })
    }

    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Model::<T>::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::config("checkpoint has parameters the model does not use"));
        }
        Ok(Model { config, params })
    }

    fn run_blocks(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tower: &str,
        stream: Stream,
        mut x: Var,
        blocks: std::ops::Range<usize>,
    ) -> Result<Var> {
        let pools = self.config.spatial_pools(stream);
        for i in blocks {
            let spec = &self.config.tower.blocks[i];
            let mut units = Vec::with_capacity(spec.repeats);
            let mut cin = tape.shape(x)[2];
            for r in 0..spec.repeats {
                let prefix = unit_prefix(&tower_prefix(tower, i), r);
                units.push(UnitWeights::from_bound(bound, &prefix, spec, cin)?);
                cin = spec.out_channels;
            }
            x = block_forward(tape, x, spec, &units, pools[i])?;
        }
        Ok(x)
    }

    fn head(&self, tape: &mut Tape<T>, bound: &Bound, tower: &str, x: Var) -> Result<Var> {
        let pooled = tape.global_average_pool(x)?;
        let w = bound.get(&format!("{tower}.head.w"))?;
        let b = bound.get(&format!("{tower}.head.b"))?;
        tape.linear(pooled, w, b)
    }

    /// Runs all configured streams on `clip` (`[N, T, 3, H, W]` in `[0, 1]`).
    /// Only pixels are consulted; labels and masks never enter the graph here.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, clip: Var, gate: GradientGate) -> Result<StreamOutputs> {
        let cfg = &self.config;
        let [n, t, c, h, w] = dims5(tape, clip)?;
        if [t, c, h, w] != [cfg.frames, 3, cfg.height, cfg.width] {
            return Err(Error::input(format!(
                "clip shape {:?} does not match the model's [N, {}, 3, {}, {}]",
                tape.shape(clip),
                cfg.frames,
                cfg.height,
                cfg.width
            )));
        }
        let m = cfg.tower.merge_after_block;
        let mut inputs = vec![(Stream::Rgb, clip)];
        let mut seg_logits = None;
        let mut flow_field = None;

        if cfg.has(Stream::Flow) {
            let vars = FlowVars::from_bound(bound, cfg.flow.n_iterations)?;
            let field = compute_flow_batch(tape, clip, &vars, &mut ())?.u;
            flow_field = Some(field);
            let mut x = if gate == GradientGate::Stop { tape.stop_gradient(field) } else { field };
            // T-1 flow frames; the last one is repeated so every stream sees T frames.
            let idx: Vec<usize> = (0..t).map(|i| i.min(t - 2)).collect();
            x = tape.index_frames(x, &idx)?;
            inputs.push((Stream::Flow, x));
        }
        if cfg.has(Stream::Semantic) {
            let frames = tape.reshape(clip, vec![n * t, c, h, w])?;
            let logits = segnet_forward(tape, frames, &cfg.segnet, bound)?;
            seg_logits = Some(logits);
            let x = if gate == GradientGate::Stop { tape.stop_gradient(logits) } else { logits };
            let s = tape.shape(x).to_vec();
            let x = tape.reshape(x, vec![n, t, s[1], s[2], s[3]])?;
            inputs.push((Stream::Semantic, x));
        }

        let mut mids = Vec::new();
        let mut logits = [None, None, None];
        for (stream, x) in inputs {
            let name = stream.name();
            let mid = self.run_blocks(tape, bound, name, stream, x, 0..m)?;
            mids.push(mid);
            let top = self.run_blocks(tape, bound, name, stream, mid, m..NUM_BLOCKS)?;
            logits[stream as usize] = Some(self.head(tape, bound, name, top)?);
        }
        let logits_rgb = logits[0].expect("rgb always runs");
        let logits_merged = if cfg.merged() {
            let merged = merge_streams(tape, &mids)?;
            let top = self.run_blocks(tape, bound, "merged", Stream::Rgb, merged, m..NUM_BLOCKS)?;
            self.head(tape, bound, "merged", top)?
        } else {
            logits_rgb
        };
        Ok(StreamOutputs {
            logits_rgb,
            logits_flow: logits[1],
            logits_semantic: logits[2],
            logits_merged,
            seg_logits,
            flow_field,
        })
    }

    /// Names of the parameters used only by `tower`'s classification head.
    pub fn head_params(tower: &str) -> [String; 2] {
        [format!("{tower}.head.w"), format!("{tower}.head.b")]
    }
}

/// Inference-only outputs copied off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// Per-stream logits `[N, K]`, indexed like [`Stream`]; absent streams are `None`.
    pub streams: [Option<Vec<f32>>; 3],
    pub merged: Vec<f32>,
    pub seg_logits: Option<Tensor<f32>>,
    pub flow: Option<Tensor<f32>>,
}

impl Model<f32> {
    /// Forward pass with frozen weights on a clip batch `[N, T, 3, H, W]`.
    pub fn predict(&self, clips: &Tensor<f32>) -> Result<Predictions> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.leaf(clips.clone());
        let out = self.forward(&mut tape, &bound, x, GradientGate::Propagate)?;
        let grab = |v: Var| tape.value(v).to_vec();
        let tensor = |v: Var| Tensor::new(tape.shape(v).to_vec(), tape.value(v).to_vec());
        Ok(Predictions {
            streams: [
                Some(grab(out.logits_rgb)),
                out.logits_flow.map(grab),
                out.logits_semantic.map(grab),
            ],
            merged: grab(out.logits_merged),
            seg_logits: out.seg_logits.map(tensor).transpose()?,
            flow: out.flow_field.map(tensor).transpose()?,
        })
    }
}

/// Analytic forward-pass FLOPs per input frame (multiply-adds count as 2).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub rgb_tower: f64,
    pub flow_layer: f64,
    pub flow_tower: f64,
    pub segnet: f64,
    pub semantic_tower: f64,
    pub merged_tower: f64,
    pub total: f64,
}

/// Arithmetic per pixel and iteration of the flow layer: residual and
/// threshold (10), two divergences (28) and two dual updates (46).
const FLOW_FLOPS_PER_PIXEL_ITER: f64 = 84.0;

fn tower_flops(cfg: &ModelConfig, s: Stream, blocks: std::ops::Range<usize>) -> Result<f64> {
    let shapes = cfg.block_shapes(s)?;
    let mut flops = 0.0;
    let mut cin = if blocks.start == 0 {
        cfg.input_shape(s)[1]
    } else {
        shapes[blocks.start - 1][1]
    };
    let mut prev = if blocks.start == 0 { cfg.input_shape(s) } else { shapes[blocks.start - 1] };
    for i in blocks.clone() {
        let b = &cfg.tower.blocks[i];
        for r in 0..b.repeats {
            let [t, _, h, w] = if r == 0 { prev } else { shapes[i] };
            let px = (t * h * w) as f64;
            let c = b.out_channels as f64;
            flops += 2.0 * px * c * (cin * b.spatial_kernel * b.spatial_kernel) as f64;
            flops += 2.0 * px * c * b.temporal_kernel as f64;
            if b.use_skip && cin != b.out_channels {
                flops += 2.0 * px * c * cin as f64;
            }
            if b.use_squeeze_excite {
                flops += 4.0 * c * (c / b.se_reduction as f64);
            }
            cin = b.out_channels;
        }
        prev = shapes[i];
    }
    if blocks.end == NUM_BLOCKS {
        flops += 2.0 * cin as f64 * cfg.num_actions as f64;
    }
    Ok(flops)
}

pub fn flop_report(cfg: &ModelConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let m = cfg.tower.merge_after_block;
    let t = cfg.frames as f64;
    let per = |v: f64| v / t;
    let full = |s: Stream| tower_flops(cfg, s, 0..NUM_BLOCKS);
    let rgb_tower = per(full(Stream::Rgb)?);
    let (mut flow_layer, mut flow_tower, mut segnet, mut semantic_tower, mut merged_tower) = (0.0, 0.0, 0.0, 0.0, 0.0);
    if cfg.has(Stream::Flow) {
        let px = ((cfg.frames - 1) * cfg.height * cfg.width) as f64;
        flow_layer = per(px * cfg.flow.n_iterations as f64 * FLOW_FLOPS_PER_PIXEL_ITER);
        flow_tower = per(full(Stream::Flow)?);
    }
    if cfg.has(Stream::Semantic) {
        let (mut h, mut w, mut cin) = (cfg.height, cfg.width, 3);
        let mut f = 0.0;
        for (i, &c) in cfg.segnet.channels.iter().enumerate() {
            if i < cfg.segnet.downsamplings() {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            f += 2.0 * (h * w * c * cin * 9) as f64;
            cin = c;
        }
        f += 2.0 * (h * w * cin * cfg.segnet.num_classes) as f64;
        segnet = f;
        semantic_tower = per(full(Stream::Semantic)?);
    }
    if cfg.merged() {
        merged_tower = per(tower_flops(cfg, Stream::Rgb, m..NUM_BLOCKS)?);
    }
    let total = rgb_tower + flow_layer + flow_tower + segnet + semantic_tower + merged_tower;
    Ok(FlopReport {
        rgb_tower,
        flow_layer,
        flow_tower,
        segnet,
        semantic_tower,
        merged_tower,
        total,
    })
}
