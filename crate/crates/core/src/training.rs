//! Loss assembly, the training loop and evaluation metrics.
//!
//! Five losses are combined with independent weights:
//! `L = λ_rgb L_rgb + λ_flow L_flow + λ_semantic L_semantic + λ_merged L_merged + λ_interm L_interm`,
//! where the first four are action classification losses of the stream
//! towers and the merged tower, and `L_interm` is the per-pixel segmentation
//! loss of the segmentation net against (teacher) masks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Bound;
use crate::synthdata::{VideoSample, IGNORE_LABEL};
use crate::tensor::optim::Sgd;
use crate::tensor::{softmax, Scalar, Tape, Tensor, Var};
use crate::towers::{GradientGate, Model, Stream, StreamOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub flow: f64,
    pub semantic: f64,
    pub merged: f64,
    pub interm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::uniform()
    }
}

impl LossWeights {
    pub fn uniform() -> Self {
        LossWeights::from_array([1.0; 5])
    }

    /// Ones on rgb, merged and interm; zeros on the flow and semantic towers.
    pub fn fixed_baseline() -> Self {
        LossWeights::from_array([1.0, 0.0, 0.0, 1.0, 1.0])
    }

    pub fn from_array(w: [f64; 5]) -> Self {
        LossWeights {
            rgb: w[0],
            flow: w[1],
            semantic: w[2],
            merged: w[3],
            interm: w[4],
        }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.rgb, self.flow, self.semantic, self.merged, self.interm]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in ["rgb", "flow", "semantic", "merged", "interm"].iter().zip(self.to_array()) {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config(format!("loss weight {name} = {w} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn scaled(self, c: f64) -> Self {
        LossWeights::from_array(self.to_array().map(|w| w * c))
    }
}

impl FromStr for LossWeights {
    type Err = Error;

    /// Parses `w_rgb,w_flow,w_semantic,w_merged,w_interm`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::input(format!("expected 5 comma-separated loss weights, got {}", parts.len())));
        }
        let mut w = [0.0; 5];
        for (slot, p) in w.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| Error::input(format!("bad loss weight {p:?}")))?;
        }
        let weights = LossWeights::from_array(w);
        weights.validate().map_err(|e| Error::input(e.to_string()))?;
        Ok(weights)
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d, e] = self.to_array();
        write!(f, "{a},{b},{c},{d},{e}")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rgb: f64,
    pub l_flow: f64,
    pub l_semantic: f64,
    pub l_merged: f64,
    pub l_interm: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.l_rgb, self.l_flow, self.l_semantic, self.l_merged, self.l_interm]
    }

    fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.l_rgb += w * other.l_rgb;
        self.l_flow += w * other.l_flow;
        self.l_semantic += w * other.l_semantic;
        self.l_merged += w * other.l_merged;
        self.l_interm += w * other.l_interm;
        self.l_total += w * other.l_total;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    #[default]
    Single,
    /// Independent sigmoid per class; single-label data becomes one-hot targets.
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_weights: LossWeights,
    pub gradient_gate: GradientGate,
    pub label_mode: LabelMode,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Evaluate on the validation split every this many steps (and at the end).
    pub eval_every: usize,
    /// Rescale gradients whose L2 norm exceeds this value. The flow layer's
    /// parameters and the rest of the network are clipped as separate groups,
    /// so a spike in one does not stall the other.
    pub max_grad_norm: Option<f64>,
    /// Learning-rate multiplier for the flow layer's parameters.
    pub flow_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_weights: LossWeights::uniform(),
            gradient_gate: GradientGate::Propagate,
            label_mode: LabelMode::Single,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            eval_every: 100,
            max_grad_norm: Some(5.0),
            flow_lr_scale: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("steps, batch_size and eval_every must be at least 1"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        if !(self.flow_lr_scale >= 0.0 && self.flow_lr_scale.is_finite()) {
            return Err(Error::config(format!("flow_lr_scale must be >= 0, got {}", self.flow_lr_scale)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "need lr >= 0 and momentum in [0, 1), got lr {} momentum {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }

    /// Cosine-decayed learning rate before update `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
    }
}

/// Nearest-neighbour subsampling of `[F, H, W]` labels by `stride`, taking
/// the pixel at the centre of each output cell.
pub fn downsample_labels(labels: &[i32], frames: usize, h: usize, w: usize, stride: usize) -> Result<Vec<i32>> {
    if labels.len() != frames * h * w {
        return Err(Error::input(format!("{} labels for {frames}x{h}x{w} masks", labels.len())));
    }
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::config(format!("stride {stride} does not divide {h}x{w}")));
    }
    if stride == 1 {
        return Ok(labels.to_vec());
    }
    let (oh, ow) = (h / stride, w / stride);
    let c = stride / 2;
    let mut out = Vec::with_capacity(frames * oh * ow);
    for f in 0..frames {
        for y in 0..oh {
            for x in 0..ow {
                out.push(labels[(f * h + y * stride + c) * w + x * stride + c]);
            }
        }
    }
    Ok(out)
}

/// Inputs and targets of one minibatch.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[N, T, 3, H, W]`.
    pub clips: Tensor<T>,
    pub labels: Vec<usize>,
    /// Supervision masks at segmentation-logit resolution, `[N*T, h, w]`.
    pub seg_labels: Vec<i32>,
    /// Ground-truth masks at the same resolution, for pixel accuracy.
    pub true_seg_labels: Vec<i32>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(samples: &[&VideoSample], stride: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::input("empty batch"))?;
        let shape = first.frames.shape().to_vec();
        let [t, _, h, w] = shape[..] else {
            return Err(Error::input(format!("clip frames have shape {shape:?}")));
        };
        let mut values = Vec::with_capacity(samples.len() * first.frames.numel());
        let mut seg_labels = Vec::new();
        let mut true_seg_labels = Vec::new();
        for s in samples {
            if s.frames.shape() != shape.as_slice() {
                return Err(Error::input(format!("clip {} has shape {:?}, batch has {shape:?}", s.clip_id, s.frames.shape())));
            }
            values.extend(s.frames.values().iter().map(|&v| T::of(v as f64)));
            seg_labels.extend(downsample_labels(s.supervision_masks(), t, h, w, stride)?);
            true_seg_labels.extend(downsample_labels(&s.seg_masks, t, h, w, stride)?);
        }
        let mut dims = vec![samples.len()];
        dims.extend_from_slice(&shape);
        Ok(Batch {
            clips: Tensor::new(dims, values)?,
            labels: samples.iter().map(|s| s.action_label).collect(),
            seg_labels,
            true_seg_labels,
        })
    }
}

fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::input(format!("label {l} out of range for {k} classes")));
        }
        out[i * k + l] = T::one();
    }
    Ok(out)
}

fn action_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize], mode: LabelMode) -> Result<Var> {
    match mode {
        LabelMode::Single => tape.softmax_cross_entropy(logits, labels),
        LabelMode::Multilabel => {
            let k = tape.shape(logits)[1];
            let targets = one_hot(labels, k)?;
            tape.sigmoid_cross_entropy(logits, &targets)
        }
    }
}

/// Records the five losses and their weighted sum on `tape`. Missing
/// streams contribute a zero component.
pub fn compute_losses<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &StreamOutputs,
    labels: &[usize],
    seg_labels: &[i32],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let w = cfg.loss_weights.to_array();
    let mut parts: [Option<Var>; 5] = [None; 5];
    parts[0] = Some(action_loss(tape, outputs.logits_rgb, labels, cfg.label_mode)?);
    if let Some(l) = outputs.logits_flow {
        parts[1] = Some(action_loss(tape, l, labels, cfg.label_mode)?);
    }
    if let Some(l) = outputs.logits_semantic {
        parts[2] = Some(action_loss(tape, l, labels, cfg.label_mode)?);
    }
    parts[3] = Some(action_loss(tape, outputs.logits_merged, labels, cfg.label_mode)?);
    if let Some(seg) = outputs.seg_logits {
        parts[4] = Some(tape.pixelwise_softmax_cross_entropy(seg, seg_labels, IGNORE_LABEL)?.loss);
    }
    let mut total = None;
    let mut values = [0.0; 5];
    for (i, part) in parts.iter().enumerate() {
        let Some(v) = *part else { continue };
        values[i] = tape.item(v).as_f64();
        let weighted = tape.scale(v, T::of(w[i]));
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let total = total.expect("the rgb loss is always present");
    let breakdown = LossBreakdown {
        l_rgb: values[0],
        l_flow: values[1],
        l_semantic: values[2],
        l_merged: values[3],
        l_interm: values[4],
        l_total: tape.item(total).as_f64(),
    };
    Ok((total, breakdown))
}

/// Forward and backward on one batch; gradients are left on `model.params`.
pub fn compute_gradients<T: Scalar>(model: &mut Model<T>, batch: &Batch<T>, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound: Bound = model.params.bind(&mut tape);
    let x = tape.leaf(batch.clips.clone());
    let out = model.forward(&mut tape, &bound, x, cfg.gradient_gate)?;
    let (total, breakdown) = compute_losses(&mut tape, &out, &batch.labels, &batch.seg_labels, cfg)?;
    tape.backward(total)?;
    model.params.absorb_grads(&tape, &bound);
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Top1,
    Map,
    MeanPerClass,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Metric::Top1),
            "map" => Ok(Metric::Map),
            "mean_per_class" => Ok(Metric::MeanPerClass),
            other => Err(Error::input(format!("unknown metric {other:?}; use top1, map or mean_per_class"))),
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(scores: &[f32], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&scores[i * k..(i + 1) * k]) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Average precision of a ranking: mean of precision at each positive.
/// Ties in score keep the original order. `None` without positives.
pub fn average_precision(scores: &[f32], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mean over classes with at least one positive of the per-class AP.
pub fn mean_average_precision(scores: &[f32], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let aps: Vec<f64> = (0..k)
        .filter_map(|c| {
            let col: Vec<f32> = (0..n).map(|i| scores[i * k + c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            average_precision(&col, &pos)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Unweighted mean of per-class recall; classes absent from `labels` are skipped.
pub fn mean_per_class(scores: &[f32], labels: &[usize], k: usize) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..k {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            log::warn!("class {c} has no samples in the evaluation split; skipped");
            continue;
        }
        let hits = idx.iter().filter(|&&i| argmax(&scores[i * k..(i + 1) * k]) == c).count();
        recalls.push(hits as f64 / idx.len() as f64);
    }
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

pub fn score(metric: Metric, scores: &[f32], labels: &[usize], k: usize) -> f64 {
    match metric {
        Metric::Top1 => top1(scores, labels, k),
        Metric::Map => mean_average_precision(scores, labels, k),
        Metric::MeanPerClass => mean_per_class(scores, labels, k),
    }
}

/// Per-row class scores used for ranking: softmax or sigmoid of the logits.
fn class_scores(logits: &[f32], k: usize, mode: LabelMode) -> Vec<f32> {
    match mode {
        LabelMode::Single => logits.chunks(k).flat_map(|row| softmax(row, k)).collect(),
        LabelMode::Multilabel => logits.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

/// Losses, accuracies and scores of a model on a set of clips.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub losses: LossBreakdown,
    /// Top-1 accuracy per tower, indexed like [`Stream`].
    pub acc_streams: [Option<f64>; 3],
    pub acc_merged: f64,
    /// Argmax agreement of segmentation logits with the true masks.
    pub seg_pixel_acc: Option<f64>,
    /// Merged-tower class scores `[N, K]`.
    pub merged_scores: Vec<f32>,
    pub labels: Vec<usize>,
}

impl EvalReport {
    pub fn metric(&self, metric: Metric, k: usize) -> f64 {
        score(metric, &self.merged_scores, &self.labels, k)
    }
}

/// Inference over `samples` in chunks of `batch_size`. Only frames enter the
/// model; masks are used for the reported losses and pixel accuracy.
pub fn evaluate_report(model: &Model<f32>, samples: &[VideoSample], cfg: &TrainConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::input("cannot evaluate on an empty split"));
    }
    let k = model.config.num_actions;
    let stride = model.config.segnet.output_stride;
    let mut losses = LossBreakdown::default();
    let mut logits: [Vec<f32>; 3] = Default::default();
    let mut merged = Vec::new();
    let mut labels = Vec::new();
    let (mut seg_hits, mut seg_total) = (0usize, 0usize);
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&VideoSample> = chunk.iter().collect();
        let batch = Batch::<f32>::new(&refs, stride)?;
        let mut tape = Tape::new();
        let bound = model.params.bind_frozen(&mut tape);
        let x = tape.leaf(batch.clips.clone());
        let out = model.forward(&mut tape, &bound, x, cfg.gradient_gate)?;
        let (_, b) = compute_losses(&mut tape, &out, &batch.labels, &batch.seg_labels, cfg)?;
        losses.accumulate(&b, chunk.len() as f64 / samples.len() as f64);
        for s in Stream::ALL {
            if let Some(v) = out.logits(s) {
                logits[s as usize].extend_from_slice(tape.value(v));
            }
        }
        merged.extend_from_slice(tape.value(out.logits_merged));
        labels.extend_from_slice(&batch.labels);
        if let Some(seg) = out.seg_logits {
            let shape = tape.shape(seg).to_vec();
            let (kc, hw) = (shape[1], shape[2] * shape[3]);
            let v = tape.value(seg);
            for (f, frame_labels) in batch.true_seg_labels.chunks(hw).enumerate() {
                for (q, &l) in frame_labels.iter().enumerate() {
                    if l == IGNORE_LABEL {
                        continue;
                    }
                    let best = (0..kc)
                        .max_by(|&a, &b| v[(f * kc + a) * hw + q].total_cmp(&v[(f * kc + b) * hw + q]).then(b.cmp(&a)))
                        .expect("at least one class");
                    seg_hits += usize::from(best as i32 == l);
                    seg_total += 1;
                }
            }
        }
    }
    let acc_streams = Stream::ALL.map(|s| model.config.has(s).then(|| top1(&logits[s as usize], &labels, k)));
    Ok(EvalReport {
        losses,
        acc_streams,
        acc_merged: top1(&merged, &labels, k),
        seg_pixel_acc: (seg_total > 0).then(|| seg_hits as f64 / seg_total as f64),
        merged_scores: class_scores(&merged, k, cfg.label_mode),
        labels,
    })
}

/// Score of the merged-tower output under `metric`.
pub fn evaluate(model: &Model<f32>, samples: &[VideoSample], metric: Metric, cfg: &TrainConfig) -> Result<f64> {
    Ok(evaluate_report(model, samples, cfg)?.metric(metric, model.config.num_actions))
}

pub const METRICS_COLUMNS: [&str; 13] = [
    "step",
    "split",
    "loss_total",
    "loss_rgb",
    "loss_flow",
    "loss_semantic",
    "loss_merged",
    "loss_interm",
    "acc_merged",
    "acc_rgb",
    "acc_flow",
    "acc_semantic",
    "seg_pixel_acc",
];

/// One line of the metrics CSV. Missing accuracies (absent streams) are empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: &'static str,
    pub losses: LossBreakdown,
    pub acc_merged: Option<f64>,
    pub acc_streams: [Option<f64>; 3],
    pub seg_pixel_acc: Option<f64>,
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let f = |v: f64| format!("{v:.6}");
        let o = |v: Option<f64>| v.map(f).unwrap_or_default();
        let l = &self.losses;
        vec![
            self.step.to_string(),
            self.split.to_string(),
            f(l.l_total),
            f(l.l_rgb),
            f(l.l_flow),
            f(l.l_semantic),
            f(l.l_merged),
            f(l.l_interm),
            o(self.acc_merged),
            o(self.acc_streams[0]),
            o(self.acc_streams[1]),
            o(self.acc_streams[2]),
            o(self.seg_pixel_acc),
        ]
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Integrity(format!("{}: {other:?}", path.display())),
    }
}

/// Metrics CSV appended row by row and flushed after each write.
pub struct MetricsWriter {
    path: std::path::PathBuf,
    writer: csv::Writer<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        writer.write_record(METRICS_COLUMNS).map_err(|e| csv_error(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.write_record(row.record()).map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Scales the gradients of the parameters selected by `pick` by
/// `max_norm / norm` when their joint L2 norm is larger than `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(
    params: &mut crate::params::ParamStore<T>,
    max_norm: f64,
    pick: impl Fn(&str) -> bool,
) -> f64 {
    let norm = params
        .iter()
        .filter(|(n, _)| pick(n))
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        scale_grads(params, max_norm / norm, pick);
    }
    norm
}

fn scale_grads<T: Scalar>(params: &mut crate::params::ParamStore<T>, k: f64, pick: impl Fn(&str) -> bool) {
    let k = T::of(k);
    for (n, t) in params.iter_mut() {
        if !pick(n) {
            continue;
        }
        if let Some(g) = t.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<MetricsRow>,
    pub final_eval: EvalReport,
}

fn val_row(step: usize, r: &EvalReport) -> MetricsRow {
    MetricsRow {
        step,
        split: "val",
        losses: r.losses,
        acc_merged: Some(r.acc_merged),
        acc_streams: r.acc_streams,
        seg_pixel_acc: r.seg_pixel_acc,
    }
}

/// Minibatch SGD with momentum and a cosine schedule on the weighted loss.
///
/// Every `eval_every` steps (and after the last step) a `train` row with the
/// mean batch losses and accuracies since the previous row and a `val` row on
/// the whole validation split are produced. A `val` row for the untrained
/// model is emitted at step 0.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[VideoSample],
    val_set: &[VideoSample],
    cfg: &TrainConfig,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::input("training needs non-empty train and val splits"));
    }
    let k = model.config.num_actions;
    let stride = model.config.segnet.output_stride;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = Sgd::new(cfg.momentum as f32);
    let mut history = Vec::new();
    let mut emit = |row: MetricsRow, history: &mut Vec<MetricsRow>| -> Result<()> {
        if let Some(w) = metrics.as_deref_mut() {
            w.write(&row)?;
        }
        history.push(row);
        Ok(())
    };

    let mut report = evaluate_report(model, val_set, cfg)?;
    emit(val_row(0, &report), &mut history)?;

    let mut window = LossBreakdown::default();
    let mut window_hits = [0usize; 4];
    let mut window_seen = 0usize;
    let mut window_steps = 0usize;
    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        while picks.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let batch = Batch::<f32>::new(&picks, stride)?;

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let x = tape.leaf(batch.clips.clone());
        let out = model.forward(&mut tape, &bound, x, cfg.gradient_gate)?;
        let (total, b) = compute_losses(&mut tape, &out, &batch.labels, &batch.seg_labels, cfg)?;
        if !b.l_total.is_finite() {
            return Err(Error::Numeric {
                stage: "train",
                index: step,
                detail: format!("non-finite loss {b:?}"),
            });
        }
        let hits = |v: Var| (top1(tape.value(v), &batch.labels, k) * batch.labels.len() as f64).round() as usize;
        window_hits[0] += hits(out.logits_merged);
        for s in Stream::ALL {
            if let Some(v) = out.logits(s) {
                window_hits[1 + s as usize] += hits(v);
            }
        }
        window_seen += batch.labels.len();
        window.accumulate(&b, 1.0);
        window_steps += 1;

        tape.backward(total)?;
        model.params.absorb_grads(&tape, &bound);
        drop(tape);
        let in_flow = |n: &str| crate::repflow::PARAM_NAMES.contains(&n);
        if let Some(c) = cfg.max_grad_norm {
            let net = clip_grad_norm(&mut model.params, c, |n| !in_flow(n));
            let flow = clip_grad_norm(&mut model.params, c, in_flow);
            log::debug!("step {step} loss {:.4} grad norm {net:.3} flow {flow:.3}", b.l_total);
        }
        if cfg.flow_lr_scale != 1.0 {
            scale_grads(&mut model.params, cfg.flow_lr_scale, in_flow);
        }
        opt.step(model.params.trainable_mut(), cfg.lr_at(step) as f32)?;
        if model.config.has(Stream::Flow) {
            crate::repflow::project_params(&mut model.params);
        }

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let mut mean = LossBreakdown::default();
            mean.accumulate(&window, 1.0 / window_steps as f64);
            let acc = |h: usize| h as f64 / window_seen as f64;
            emit(
                MetricsRow {
                    step: done,
                    split: "train",
                    losses: mean,
                    acc_merged: Some(acc(window_hits[0])),
                    acc_streams: Stream::ALL.map(|s| model.config.has(s).then(|| acc(window_hits[1 + s as usize]))),
                    seg_pixel_acc: None,
                },
                &mut history,
            )?;
            window = LossBreakdown::default();
            window_hits = [0; 4];
            window_seen = 0;
            window_steps = 0;
            report = evaluate_report(model, val_set, cfg)?;
            emit(val_row(done, &report), &mut history)?;
        }
    }
    Ok(TrainOutcome {
        history,
        final_eval: report,
    })
}
