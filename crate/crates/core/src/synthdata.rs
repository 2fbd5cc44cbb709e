//! Synthetic action clips with exact masks and exact optical flow.
//!
//! Each clip shows one textured shape (square, circle or triangle) on a
//! static noise background. The action class is the shape's motion; the
//! shape kind is drawn independently and only determines the mask class.
//! Shapes are rasterized without anti-aliasing by mapping every pixel centre
//! back into the shape's own coordinate frame, so masks, texture and flow
//! all follow the same affine motion exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::{read_ten, write_ten, TenArray};
use crate::tensor::Tensor;

/// Label used for unknown pixels in teacher masks.
pub const IGNORE_LABEL: i32 = 255;

pub const MANIFEST: &str = "manifest.json";

const FORMAT_VERSION: u32 = 1;

/// Tries per clip before giving up on fitting the motion inside the frame.
const MAX_RETRIES: usize = 200;

/// Minimum distance kept between the shape and the frame edge.
const MARGIN: f64 = 2.0;

/// Largest half-size a shape may reach, per 32 px of frame side; bigger
/// outlines make scaled masks disagree with their flow by more rounding.
const MAX_HALF_SIZE_PER_32: f64 = 7.0;

/// Range of initial half-sizes for a frame side of `side` pixels: 3..=5 at 32 px.
fn half_size_range(side: usize) -> (u32, u32) {
    let lo = ((3 * side) as f64 / 32.0).round().max(2.0) as u32;
    let hi = ((5 * side) as f64 / 32.0).round().max(lo as f64) as u32;
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    TranslateE,
    TranslateW,
    TranslateN,
    TranslateS,
    RotateCw,
    RotateCcw,
    ScaleUp,
    ScaleDown,
}

impl Motion {
    pub const ALL: [Motion; 8] = [
        Motion::TranslateE,
        Motion::TranslateW,
        Motion::TranslateN,
        Motion::TranslateS,
        Motion::RotateCw,
        Motion::RotateCcw,
        Motion::ScaleUp,
        Motion::ScaleDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motion::TranslateE => "translate-e",
            Motion::TranslateW => "translate-w",
            Motion::TranslateN => "translate-n",
            Motion::TranslateS => "translate-s",
            Motion::RotateCw => "rotate-cw",
            Motion::RotateCcw => "rotate-ccw",
            Motion::ScaleUp => "scale-up",
            Motion::ScaleDown => "scale-down",
        }
    }

    pub fn is_translation(self) -> bool {
        matches!(
            self,
            Motion::TranslateE | Motion::TranslateW | Motion::TranslateN | Motion::TranslateS
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    /// Segmentation class; 0 is background.
    pub fn class_id(self) -> i32 {
        self as i32 + 1
    }

    /// Half-extents `(x, y)` of the shape's bounding box after rotating by `angle`.
    fn half_extent(self, r: f64, angle: f64) -> (f64, f64) {
        let h = 3f64.sqrt() / 2.0;
        let corners: &[(f64, f64)] = match self {
            ShapeKind::Circle => return (r, r),
            ShapeKind::Square => &[(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)],
            ShapeKind::Triangle => &[(0.0, -1.0), (h, 0.5), (-h, 0.5)],
        };
        let (s, c) = angle.sin_cos();
        corners.iter().fold((0.0f64, 0.0f64), |(ex, ey), &(x, y)| {
            ((r * (c * x - s * y)).abs().max(ex), (r * (s * x + c * y)).abs().max(ey))
        })
    }

    /// Membership of a point in shape coordinates (half-size `r`).
    fn contains(self, qx: f64, qy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => qx.abs() < r && qy.abs() < r,
            ShapeKind::Circle => qx * qx + qy * qy < r * r,
            // Equilateral triangle inscribed in the circle of radius r, apex up.
            ShapeKind::Triangle => {
                let h = r * 0.5;
                qy < h && (3f64.sqrt() * qx - qy) < r && (-3f64.sqrt() * qx - qy) < r
            }
        }
    }
}

/// Everything needed to render one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    pub class_id: i32,
    pub center: [f64; 2],
    /// Half-size in pixels at frame 0.
    pub size: f64,
    pub angle: f64,
    pub motion: Motion,
    /// Pixels per frame for translations, radians per frame for rotations,
    /// relative size change per frame for scalings.
    pub magnitude: f64,
    pub color: [f64; 3],
    pub background_seed: u64,
}

/// Shape pose at one frame.
#[derive(Debug, Clone, Copy)]
struct Pose {
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
}

impl SceneSpec {
    fn pose(&self, t: usize) -> Pose {
        let t = t as f64;
        let m = self.magnitude;
        let [mut cx, mut cy] = self.center;
        let (mut angle, mut scale) = (self.angle, 1.0);
        match self.motion {
            Motion::TranslateE => cx += m * t,
            Motion::TranslateW => cx -= m * t,
            Motion::TranslateN => cy -= m * t,
            Motion::TranslateS => cy += m * t,
            // With y pointing down a positive angle turns clockwise on screen.
            Motion::RotateCw => angle += m * t,
            Motion::RotateCcw => angle -= m * t,
            Motion::ScaleUp => scale = (1.0 + m).powf(t),
            Motion::ScaleDown => scale = (1.0 - m).powf(t),
        }
        Pose { cx, cy, angle, scale }
    }

    /// Shape coordinates of pixel centre `(x, y)` at frame `t`.
    fn to_shape(&self, pose: Pose, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - pose.cx, y - pose.cy);
        let (s, c) = pose.angle.sin_cos();
        ((c * dx + s * dy) / pose.scale, (-s * dx + c * dy) / pose.scale)
    }

    /// Displacement of a point at `(x, y)` between frame `t` and `t + 1`.
    pub fn displacement(&self, t: usize, x: f64, y: f64) -> (f64, f64) {
        let (a, b) = (self.pose(t), self.pose(t + 1));
        let (dx, dy) = (x - a.cx, y - a.cy);
        let k = b.scale / a.scale;
        let (s, c) = (b.angle - a.angle).sin_cos();
        let nx = b.cx + k * (c * dx - s * dy);
        let ny = b.cy + k * (s * dx + c * dy);
        (nx - x, ny - y)
    }

    fn fits(&self, frames: usize, h: usize, w: usize) -> bool {
        (0..frames).all(|t| {
            let p = self.pose(t);
            let r = self.size * p.scale;
            let (ex, ey) = self.shape.half_extent(r, p.angle);
            r <= MAX_HALF_SIZE_PER_32 * h.min(w) as f64 / 32.0
                && p.cx - ex >= MARGIN
                && p.cy - ey >= MARGIN
                && p.cx + ex <= w as f64 - MARGIN
                && p.cy + ey <= h as f64 - MARGIN
        })
    }

    /// Binary mask of frame `t`, row-major `[H, W]`.
    pub fn rasterize(&self, t: usize, h: usize, w: usize) -> Vec<bool> {
        let pose = self.pose(t);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (qx, qy) = self.to_shape(pose, x as f64 + 0.5, y as f64 + 0.5);
                out[y * w + x] = self.shape.contains(qx, qy, self.size);
            }
        }
        out
    }
}

/// Draws a scene for `motion`, retrying placements until the whole motion stays inside the frame.
pub fn sample_scene(
    rng: &mut ChaCha8Rng,
    motion: Motion,
    shape: ShapeKind,
    frames: usize,
    h: usize,
    w: usize,
    magnitude: Option<f64>,
) -> Result<SceneSpec> {
    for _ in 0..MAX_RETRIES {
        let magnitude = magnitude.unwrap_or_else(|| match motion {
            m if m.is_translation() => f64::from(rng.gen_range(1..=2u8)),
            Motion::RotateCw | Motion::RotateCcw => rng.gen_range(0.12..0.2),
            _ => rng.gen_range(0.04..0.07),
        });
        let (lo, hi) = half_size_range(h.min(w));
        let size = f64::from(rng.gen_range(lo..=hi));
        let scene = SceneSpec {
            shape,
            class_id: shape.class_id(),
            center: [rng.gen_range(0.0..w as f64).round(), rng.gen_range(0.0..h as f64).round()],
            size,
            angle: if matches!(shape, ShapeKind::Circle) { 0.0 } else { rng.gen_range(-0.3..0.3) },
            motion,
            magnitude,
            color: [rng.gen_range(0.5..0.95), rng.gen_range(0.5..0.95), rng.gen_range(0.5..0.95)],
            background_seed: rng.gen(),
        };
        if scene.fits(frames, h, w) {
            return Ok(scene);
        }
    }
    Err(Error::config(format!(
        "could not fit a {} {} into {h}x{w} frames after {MAX_RETRIES} tries",
        shape_name(shape),
        motion.name()
    )))
}

fn shape_name(s: ShapeKind) -> &'static str {
    match s {
        ShapeKind::Square => "square",
        ShapeKind::Circle => "circle",
        ShapeKind::Triangle => "triangle",
    }
}

/// One clip in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub clip_id: usize,
    /// `[T, 3, H, W]` in `[0, 1]`.
    pub frames: Tensor<f32>,
    pub action_label: usize,
    /// Ground-truth masks `[T, H, W]`.
    pub seg_masks: Vec<i32>,
    /// Masks used to supervise the segmentation net; `None` means the ground truth.
    pub teacher_masks: Option<Vec<i32>>,
    /// `[T-1, 2, H, W]`.
    pub gt_flow: Option<Tensor<f32>>,
}

impl VideoSample {
    pub fn supervision_masks(&self) -> &[i32] {
        self.teacher_masks.as_deref().unwrap_or(&self.seg_masks)
    }
}

/// Renders frames, masks and flow for a scene.
pub fn render(scene: &SceneSpec, frames: usize, h: usize, w: usize) -> Result<(Tensor<f32>, Vec<i32>, Tensor<f32>)> {
    let hw = h * w;
    let mut bg_rng = ChaCha8Rng::seed_from_u64(scene.background_seed);
    let background: Vec<f64> = (0..3 * hw).map(|_| 0.1 + 0.1 * bg_rng.gen::<f64>()).collect();
    let mut pixels = vec![0f32; frames * 3 * hw];
    let mut masks = vec![0i32; frames * hw];
    let mut flow = vec![0f32; frames.saturating_sub(1) * 2 * hw];
    for t in 0..frames {
        let pose = scene.pose(t);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (qx, qy) = scene.to_shape(pose, px, py);
                let i = y * w + x;
                let inside = scene.shape.contains(qx, qy, scene.size);
                for c in 0..3 {
                    let v = if inside {
                        // Smooth pattern in shape coordinates: rotations of symmetric shapes stay
                        // visible, and a one-pixel shift is small against its 8 and 10 px periods.
                        let stripe = 0.75 + 0.25 * (2.0 * PI * qx / 8.0).sin() * (2.0 * PI * qy / 10.0).cos();
                        scene.color[c] * stripe
                    } else {
                        background[c * hw + i]
                    };
                    pixels[(t * 3 + c) * hw + i] = v as f32;
                }
                if inside {
                    masks[t * hw + i] = scene.class_id;
                    if t + 1 < frames {
                        let (u, v) = scene.displacement(t, px, py);
                        flow[(t * 2) * hw + i] = u as f32;
                        flow[(t * 2 + 1) * hw + i] = v as f32;
                    }
                }
            }
        }
    }
    let frames_t = Tensor::new(vec![frames, 3, h, w], pixels)?;
    let flow_t = Tensor::new(vec![frames.saturating_sub(1).max(1), 2, h, w], if frames > 1 { flow } else { vec![0.0; 2 * hw] })?;
    Ok((frames_t, masks, flow_t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_actions: usize,
    pub frames: usize,
    pub size: usize,
    pub seed: u64,
    /// Forces every clip's motion magnitude (0 gives static scenes).
    pub magnitude: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_train: 512,
            num_val: 128,
            num_actions: 8,
            frames: 8,
            size: 32,
            seed: 7,
            magnitude: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_val == 0 {
            return Err(Error::input("num_train and num_val must be positive"));
        }
        if !(2..=Motion::ALL.len()).contains(&self.num_actions) {
            return Err(Error::input(format!(
                "num_actions must be in 2..={}, got {}",
                Motion::ALL.len(),
                self.num_actions
            )));
        }
        if self.frames < 2 {
            return Err(Error::input("clips need at least 2 frames"));
        }
        if self.size < 16 {
            return Err(Error::input(format!("frame size must be at least 16, got {}", self.size)));
        }
        if let Some(m) = self.magnitude {
            if !(0.0..=2.0).contains(&m) {
                return Err(Error::input(format!("motion magnitude override must be in [0, 2], got {m}")));
            }
        }
        Ok(())
    }

    /// Scene of clip `clip_id`; every clip has its own generator stream.
    pub fn scene(&self, clip_id: usize) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(clip_id as u64);
        let motion = Motion::ALL[rng.gen_range(0..self.num_actions)];
        let shape = ShapeKind::ALL[rng.gen_range(0..ShapeKind::ALL.len())];
        let magnitude = self.magnitude.map(|m| match motion {
            m2 if m2.is_translation() => m,
            // Same peak displacement scale for rotations and scalings.
            Motion::RotateCw | Motion::RotateCcw => m * 0.08,
            _ => m * 0.035,
        });
        sample_scene(&mut rng, motion, shape, self.frames, self.size, self.size, magnitude)
    }

    pub fn sample(&self, clip_id: usize) -> Result<VideoSample> {
        let scene = self.scene(clip_id)?;
        let (frames, masks, flow) = render(&scene, self.frames, self.size, self.size)?;
        Ok(VideoSample {
            clip_id,
            frames,
            action_label: Motion::ALL.iter().position(|&m| m == scene.motion).expect("motion is listed"),
            seg_masks: masks,
            teacher_masks: None,
            gt_flow: Some(flow),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: usize,
    pub split: Split,
    pub action: usize,
    pub seg_class: i32,
    pub frames: String,
    pub masks: String,
    pub flow: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator_seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub num_actions: usize,
    pub num_seg_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub action_names: Vec<String>,
    pub clips: Vec<ClipEntry>,
}

fn clip_file(clip_id: usize, kind: &str) -> String {
    format!("clips/clip_{clip_id:06}_{kind}.ten")
}

/// Writes a dataset directory and returns its manifest.
pub fn generate_dataset(cfg: &DataConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let clips_dir = out.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let total = cfg.num_train + cfg.num_val;
    let mut clips = Vec::with_capacity(total);
    for clip_id in 0..total {
        let scene = cfg.scene(clip_id)?;
        let (frames, masks, flow) = render(&scene, cfg.frames, cfg.size, cfg.size)?;
        let entry = ClipEntry {
            clip_id,
            split: if clip_id < cfg.num_train { Split::Train } else { Split::Val },
            action: Motion::ALL.iter().position(|&m| m == scene.motion).expect("motion is listed"),
            seg_class: scene.class_id,
            frames: clip_file(clip_id, "frames"),
            masks: clip_file(clip_id, "masks"),
            flow: clip_file(clip_id, "flow"),
        };
        write_ten(&out.join(&entry.frames), &TenArray::from_tensor(&frames))?;
        write_ten(
            &out.join(&entry.masks),
            &TenArray::I32 {
                shape: vec![cfg.frames, cfg.size, cfg.size],
                values: masks,
            },
        )?;
        write_ten(&out.join(&entry.flow), &TenArray::from_tensor(&flow))?;
        clips.push(entry);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator_seed: cfg.seed,
        num_train: cfg.num_train,
        num_val: cfg.num_val,
        num_actions: cfg.num_actions,
        num_seg_classes: 1 + ShapeKind::ALL.len(),
        frames: cfg.frames,
        height: cfg.size,
        width: cfg.size,
        action_names: Motion::ALL[..cfg.num_actions].iter().map(|m| m.name().to_string()).collect(),
        clips,
    };
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads and checks a dataset manifest; every listed file must exist.
pub fn dataset_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity(format!("no dataset manifest at {}", path.display())),
        _ => Error::io(&path, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    if manifest.clips.len() != manifest.num_train + manifest.num_val {
        return Err(Error::Integrity(format!(
            "manifest lists {} clips, expected {}",
            manifest.clips.len(),
            manifest.num_train + manifest.num_val
        )));
    }
    for c in &manifest.clips {
        for f in [&c.frames, &c.masks, &c.flow] {
            if !dir.join(f).is_file() {
                return Err(Error::Integrity(format!("missing dataset file {f}")));
            }
        }
    }
    Ok(manifest)
}

/// A dataset loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
}

fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Integrity(format!("{what} has shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dataset_manifest(dir)?;
        let (t, h, w) = (manifest.frames, manifest.height, manifest.width);
        let mut train = Vec::with_capacity(manifest.num_train);
        let mut val = Vec::with_capacity(manifest.num_val);
        for c in &manifest.clips {
            let frames = read_ten(&dir.join(&c.frames))?.to_tensor::<f32>()?;
            expect_shape(&c.frames, frames.shape(), &[t, 3, h, w])?;
            let (ms, masks) = read_ten(&dir.join(&c.masks))?.into_i32()?;
            expect_shape(&c.masks, &ms, &[t, h, w])?;
            let flow = read_ten(&dir.join(&c.flow))?.to_tensor::<f32>()?;
            expect_shape(&c.flow, flow.shape(), &[t - 1, 2, h, w])?;
            if c.action >= manifest.num_actions {
                return Err(Error::Integrity(format!("clip {} has action {} out of range", c.clip_id, c.action)));
            }
            let sample = VideoSample {
                clip_id: c.clip_id,
                frames,
                action_label: c.action,
                seg_masks: masks,
                teacher_masks: None,
                gt_flow: Some(flow),
            };
            match c.split {
                Split::Train => train.push(sample),
                Split::Val => val.push(sample),
            }
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            train,
            val,
        })
    }

    pub fn split(&self, split: Split) -> &[VideoSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Replaces the supervision masks of every clip with teacher masks.
    pub fn apply_teacher_masks(&mut self, masks: BTreeMap<usize, Vec<i32>>) -> Result<()> {
        for s in self.train.iter_mut().chain(self.val.iter_mut()) {
            let m = masks
                .get(&s.clip_id)
                .ok_or_else(|| Error::input(format!("no teacher masks for clip {}", s.clip_id)))?;
            s.teacher_masks = Some(m.clone());
        }
        Ok(())
    }
}

/// File name of a clip's teacher masks inside a teacher directory.
pub fn teacher_file(clip_id: usize) -> String {
    format!("clip_{clip_id:06}_masks.ten")
}

/// Reads `[T, H, W]` i32 teacher masks for every clip of `manifest` from `dir`.
/// Values must be valid class ids or [`IGNORE_LABEL`].
pub fn load_teacher_masks(dir: &Path, manifest: &Manifest) -> Result<BTreeMap<usize, Vec<i32>>> {
    let mut out = BTreeMap::new();
    let want = [manifest.frames, manifest.height, manifest.width];
    for c in &manifest.clips {
        let path = dir.join(teacher_file(c.clip_id));
        let (shape, values) = read_ten(&path)?.into_i32()?;
        if shape.len() != 3 || shape[0] != want[0] {
            return Err(Error::input(format!(
                "teacher masks for clip {} have {} frames (shape {shape:?}), the clip has {}",
                c.clip_id,
                shape.first().copied().unwrap_or(0),
                want[0]
            )));
        }
        if shape[1..] != want[1..] {
            return Err(Error::input(format!(
                "teacher masks for clip {} have shape {shape:?}, expected {want:?}",
                c.clip_id
            )));
        }
        let k = manifest.num_seg_classes as i32;
        if let Some(bad) = values.iter().find(|&&v| v != IGNORE_LABEL && !(0..k).contains(&v)) {
            return Err(Error::input(format!("teacher masks for clip {} contain label {bad}", c.clip_id)));
        }
        out.insert(c.clip_id, values);
    }
    Ok(out)
}

/// Writes masks in the teacher layout (used to export or corrupt ground truth).
pub fn write_teacher_masks(dir: &Path, manifest: &Manifest, masks: &BTreeMap<usize, Vec<i32>>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (&id, m) in masks {
        write_ten(
            &dir.join(teacher_file(id)),
            &TenArray::I32 {
                shape: vec![manifest.frames, manifest.height, manifest.width],
                values: m.clone(),
            },
        )?;
    }
    Ok(())
}
