//! Central finite-difference checks of tape gradients at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Builds a scalar loss from the case inputs recorded on a fresh tape.
pub type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Send + Sync>;

pub struct GradCheckCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
    /// Check this many randomly chosen coordinates across all inputs (all when `None`).
    pub sample: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval(case: &GradCheckCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = (case.build)(&mut tape, &vars)?;
    Ok(tape.item(root))
}

pub fn run_case(case: &GradCheckCase, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = (case.build)(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();

    let mut coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .filter(|(_, g)| g.is_some())
        .flat_map(|(i, _)| (0..case.inputs[i].numel()).map(move |j| (i, j)))
        .collect();
    if let Some(k) = case.sample.filter(|&k| k < coords.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, coords.len(), k).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|p| coords[p]).collect();
    }
    let mut worst = 0.0f64;
    let mut inputs = case.inputs.clone();
    for &(i, j) in &coords {
        let grad = analytic[i].as_ref().expect("filtered above");
        let orig = inputs[i].values()[j];
        inputs[i].values_mut()[j] = orig + cfg.step;
        let up = eval(case, &inputs)?;
        inputs[i].values_mut()[j] = orig - cfg.step;
        let down = eval(case, &inputs)?;
        inputs[i].values_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        worst = worst.max(relative_error(grad[j], numeric, cfg.floor));
    }
    let checked = coords.len();
    Ok(GradCheckReport {
        name: case.name.clone(),
        checked,
        max_rel_error: worst,
        tolerance: cfg.tolerance,
    })
}

/// Deterministic uniform tensor in `[lo, hi)` that requires grad.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, v).expect("consistent shape").with_grad()
}

/// Reduces any tensor to a scalar through a fixed random projection, so
/// every output coordinate contributes with a distinct weight.
pub fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(shape, w)?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn case(name: &str, inputs: Vec<Tensor<f64>>, build: BuildFn) -> GradCheckCase {
    GradCheckCase {
        name: name.to_string(),
        inputs,
        build,
        sample: None,
    }
}

/// One case per differentiable primitive of the tape.
pub fn primitive_cases(seed: u64) -> Vec<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape.to_vec(), -1.0, 1.0);
    let pos = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape.to_vec(), 0.5, 2.0);
    let mut cases = Vec::new();

    macro_rules! binary {
        ($name:expr, $method:ident, $a:expr, $b:expr) => {{
            let (a, b) = ($a, $b);
            cases.push(case(
                $name,
                vec![a, b],
                Box::new(|t, v| {
                    let y = t.$method(v[0], v[1])?;
                    probe(t, y, 1)
                }),
            ));
        }};
    }
    binary!("add", add, r(&mut rng, &[2, 3]), r(&mut rng, &[2, 3]));
    binary!("sub", sub, r(&mut rng, &[2, 3]), r(&mut rng, &[2, 3]));
    binary!("mul", mul, r(&mut rng, &[2, 3]), r(&mut rng, &[2, 3]));
    binary!("div", div, r(&mut rng, &[2, 3]), pos(&mut rng, &[2, 3]));
    binary!("mul_scalar", mul_scalar, r(&mut rng, &[2, 3]), r(&mut rng, &[1]));
    binary!("clamp_sym", clamp_sym, r(&mut rng, &[3, 4]), random_tensor(&mut rng, vec![1], 0.3, 0.6));
    binary!("matmul", matmul, r(&mut rng, &[3, 4]), r(&mut rng, &[4, 2]));
    binary!("add_row_bias", add_row_bias, r(&mut rng, &[3, 4]), r(&mut rng, &[4]));
    binary!("add_channel_bias", add_channel_bias, r(&mut rng, &[2, 3, 2, 2]), r(&mut rng, &[3]));
    binary!("scale_channels", scale_channels, r(&mut rng, &[2, 3, 2, 2, 2]), r(&mut rng, &[2, 2]));
    binary!("conv1d_temporal", conv1d_temporal, r(&mut rng, &[2, 4, 2, 2, 3]), r(&mut rng, &[2, 3]));

    macro_rules! unary {
        ($name:expr, $input:expr, |$t:ident, $x:ident| $body:expr) => {{
            let input = $input;
            cases.push(case(
                $name,
                vec![input],
                Box::new(|$t, v| {
                    let $x = v[0];
                    let y = $body;
                    probe($t, y, 2)
                }),
            ));
        }};
    }
    unary!("scale", r(&mut rng, &[5]), |t, x| t.scale(x, 1.7));
    unary!("add_const", r(&mut rng, &[5]), |t, x| t.add_const(x, 0.3));
    unary!("relu", r(&mut rng, &[3, 5]), |t, x| t.relu(x));
    unary!("sigmoid", r(&mut rng, &[3, 5]), |t, x| t.sigmoid(x));
    unary!("sqrt", pos(&mut rng, &[3, 5]), |t, x| t.sqrt(x));
    unary!("square", r(&mut rng, &[3, 5]), |t, x| t.square(x));
    unary!("sum", r(&mut rng, &[2, 3]), |t, x| t.sum(x));
    unary!("mean_reduce", r(&mut rng, &[2, 3]), |t, x| t.mean_reduce(x));
    unary!("reshape", r(&mut rng, &[2, 3]), |t, x| t.reshape(x, vec![3, 2])?);
    unary!("gather", r(&mut rng, &[4]), |t, x| t.gather(x, vec![3, 0, 0, 2, 1], vec![5])?);
    unary!("index_frames", r(&mut rng, &[2, 3, 2]), |t, x| t.index_frames(x, &[2, 0, 2])?);
    unary!("channel_mean", r(&mut rng, &[2, 3, 2, 2]), |t, x| t.channel_mean(x)?);
    unary!("max_pool2d", r(&mut rng, &[2, 2, 4, 4]), |t, x| t.max_pool2d(x)?);
    unary!("temporal_max_pool", r(&mut rng, &[2, 4, 2, 3]), |t, x| t.temporal_max_pool(x)?);
    unary!("global_average_pool", r(&mut rng, &[2, 3, 2, 2, 2]), |t, x| t.global_average_pool(x)?);
    unary!("concat_channels", r(&mut rng, &[2, 3, 2, 2]), |t, x| {
        let y = t.scale(x, 2.0);
        t.concat_channels(&[x, y])?
    });

    let conv_variants = [
        ("conv2d_replicate", [2, 2, 5, 5], [3, 2, 3, 3], 1, 1, Padding::SameReplicate),
        ("conv2d_zero", [2, 2, 5, 5], [3, 2, 3, 3], 1, 1, Padding::SameZero),
        ("conv2d_stride2", [1, 2, 6, 6], [2, 2, 3, 3], 2, 1, Padding::SameReplicate),
        ("conv2d_dilated", [1, 2, 7, 7], [2, 2, 3, 3], 1, 2, Padding::SameZero),
        ("conv2d_pointwise", [2, 3, 3, 3], [2, 3, 1, 1], 1, 1, Padding::SameReplicate),
        ("conv2d_1x3", [2, 1, 4, 5], [1, 1, 1, 3], 1, 1, Padding::SameReplicate),
    ];
    for (name, xs, ks, stride, dilation, padding) in conv_variants {
        let (x, k) = (r(&mut rng, &xs), r(&mut rng, &ks));
        cases.push(case(
            name,
            vec![x, k],
            Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], stride, dilation, padding)?;
                probe(t, y, 3)
            }),
        ));
    }

    cases.push(case(
        "softmax_cross_entropy",
        vec![random_tensor(&mut rng, vec![4, 3], -2.0, 2.0)],
        Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])),
    ));
    let targets: Vec<f64> = (0..12).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    cases.push(case(
        "sigmoid_cross_entropy",
        vec![random_tensor(&mut rng, vec![4, 3], -2.0, 2.0)],
        Box::new(move |t, v| t.sigmoid_cross_entropy(v[0], &targets)),
    ));
    let labels: Vec<i32> = (0..2 * 3 * 3)
        .map(|i| if i % 7 == 3 { 255 } else { rng.gen_range(0..3) })
        .collect();
    cases.push(case(
        "pixelwise_softmax_cross_entropy",
        vec![random_tensor(&mut rng, vec![2, 3, 3, 3], -2.0, 2.0)],
        Box::new(move |t, v| Ok(t.pixelwise_softmax_cross_entropy(v[0], &labels, 255)?.loss)),
    ));
    cases
}

/// Smooth random image in `[0.2, 0.8]` built from a few low-frequency waves.
fn smooth_frames(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * h * w);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.gen_range(0.3..1.2), rng.gen_range(0.3..1.2), rng.gen_range(0.0..6.3)))
        .collect();
    for ti in 0..t {
        let shift = 0.6 * ti as f64;
        for y in 0..h {
            for x in 0..w {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph)| ((x as f64 - shift) * fx + y as f64 * fy + ph).sin())
                    .sum();
                out.push(0.5 + 0.1 * v);
            }
        }
    }
    out
}

/// Gradient of a probe of the flow output with respect to every flow parameter
/// and the input frames.
pub fn repflow_cases(seed: u64) -> Vec<GradCheckCase> {
    use crate::repflow::{compute_flow, FlowParams, FlowVars};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = FlowParams::default();
    let (t, h, w) = (3, 6, 7);
    let frames = Tensor::new(vec![t, 1, h, w], smooth_frames(&mut rng, t, h, w))
        .expect("consistent shape")
        .with_grad();
    let scalar = |v: f64| Tensor::new(vec![1], vec![v]).expect("scalar").with_grad();
    let kernel = |k: [f64; 3]| Tensor::new(vec![3], k.to_vec()).expect("kernel").with_grad();
    let inputs = vec![
        frames,
        scalar(p.theta),
        scalar(p.lambda_data),
        scalar(p.tau),
        kernel(p.grad_kernel_x),
        kernel(p.grad_kernel_y),
    ];
    vec![GradCheckCase {
        name: "repflow".into(),
        inputs,
        build: Box::new(|tape, v| {
            let vars = FlowVars {
                theta: v[1],
                lambda_data: v[2],
                tau: v[3],
                kernel_x: v[4],
                kernel_y: v[5],
                n_iterations: 5,
            };
            let flow = compute_flow(tape, v[0], &vars)?;
            probe(tape, flow.u, 5)
        }),
        sample: None,
    }]
}

/// Which finite-difference suites to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Repflow,
    Towers,
}

impl std::str::FromStr for Suite {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "tensor" => Ok(Suite::Tensor),
            "repflow" => Ok(Suite::Repflow),
            "towers" => Ok(Suite::Towers),
            other => Err(crate::error::Error::input(format!(
                "unknown gradcheck module {other:?}; use all, tensor, repflow or towers"
            ))),
        }
    }
}

/// Primitives are held to 1e-5, composed layers to 1e-4.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const COMPOSED_TOLERANCE: f64 = 1e-4;

/// Runs the selected suites. `tolerance` overrides the per-suite defaults.
pub fn run_suite(suite: Suite, tolerance: Option<f64>, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut groups: Vec<(Vec<GradCheckCase>, f64)> = Vec::new();
    if matches!(suite, Suite::All | Suite::Tensor) {
        groups.push((primitive_cases(seed), PRIMITIVE_TOLERANCE));
    }
    if matches!(suite, Suite::All | Suite::Repflow) {
        groups.push((repflow_cases(seed), COMPOSED_TOLERANCE));
    }
    if matches!(suite, Suite::All | Suite::Towers) {
        groups.push((tower_cases(seed), COMPOSED_TOLERANCE));
    }
    let mut reports = Vec::new();
    for (cases, default_tol) in groups {
        let cfg = GradCheckConfig {
            tolerance: tolerance.unwrap_or(default_tol),
            seed,
            ..GradCheckConfig::default()
        };
        for case in &cases {
            reports.push(run_case(case, &cfg)?);
        }
    }
    Ok(reports)
}

/// Tiny three-stream configuration used for end-to-end gradient checks.
pub fn micro_config() -> crate::towers::ModelConfig {
    use crate::towers::{BlockSpec, ModelConfig, SegNetConfig, TowerConfig};
    let blocks = (0..6)
        .map(|i| BlockSpec {
            out_channels: 2,
            se_reduction: 2,
            spatial_pool: i < 2,
            ..BlockSpec::default()
        })
        .collect();
    ModelConfig {
        num_actions: 3,
        frames: 3,
        height: 8,
        width: 8,
        tower: TowerConfig {
            blocks,
            merge_after_block: 3,
        },
        segnet: SegNetConfig {
            channels: vec![2, 2],
            dilations: vec![1, 2],
            output_stride: 2,
            num_classes: 3,
        },
        flow: crate::repflow::FlowParams::default().with_iterations(2),
        ..ModelConfig::default()
    }
}

/// A full block with every sub-layer enabled, and the micro model end to end
/// (all parameters are inputs, 50 of them are probed).
pub fn tower_cases(seed: u64) -> Vec<GradCheckCase> {
    use crate::towers::{block_forward, BlockSpec, GradientGate, Model, UnitWeights};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let spec = BlockSpec {
        out_channels: 4,
        se_reduction: 2,
        spatial_pool: true,
        temporal_pool: true,
        ..BlockSpec::default()
    };
    let x = random_tensor(&mut rng, vec![2, 4, 3, 4, 4], -1.0, 1.0);
    let shapes: [&[usize]; 8] = [&[4, 3, 3, 3], &[4], &[4, 3], &[4], &[4], &[4, 2], &[2, 4], &[4, 3, 1, 1]];
    let mut inputs = vec![x];
    inputs.extend(shapes.iter().map(|s| random_tensor(&mut rng, s.to_vec(), -1.0, 1.0)));
    cases.push(GradCheckCase {
        name: "tower_block".into(),
        inputs,
        build: Box::new(move |t, v| {
            let w = UnitWeights {
                conv: v[1],
                conv_bias: v[2],
                temporal: v[3],
                gate: Some((v[4], v[5])),
                excite: Some((v[6], v[7])),
                projection: Some(v[8]),
            };
            let y = block_forward(t, v[0], &spec, &[w], true)?;
            probe(t, y, 7)
        }),
        sample: None,
    });

    let model = Model::<f64>::new(micro_config(), seed).expect("micro config is valid");
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let cfg = model.config.clone();
    let mut inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let clip = Tensor::new(
        vec![2, cfg.frames, 3, cfg.height, cfg.width],
        smooth_frames(&mut rng, 2 * cfg.frames * 3, cfg.height, cfg.width),
    )
    .expect("consistent shape");
    inputs.push(clip);
    cases.push(GradCheckCase {
        name: "micro_model".into(),
        inputs,
        build: Box::new(move |t, v| {
            let (params, clip) = v.split_at(v.len() - 1);
            let bound = crate::params::Bound::from_pairs(names.iter().cloned().zip(params.iter().copied()));
            let out = model.forward(t, &bound, clip[0], GradientGate::Propagate)?;
            let mut terms = vec![out.logits_merged, out.logits_rgb];
            terms.extend(out.logits_flow);
            terms.extend(out.logits_semantic);
            terms.extend(out.seg_logits);
            let mut total = probe(t, terms[0], 11)?;
            for (i, &term) in terms.iter().enumerate().skip(1) {
                let p = probe(t, term, 11 + i as u64)?;
                total = t.add(total, p)?;
            }
            Ok(total)
        }),
        sample: Some(50),
    });
    cases
}
