use airstreams::gradcheck::{self, GradCheckConfig};
use airstreams::towers::{
    block_forward, context_gate, flop_report, merge_streams, segnet_forward, squeeze_excite, BlockSpec, GradientGate,
    Model, ModelConfig, SegNetConfig, Stream, UnitWeights,
};
use airstreams::tensor::{Padding, Tape, Tensor, Var};
use airstreams::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `[N, C]` channel means of `[N, T, C, H, W]`.
fn pooled(x: &[f64], [n, t, c, s]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let base = ((ni * t + ti) * c + ci) * s;
                out[ni * c + ci] += x[base..base + s].iter().sum::<f64>() / (t * s) as f64;
            }
        }
    }
    out
}

fn gated(x: &[f64], g: &[f64], [_, t, c, s]: [usize; 4]) -> Vec<f64> {
    let mut out = x.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let ci = (i / s) % c;
        let ni = i / (t * c * s);
        *v *= g[ni * c + ci];
    }
    out
}

const DIMS: [usize; 5] = [2, 3, 4, 3, 3];

fn gate_case(x: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(DIMS.to_vec(), x.to_vec()).unwrap();
    let av = tape.constant(vec![4], a.to_vec()).unwrap();
    let bv = tape.constant(vec![4], b.to_vec()).unwrap();
    let y = context_gate(&mut tape, xv, av, bv).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn context_gate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n: usize = DIMS.iter().product();
    let x = rand_vec(&mut rng, n, -1.0, 1.0);
    let half = gate_case(&x, &[0.0; 4], &[0.0; 4]);
    assert!(half.iter().zip(&x).all(|(a, b)| *a == 0.5 * b));
    let open = gate_case(&x, &[0.0; 4], &[60.0; 4]);
    assert!(open.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));

    let a = rand_vec(&mut rng, 4, -2.0, 2.0);
    let b = rand_vec(&mut rng, 4, -1.0, 1.0);
    let dims = [2, 3, 4, 9];
    let p = pooled(&x, dims);
    let g: Vec<f64> = p.iter().enumerate().map(|(i, v)| sigmoid(a[i % 4] * v + b[i % 4])).collect();
    let want = gated(&x, &g, dims);
    let got = gate_case(&x, &a, &b);
    assert!(got.iter().zip(&want).all(|(u, v)| (u - v).abs() < 1e-6));
}

fn se_case(x: &[f64], w1: &[f64], w2: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(DIMS.to_vec(), x.to_vec()).unwrap();
    let a = tape.constant(vec![4, 2], w1.to_vec()).unwrap();
    let b = tape.constant(vec![2, 4], w2.to_vec()).unwrap();
    let y = squeeze_excite(&mut tape, xv, a, b).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn squeeze_excite_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n: usize = DIMS.iter().product();
    let x = rand_vec(&mut rng, n, -1.0, 1.0);
    let half = se_case(&x, &[0.0; 8], &[0.0; 8]);
    assert!(half.iter().zip(&x).all(|(a, b)| *a == 0.5 * b));
    let w1 = rand_vec(&mut rng, 8, -1.0, 1.0);
    let w2 = rand_vec(&mut rng, 8, -1.0, 1.0);
    assert!(se_case(&vec![0.0; n], &w1, &w2).iter().all(|&v| v == 0.0));

    let dims = [2, 3, 4, 9];
    let p = pooled(&x, dims);
    let mut g = vec![0.0; 8];
    for ni in 0..2 {
        let hidden: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|ci| p[ni * 4 + ci] * w1[ci * 2 + j]).sum::<f64>().max(0.0))
            .collect();
        for ci in 0..4 {
            g[ni * 4 + ci] = sigmoid((0..2).map(|j| hidden[j] * w2[j * 4 + ci]).sum());
        }
    }
    let want = gated(&x, &g, dims);
    let got = se_case(&x, &w1, &w2);
    assert!(got.iter().zip(&want).all(|(u, v)| (u - v).abs() < 1e-6));
}

fn conv_only(c: usize) -> BlockSpec {
    BlockSpec {
        out_channels: c,
        use_context_gate: false,
        use_squeeze_excite: false,
        use_skip: false,
        ..BlockSpec::default()
    }
}

struct BlockRig {
    tape: Tape<f64>,
    x: Var,
    unit: UnitWeights,
}

fn rig(x: Vec<f64>, dims: [usize; 5], conv: Vec<f64>, cout: usize, temporal: Vec<f64>) -> BlockRig {
    let mut tape = Tape::<f64>::new();
    let c = dims[2];
    let xv = tape.constant(dims.to_vec(), x).unwrap();
    let k = conv.len() / (cout * c);
    let side = (k as f64).sqrt() as usize;
    let conv = tape.constant(vec![cout, c, side, side], conv).unwrap();
    let conv_bias = tape.constant(vec![cout], vec![0.0; cout]).unwrap();
    let kt = temporal.len() / cout;
    let temporal = tape.constant(vec![cout, kt], temporal).unwrap();
    BlockRig {
        tape,
        x: xv,
        unit: UnitWeights {
            conv,
            conv_bias,
            temporal,
            gate: None,
            excite: None,
            projection: None,
        },
    }
}

#[test]
fn identity_block_doubles_positive_input() {
    let dims = [1, 4, 2, 3, 3];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_vec(&mut rng, dims.iter().product(), 0.1, 1.0);
    let mut conv = vec![0.0; 2 * 2 * 9];
    conv[4] = 1.0;
    conv[(2 + 1) * 9 + 4] = 1.0;
    let mut r = rig(x.clone(), dims, conv, 2, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let spec = BlockSpec {
        out_channels: 2,
        use_context_gate: false,
        use_squeeze_excite: false,
        ..BlockSpec::default()
    };
    let y = block_forward(&mut r.tape, r.x, &spec, &[r.unit], false).unwrap();
    for (a, b) in r.tape.value(y).iter().zip(&x) {
        assert!((a - 2.0 * b).abs() < 1e-12);
    }
}

#[test]
fn pooling_block_halves_space_and_time() {
    let dims = [2, 4, 3, 6, 6];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_vec(&mut rng, dims.iter().product(), -1.0, 1.0);
    let conv = rand_vec(&mut rng, 5 * 3 * 9, -0.3, 0.3);
    let mut r = rig(x, dims, conv, 5, rand_vec(&mut rng, 15, -1.0, 1.0));
    let proj = r.tape.constant(vec![5, 3, 1, 1], rand_vec(&mut rng, 15, -1.0, 1.0)).unwrap();
    r.unit.projection = Some(proj);
    let spec = BlockSpec {
        out_channels: 5,
        temporal_pool: true,
        use_context_gate: false,
        use_squeeze_excite: false,
        ..BlockSpec::default()
    };
    let y = block_forward(&mut r.tape, r.x, &spec, &[r.unit], true).unwrap();
    assert_eq!(r.tape.shape(y), &[2, 2, 5, 3, 3]);
}

#[test]
fn conv_only_block_matches_hand_composed_pipeline() {
    let dims = [2, 3, 2, 5, 5];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_vec(&mut rng, dims.iter().product(), -1.0, 1.0);
    let conv = rand_vec(&mut rng, 3 * 2 * 9, -0.5, 0.5);
    let temporal = rand_vec(&mut rng, 9, -1.0, 1.0);
    let mut r = rig(x.clone(), dims, conv.clone(), 3, temporal.clone());
    let y = block_forward(&mut r.tape, r.x, &conv_only(3), &[r.unit], false).unwrap();
    let got = r.tape.value(y).to_vec();

    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(vec![6, 2, 5, 5], x).unwrap();
    let k = tape.constant(vec![3, 2, 3, 3], conv).unwrap();
    let s = tape.conv2d(xv, k, 1, 1, Padding::SameReplicate).unwrap();
    let s = tape.reshape(s, vec![2, 3, 3, 5, 5]).unwrap();
    let kt = tape.constant(vec![3, 3], temporal).unwrap();
    let s = tape.conv1d_temporal(s, kt).unwrap();
    let s = tape.relu(s);
    assert!(got.iter().zip(tape.value(s)).all(|(a, b)| (a - b).abs() < 1e-6));
}

#[test]
fn segnet_output_resolution() {
    let cfg = SegNetConfig::default();
    let mut model_cfg = ModelConfig::default();
    model_cfg.segnet = cfg.clone();
    let model = Model::<f32>::new(model_cfg, 1).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = model.params.bind(&mut tape);
    let frames = tape.constant(vec![2, 3, 32, 32], vec![0.5; 2 * 3 * 1024]).unwrap();
    let y = segnet_forward(&mut tape, frames, &cfg, &bound).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 8, 8]);

    let single = SegNetConfig { num_classes: 1, ..cfg };
    // Degenerate but valid: one class always wins the argmax.
    let model = Model::<f32>::new(ModelConfig { segnet: single.clone(), ..ModelConfig::default() }, 1).unwrap();
    let mut tape = Tape::<f32>::new();
    let bound = model.params.bind(&mut tape);
    let frames = tape.constant(vec![1, 3, 32, 32], vec![0.2; 3 * 1024]).unwrap();
    let y = segnet_forward(&mut tape, frames, &single, &bound).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 8, 8]);
}

#[test]
fn merge_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -4.0]).unwrap();
    let m = merge_streams(&mut tape, &[a, a, a]).unwrap();
    assert_eq!(tape.value(m), tape.value(a));
    let neg = tape.scale(a, -1.0);
    let zero = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let m = merge_streams(&mut tape, &[a, neg, zero]).unwrap();
    assert!(tape.value(m).iter().all(|&v| v == 0.0));
    let other = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(matches!(merge_streams(&mut tape, &[a, other]), Err(Error::Config(_))));
}

#[test]
fn merged_tower_holds_only_the_last_three_blocks() {
    let model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let names: Vec<&str> = model.params.names().collect();
    for b in 1..=6 {
        let has = names.iter().any(|n| n.starts_with(&format!("merged.b{b}.")));
        assert_eq!(has, b >= 4, "merged block {b}");
        for s in ["rgb", "flow", "semantic"] {
            assert!(names.iter().any(|n| n.starts_with(&format!("{s}.b{b}."))));
        }
    }
}

#[test]
fn forward_shape_contract() {
    let model = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clip = Tensor::new(vec![2, 8, 3, 32, 32], (0..2 * 8 * 3 * 1024).map(|_| rng.gen()).collect()).unwrap();
    let p = model.predict(&clip).unwrap();
    assert_eq!(p.merged.len(), 16);
    for s in &p.streams {
        assert_eq!(s.as_ref().unwrap().len(), 16);
    }
    assert_eq!(p.seg_logits.unwrap().shape(), &[16, 4, 8, 8]);
    assert_eq!(p.flow.unwrap().shape(), &[2, 7, 2, 32, 32]);
}

#[test]
fn rgb_only_model_has_no_merged_tower() {
    let cfg = ModelConfig { streams: vec![Stream::Rgb], ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg, 0).unwrap();
    assert!(model.params.names().all(|n| n.starts_with("rgb.")));
    let clip = Tensor::filled(vec![1, 8, 3, 32, 32], 0.3f32);
    let p = model.predict(&clip).unwrap();
    assert_eq!(Some(p.merged.clone()), p.streams[0]);
}

#[test]
fn stop_gate_only_changes_gradients() {
    let model = Model::<f64>::new(gradcheck::micro_config(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clip: Vec<f64> = (0..2 * 3 * 3 * 64).map(|_| rng.gen()).collect();
    let run = |gate| {
        let mut tape = Tape::<f64>::new();
        let bound = model.params.bind(&mut tape);
        let x = tape.constant(vec![2, 3, 3, 8, 8], clip.clone()).unwrap();
        let out = model.forward(&mut tape, &bound, x, gate).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits_merged, &[0, 2]).unwrap();
        tape.backward(loss).unwrap();
        let theta = tape.grad(bound.get("flow.theta").unwrap()).unwrap()[0];
        let seg = tape.grad(bound.get("seg.s1.conv").unwrap()).unwrap().to_vec();
        (tape.value(out.logits_merged).to_vec(), theta, seg)
    };
    let (lp, theta_p, seg_p) = run(GradientGate::Propagate);
    let (ls, theta_s, seg_s) = run(GradientGate::Stop);
    assert_eq!(lp, ls);
    assert_ne!(theta_p, 0.0);
    assert_eq!(theta_s, 0.0);
    assert!(seg_p.iter().any(|&g| g != 0.0));
    assert!(seg_s.iter().all(|&g| g == 0.0));
}

#[test]
fn block_and_micro_model_pass_finite_differences() {
    let cfg = GradCheckConfig { tolerance: 1e-4, ..GradCheckConfig::default() };
    for case in gradcheck::tower_cases(5) {
        let report = gradcheck::run_case(&case, &cfg).unwrap();
        assert!(report.checked > 0);
        assert!(report.passed(), "{}: {:e}", report.name, report.max_rel_error);
    }
}

#[test]
fn flop_counter_orders_configurations() {
    let full = flop_report(&ModelConfig::default()).unwrap();
    let rgb = flop_report(&ModelConfig { streams: vec![Stream::Rgb], ..ModelConfig::default() }).unwrap();
    assert_eq!(rgb.total, rgb.rgb_tower);
    assert!(full.total > rgb.total);
    assert!(full.total < 4.0 * rgb.total);
}
