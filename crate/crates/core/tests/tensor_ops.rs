use airstreams::gradcheck::{self, GradCheckConfig};
use airstreams::tensor::{softmax, Padding, Tape, Tensor, Var};
use airstreams::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Direct nested-loop "same" convolution used as the reference.
#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &[f64],
    [b, cin, h, w]: [usize; 4],
    k: &[f64],
    [cout, _, kh, kw]: [usize; 4],
    stride: usize,
    dil: usize,
    replicate: bool,
) -> Vec<f64> {
    let ho = h.div_ceil(stride);
    let wo = w.div_ceil(stride);
    let ph = (dil * (kh - 1) / 2) as isize;
    let pw = (dil * (kw - 1) / 2) as isize;
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let mut y = (oy * stride + i * dil) as isize - ph;
                                let mut xx = (ox * stride + j * dil) as isize - pw;
                                if replicate {
                                    y = y.clamp(0, h as isize - 1);
                                    xx = xx.clamp(0, w as isize - 1);
                                } else if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += k[((co * cin + ci) * kh + i) * kw + j]
                                    * x[((bi * cin + ci) * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn naive_temporal(x: &[f64], [n, t, c, s]: [usize; 4], k: &[f64], kt: usize) -> Vec<f64> {
    let r = (kt / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                for q in 0..s {
                    let mut acc = 0.0;
                    for j in 0..kt {
                        let src = (ti as isize + j as isize - r).clamp(0, t as isize - 1) as usize;
                        acc += k[ci * kt + j] * x[((ni * t + src) * c + ci) * s + q];
                    }
                    out[((ni * t + ti) * c + ci) * s + q] = acc;
                }
            }
        }
    }
    out
}

fn conv_f32(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, dil: usize, pad: Padding) -> Vec<f32> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(xs.to_vec(), x.iter().map(|&v| v as f32).collect()).unwrap();
    let kv = tape.constant(ks.to_vec(), k.iter().map(|&v| v as f32).collect()).unwrap();
    let y = tape.conv2d(xv, kv, stride, dil, pad).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn conv2d_identity_kernel() {
    let x: Vec<f64> = (0..9).map(f64::from).collect();
    let out = conv_f32(&x, [1, 1, 3, 3], &[1.0], [1, 1, 1, 1], 1, 1, Padding::SameReplicate);
    assert_eq!(out, x.iter().map(|&v| v as f32).collect::<Vec<_>>());
}

#[test]
fn conv2d_constant_field_with_replicate_padding() {
    let x = vec![0.7; 2 * 5 * 5];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = rand_vec(&mut rng, 3 * 2 * 3 * 3);
    let out = conv_f32(&x, [1, 2, 5, 5], &k, [3, 2, 3, 3], 1, 1, Padding::SameReplicate);
    for co in 0..3 {
        let expect = 0.7 * k[co * 18..(co + 1) * 18].iter().sum::<f64>();
        for &v in &out[co * 25..(co + 1) * 25] {
            assert!((v as f64 - expect).abs() < 1e-5);
        }
    }
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_vec(&mut rng, 2 * 5 * 5);
    let k = rand_vec(&mut rng, 3 * 2 * 3 * 3);
    let out = conv_f32(&x, [1, 2, 5, 5], &k, [3, 2, 3, 3], 1, 1, Padding::SameReplicate);
    let want = naive_conv2d(&x, [1, 2, 5, 5], &k, [3, 2, 3, 3], 1, 1, true);
    let worst = out.iter().zip(&want).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max abs diff {worst}");
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(vec![1, 2, 3, 3], vec![0.0; 18]).unwrap();
    let k = tape.constant(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
    assert!(matches!(tape.conv2d(x, k, 1, 1, Padding::SameReplicate), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn conv2d_variants_match_oracle(
        b in 1usize..3, cin in 1usize..4, cout in 1usize..4, h in 3usize..8, w in 3usize..8,
        kh in prop::sample::select(vec![1usize, 3, 5]), kw in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, dil in 1usize..3, replicate in any::<bool>(), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, b * cin * h * w);
        let k = rand_vec(&mut rng, cout * cin * kh * kw);
        let pad = if replicate { Padding::SameReplicate } else { Padding::SameZero };
        let out = conv_f32(&x, [b, cin, h, w], &k, [cout, cin, kh, kw], stride, dil, pad);
        let want = naive_conv2d(&x, [b, cin, h, w], &k, [cout, cin, kh, kw], stride, dil, replicate);
        prop_assert_eq!(out.len(), want.len());
        for (a, e) in out.iter().zip(&want) {
            prop_assert!((*a as f64 - e).abs() < 1e-5);
        }
    }
}

fn temporal_f32(x: &[f64], dims: [usize; 5], k: &[f64], kt: usize) -> Vec<f32> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(dims.to_vec(), x.iter().map(|&v| v as f32).collect()).unwrap();
    let kv = tape.constant(vec![dims[2], kt], k.iter().map(|&v| v as f32).collect()).unwrap();
    let y = tape.conv1d_temporal(xv, kv).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn temporal_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_vec(&mut rng, 2 * 4 * 2 * 3 * 3);
    let k = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let out = temporal_f32(&x, [2, 4, 2, 3, 3], &k, 3);
    for (a, b) in out.iter().zip(&x) {
        assert_eq!(*a, *b as f32);
    }
}

#[test]
fn temporal_box_filter_keeps_linear_interior() {
    let (t, s) = (5, 4);
    let x: Vec<f64> = (0..t).flat_map(|ti| std::iter::repeat_n(ti as f64 * 0.5, s)).collect();
    let k = [1.0 / 3.0; 3];
    let out = temporal_f32(&x, [1, t, 1, 2, 2], &k, 3);
    for ti in 1..t - 1 {
        for q in 0..s {
            assert!((out[ti * s + q] as f64 - x[ti * s + q]).abs() < 1e-6);
        }
    }
}

#[test]
fn temporal_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [2, 5, 3, 2, 3];
    let x = rand_vec(&mut rng, dims.iter().product());
    let k = rand_vec(&mut rng, 3 * 5);
    let out = temporal_f32(&x, dims, &k, 5);
    let want = naive_temporal(&x, [2, 5, 3, 6], &k, 5);
    let worst = out.iter().zip(&want).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "max abs diff {worst}");
}

#[test]
fn temporal_kernel_longer_than_clip_is_rejected() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(vec![1, 2, 1, 1, 1], vec![0.0; 2]).unwrap();
    let k = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
    assert!(matches!(tape.conv1d_temporal(x, k), Err(Error::Config(_))));
}

fn sce_oracle(logits: &[f64], k: usize, targets: &[usize]) -> f64 {
    let n = targets.len();
    let mut total = 0.0;
    for r in 0..n {
        let row = &logits[r * k..(r + 1) * k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[targets[r]].exp() / z).ln();
    }
    total / n as f64
}

#[test]
fn softmax_ce_cases() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!((tape.item(loss) - std::f64::consts::LN_2).abs() < 1e-12);

    let l = tape.constant(vec![1, 3], vec![1e4, 0.0, 0.0]).unwrap();
    let loss = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(tape.item(loss).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..6 * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let targets: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
    let l = tape.constant(vec![6, 4], x.clone()).unwrap();
    let loss = tape.softmax_cross_entropy(l, &targets).unwrap();
    assert!((tape.item(loss) - sce_oracle(&x, 4, &targets)).abs() < 1e-10);

    assert!(matches!(tape.softmax_cross_entropy(l, &[0, 1, 2, 3, 4, 0]), Err(Error::Input(_))));
}

#[test]
fn sigmoid_ce_cases() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    let loss = tape.sigmoid_cross_entropy(l, &[1.0, 0.0, 0.0, 1.0]).unwrap();
    assert!((tape.item(loss) - std::f64::consts::LN_2).abs() < 1e-12);

    let l = tape.constant(vec![1, 1], vec![500.0]).unwrap();
    let loss = tape.sigmoid_cross_entropy(l, &[1.0]).unwrap();
    assert!(tape.item(loss).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..15).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let y: Vec<f64> = (0..15).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    let oracle: f64 = x
        .iter()
        .zip(&y)
        .map(|(&v, &t)| {
            let p = 1.0 / (1.0 + (-v).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 15.0;
    let l = tape.constant(vec![3, 5], x).unwrap();
    let loss = tape.sigmoid_cross_entropy(l, &y).unwrap();
    assert!((tape.item(loss) - oracle).abs() < 1e-10);

    let mut bad = y.clone();
    bad[0] = 0.5;
    assert!(matches!(tape.sigmoid_cross_entropy(l, &bad), Err(Error::Input(_))));
}

#[test]
fn pixelwise_ce_cases() {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap();
    let loss = tape.pixelwise_softmax_cross_entropy(l, &[0, 1, 1, 0], 255).unwrap();
    assert!((tape.item(loss.loss) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(!loss.all_ignored);

    // Correct class with a huge margin.
    let l = tape.constant(vec![1, 2, 1, 2], vec![1e4, -1e4, -1e4, 1e4]).unwrap();
    let loss = tape.pixelwise_softmax_cross_entropy(l, &[0, 1], 255).unwrap();
    assert!(tape.item(loss.loss).abs() < 1e-12);

    let all = tape.pixelwise_softmax_cross_entropy(l, &[255, 255], 255).unwrap();
    assert!(all.all_ignored);
    assert_eq!(tape.item(all.loss), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (f, k, hw) = (3, 4, 6);
    let x: Vec<f64> = (0..f * k * hw).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels: Vec<i32> = (0..f * hw)
        .map(|i| if i % 5 == 0 { 255 } else { rng.gen_range(0..k as i32) })
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for fi in 0..f {
        for q in 0..hw {
            let lab = labels[fi * hw + q];
            if lab == 255 {
                continue;
            }
            let row: Vec<f64> = (0..k).map(|c| x[(fi * k + c) * hw + q]).collect();
            total += sce_oracle(&row, k, &[lab as usize]);
            count += 1;
        }
    }
    let l = tape.constant(vec![f, k, 2, 3], x).unwrap();
    let loss = tape.pixelwise_softmax_cross_entropy(l, &labels, 255).unwrap();
    assert!((tape.item(loss.loss) - total / count as f64).abs() < 1e-10);
}

#[test]
fn stop_gradient_and_sigmoid_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let s = tape.stop_gradient(x);
    assert_eq!(tape.value(s), tape.value(x));
    let total = tape.sum(s);
    let zero = tape_zero(&mut tape);
    let y = tape.add(total, zero).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);

    let mut tape = Tape::<f32>::new();
    let z = tape.constant(vec![1], vec![0.0]).unwrap();
    let s = tape.sigmoid(z);
    assert_eq!(tape.item(s), 0.5);
}

fn tape_zero(tape: &mut Tape<f64>) -> Var {
    tape.param(vec![1], vec![0.0]).unwrap()
}

#[test]
fn backward_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(vec![2, 2], vec![0.3, -1.0, 4.0, 2.0]).unwrap();
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

    let mut tape = Tape::<f64>::new();
    let x = tape.param(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
}

#[test]
fn gradients_of_two_consumers_add_up() {
    let x0 = vec![0.4, -0.3, 1.2];
    let grad_of = |which: u8| {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(vec![3], x0.clone()).unwrap();
        let f = tape.sigmoid(x);
        let g = tape.square(x);
        let root = match which {
            0 => tape.sum(f),
            1 => tape.sum(g),
            _ => {
                let y = tape.add(f, g).unwrap();
                tape.sum(y)
            }
        };
        tape.backward(root).unwrap();
        tape.grad(x).unwrap().to_vec()
    };
    let (gf, gg, gy) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..3 {
        assert_eq!(gy[i], gf[i] + gg[i]);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x: Vec<f32> = (0..40).map(|_| rng.gen_range(-20.0..20.0)).collect();
    for row in softmax(&x, 8).chunks(8) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn every_primitive_passes_finite_differences() {
    let cfg = GradCheckConfig::default();
    for case in gradcheck::primitive_cases(21) {
        let report = gradcheck::run_case(&case, &cfg).unwrap();
        assert!(report.checked > 0, "{} checked nothing", report.name);
        assert!(report.passed(), "{}: max rel err {:e}", report.name, report.max_rel_error);
    }
}

#[test]
fn broken_backward_is_detected() {
    let x = gradcheck::random_tensor(&mut ChaCha8Rng::seed_from_u64(1), vec![4], -1.0, 1.0);
    let case = gradcheck::GradCheckCase {
        name: "broken_square".into(),
        inputs: vec![x],
        build: Box::new(|t, v| {
            let xs = t.value(v[0]).to_vec();
            let y: Vec<f64> = xs.iter().map(|a| a * a).collect();
            // Reports d(x^2)/dx = x instead of 2x.
            let sq = t.custom(
                &[v[0]],
                vec![4],
                y,
                Box::new(|ins, _out, g| vec![Some(ins[0].iter().zip(g).map(|(a, b)| a * b).collect())]),
            )?;
            Ok(t.sum(sq))
        }),
        sample: None,
    };
    let report = gradcheck::run_case(&case, &GradCheckConfig::default()).unwrap();
    assert!(!report.passed());
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = Tensor::new(vec![2, 3, 6, 6], (0..216).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap()
            .with_grad();
        let k = Tensor::new(vec![4, 3, 3, 3], (0..108).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .unwrap()
            .with_grad();
        let mut tape = Tape::<f32>::new();
        let (xv, kv) = (tape.leaf(x), tape.leaf(k));
        let y = tape.conv2d(xv, kv, 1, 1, Padding::SameReplicate).unwrap();
        let y = tape.relu(y);
        let p = tape.max_pool2d(y).unwrap();
        let gap = tape.global_average_pool(p).unwrap();
        let loss = tape.softmax_cross_entropy(gap, &[1, 3]).unwrap();
        tape.backward(loss).unwrap();
        (tape.item(loss).to_bits(), tape.grad(kv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
