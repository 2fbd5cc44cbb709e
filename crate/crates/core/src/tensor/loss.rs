//! Cross-entropy losses, fused so the backward pass reuses saved softmax
//! probabilities.

use super::tape::Op;
use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Result of a pixelwise loss. `all_ignored` is set when every pixel carried
/// the ignore label; the loss is then exactly zero.
#[derive(Debug, Clone, Copy)]
pub struct PixelLoss {
    pub loss: Var,
    pub all_ignored: bool,
}

/// Stable softmax of one row into `out`; returns log-sum-exp.
fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
    max + sum.ln()
}

impl<T: Scalar> Tape<T> {
    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape[..] else {
            return Err(Error::config(format!("softmax_cross_entropy expects [N, K] logits, got {shape:?}")));
        };
        if targets.len() != n {
            return Err(Error::input(format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::input(format!("target {bad} out of range for {k} classes")));
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for r in 0..n {
            let lse = softmax_row(&x[r * k..(r + 1) * k], &mut probs[r * k..(r + 1) * k]);
            total += lse - x[r * k + targets[r]];
        }
        let loss = total / T::of(n as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean over all `N*K` entries of binary cross-entropy on `sigmoid(logit)`.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::config(format!("sigmoid_cross_entropy expects [N, K] logits, got {shape:?}")));
        }
        let x = self.value(logits);
        if targets.len() != x.len() {
            return Err(Error::input(format!("{} targets for {} logits", targets.len(), x.len())));
        }
        if targets.iter().any(|&t| t != T::zero() && t != T::one()) {
            return Err(Error::input("sigmoid_cross_entropy targets must be 0 or 1"));
        }
        let total: T = x
            .iter()
            .zip(targets)
            .map(|(&v, &y)| v.max(T::zero()) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::of(x.len() as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SigmoidCe {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean softmax cross-entropy over every non-ignored pixel of
    /// `[F, K, h, w]` logits against `[F, h, w]` labels.
    pub fn pixelwise_softmax_cross_entropy(&mut self, logits: Var, labels: &[i32], ignore_label: i32) -> Result<PixelLoss> {
        let shape = self.shape(logits).to_vec();
        let [f, k, h, w] = shape[..] else {
            return Err(Error::config(format!("pixelwise loss expects [F, K, h, w] logits, got {shape:?}")));
        };
        let hw = h * w;
        if labels.len() != f * hw {
            return Err(Error::input(format!(
                "{} labels for logits of shape {shape:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore_label && (l < 0 || l as usize >= k)) {
            return Err(Error::input(format!("segmentation label {bad} out of range for {k} classes")));
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        let mut row = vec![T::zero(); k];
        let mut p = vec![T::zero(); k];
        for fi in 0..f {
            for q in 0..hw {
                let label = labels[fi * hw + q];
                if label == ignore_label {
                    continue;
                }
                for c in 0..k {
                    row[c] = x[(fi * k + c) * hw + q];
                }
                let lse = softmax_row(&row, &mut p);
                for c in 0..k {
                    probs[(fi * k + c) * hw + q] = p[c];
                }
                total += lse - row[label as usize];
                count += 1;
            }
        }
        let all_ignored = count == 0;
        if all_ignored {
            log::warn!("pixelwise loss: every pixel carries the ignore label; loss is zero");
        }
        let loss = if all_ignored {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let var = self.push(
            vec![1],
            vec![loss],
            Op::PixelCe {
                logits,
                probs,
                labels: labels.iter().map(|&l| if l == ignore_label { -1 } else { l }).collect(),
                dims: [f, k, hw],
                count,
            },
            &[logits],
        );
        Ok(PixelLoss { loss: var, all_ignored })
    }
}

pub(crate) fn softmax_ce_backward<T: Scalar>(probs: &[T], targets: &[usize], g: T, gl: &mut [T]) {
    let n = targets.len();
    let k = probs.len() / n;
    let s = g / T::of(n as f64);
    for r in 0..n {
        for c in 0..k {
            let y = if c == targets[r] { T::one() } else { T::zero() };
            gl[r * k + c] += s * (probs[r * k + c] - y);
        }
    }
}

pub(crate) fn sigmoid_ce_backward<T: Scalar>(logits: &[T], targets: &[T], g: T, gl: &mut [T]) {
    let s = g / T::of(logits.len() as f64);
    for ((d, &v), &y) in gl.iter_mut().zip(logits).zip(targets) {
        let sig = T::one() / (T::one() + (-v).exp());
        *d += s * (sig - y);
    }
}

pub(crate) fn pixel_ce_backward<T: Scalar>(
    probs: &[T],
    labels: &[i32],
    dims: [usize; 3],
    count: usize,
    g: T,
    gl: &mut [T],
) {
    if count == 0 {
        return;
    }
    let [f, k, hw] = dims;
    let s = g / T::of(count as f64);
    for fi in 0..f {
        for q in 0..hw {
            let label = labels[fi * hw + q];
            if label < 0 || label as usize >= k {
                continue;
            }
            for c in 0..k {
                let idx = (fi * k + c) * hw + q;
                let y = if c == label as usize { T::one() } else { T::zero() };
                gl[idx] += s * (probs[idx] - y);
            }
        }
    }
}

/// Row-wise softmax of a `[N, K]` buffer.
pub fn softmax<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks(k).zip(out.chunks_mut(k)) {
        softmax_row(row, o);
    }
    out
}
