use std::fmt;

use super::conv::{self, ConvGeom};
use super::loss;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-defined primitive: receives the input
/// values, the output value and the output gradient, and returns one optional
/// gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send>;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    ClampSym(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    /// `out[i] = x[src[i]]`; covers pooling, frame selection and kernel flips.
    Gather(Var, Vec<u32>),
    ChannelMean {
        x: Var,
        outer: usize,
        c: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    TemporalConv {
        x: Var,
        k: Var,
        dims: [usize; 4],
        kt: usize,
    },
    AddChannelBias {
        x: Var,
        b: Var,
        c: usize,
        inner: usize,
    },
    GlobalAvgPool {
        x: Var,
        dims: [usize; 4],
    },
    ScaleChannels {
        x: Var,
        g: Var,
        dims: [usize; 4],
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRowBias {
        x: Var,
        b: Var,
        n: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    SigmoidCe {
        logits: Var,
        targets: Vec<T>,
    },
    PixelCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<i32>,
        dims: [usize; 3],
        count: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) tensor: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Ordered record of executed primitives. One tape per training step.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an existing tensor as a leaf. Its `requires_grad` flag decides
    /// whether backward fills in a gradient for it.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn param(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?.with_grad()))
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].tensor.values()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].tensor.requires_grad);
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                values,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a primitive with a caller-supplied vector-Jacobian product.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        values: Vec<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        let out = Tensor::new(shape, values)?;
        let (shape, values) = (out.shape().to_vec(), out.into_values());
        Ok(self.push(
            shape,
            values,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        ))
    }

    /// Back-propagates from a scalar root. Every node flagged
    /// `requires_grad` ends up with a populated gradient (zeros when
    /// unreachable); gradients from multiple consumers are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].tensor.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].tensor.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].tensor.requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.tensor.requires_grad {
                node.tensor.grad = Some(g.unwrap_or_else(|| vec![T::zero(); node.tensor.numel()]));
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.tensor.values();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let t = &self.nodes[v.0].tensor;
            if !t.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); t.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = self.val(*b);
                acc(*a, &mut |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s / y;
                    }
                });
                acc(*b, &mut |gb| {
                    for (((d, &s), &y), &q) in gb.iter_mut().zip(g).zip(vb).zip(out) {
                        *d -= s * q / y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d += s * *c;
                }
            }),
            Op::AddConst(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulScalar(a, s) => {
                let (va, vs) = (self.val(*a), self.val(*s)[0]);
                acc(*a, &mut |ga| {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * vs;
                    }
                });
                acc(*s, &mut |gs| {
                    gs[0] += g.iter().zip(va).map(|(&x, &y)| x * y).sum::<T>();
                });
            }
            Op::Relu(a) => acc(*a, &mut |ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                    if y > T::zero() {
                        *d += s;
                    }
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += s * y * (T::one() - y);
                }
            }),
            Op::Sqrt(a) => acc(*a, &mut |ga| {
                let half = T::of(0.5);
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += s * half / y;
                }
            }),
            Op::Square(a) => {
                let va = self.val(*a);
                acc(*a, &mut |ga| {
                    let two = T::of(2.0);
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                        *d += s * two * x;
                    }
                })
            }
            Op::ClampSym(a, bound) => {
                let (va, b) = (self.val(*a), self.val(*bound)[0]);
                acc(*a, &mut |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x > -b && x < b {
                            *d += s;
                        }
                    }
                });
                acc(*bound, &mut |gb| {
                    let mut total = T::zero();
                    for (&s, &x) in g.iter().zip(va) {
                        if x >= b {
                            total += s;
                        } else if x <= -b {
                            total -= s;
                        }
                    }
                    gb[0] += total;
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |ga| {
                let s = g[0] / T::of(ga.len() as f64);
                for d in ga.iter_mut() {
                    *d += s;
                }
            }),
            Op::Gather(a, src) => acc(*a, &mut |ga| {
                for (&j, &s) in src.iter().zip(g) {
                    ga[j as usize] += s;
                }
            }),
            Op::ChannelMean { x, outer, c, inner } => acc(*x, &mut |gx| {
                let w = T::one() / T::of(*c as f64);
                for o in 0..*outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for ch in 0..*c {
                        let base = (o * c + ch) * inner;
                        for (d, &s) in gx[base..base + inner].iter_mut().zip(gs) {
                            *d += s * w;
                        }
                    }
                }
            }),
            Op::Conv2d { x, k, geom } => {
                let (vx, vk) = (self.val(*x), self.val(*k));
                let need_x = self.nodes[x.0].tensor.requires_grad;
                let need_k = self.nodes[k.0].tensor.requires_grad;
                let (gx, gk) = conv::conv2d_backward(vx, vk, g, geom, need_x, need_k);
                if let Some(gx) = gx {
                    acc(*x, &mut |d| add_into(d, &gx));
                }
                if let Some(gk) = gk {
                    acc(*k, &mut |d| add_into(d, &gk));
                }
            }
            Op::TemporalConv { x, k, dims, kt } => {
                let (vx, vk) = (self.val(*x), self.val(*k));
                acc(*x, &mut |gx| conv::temporal_backward_input(vk, g, *dims, *kt, gx));
                acc(*k, &mut |gk| conv::temporal_backward_kernel(vx, g, *dims, *kt, gk));
            }
            Op::AddChannelBias { x, b, c, inner } => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for (j, chunk) in g.chunks(*inner).enumerate() {
                        gb[j % c] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::GlobalAvgPool { x, dims } => acc(*x, &mut |gx| {
                let [n, t, c, s] = *dims;
                let w = T::one() / T::of((t * s) as f64);
                for ni in 0..n {
                    for ti in 0..t {
                        for ci in 0..c {
                            let gv = g[ni * c + ci] * w;
                            let base = ((ni * t + ti) * c + ci) * s;
                            for d in &mut gx[base..base + s] {
                                *d += gv;
                            }
                        }
                    }
                }
            }),
            Op::ScaleChannels { x, g: gate, dims } => {
                let [n, t, c, s] = *dims;
                let (vx, vg) = (self.val(*x), self.val(*gate));
                acc(*x, &mut |gx| {
                    for ni in 0..n {
                        for ti in 0..t {
                            for ci in 0..c {
                                let m = vg[ni * c + ci];
                                let base = ((ni * t + ti) * c + ci) * s;
                                for (d, &u) in gx[base..base + s].iter_mut().zip(&g[base..base + s]) {
                                    *d += u * m;
                                }
                            }
                        }
                    }
                });
                acc(*gate, &mut |gg| {
                    for ni in 0..n {
                        for ti in 0..t {
                            for ci in 0..c {
                                let base = ((ni * t + ti) * c + ci) * s;
                                gg[ni * c + ci] += g[base..base + s]
                                    .iter()
                                    .zip(&vx[base..base + s])
                                    .map(|(&u, &v)| u * v)
                                    .sum::<T>();
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| super::matmul_into(*m, *n, *k, g, false, vb, true, ga, true));
                acc(*b, &mut |gb| super::matmul_into(*k, *m, *n, va, true, g, false, gb, true));
            }
            Op::AddRowBias { x, b, n } => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(*n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Concat { parts, outer, sizes } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (p, &sz) in parts.iter().zip(sizes) {
                    acc(*p, &mut |gp| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + sz];
                            add_into(&mut gp[o * sz..(o + 1) * sz], src);
                        }
                    });
                    offset += sz;
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            } => acc(*logits, &mut |gl| loss::softmax_ce_backward(probs, targets, g[0], gl)),
            Op::SigmoidCe { logits, targets } => {
                let vl = self.val(*logits);
                acc(*logits, &mut |gl| loss::sigmoid_ce_backward(vl, targets, g[0], gl))
            }
            Op::PixelCe {
                logits,
                probs,
                labels,
                dims,
                count,
            } => acc(*logits, &mut |gl| {
                loss::pixel_ce_backward(probs, labels, *dims, *count, g[0], gl)
            }),
            Op::Custom { inputs, backward } => {
                let ins: Vec<&[T]> = inputs.iter().map(|v| self.val(*v)).collect();
                let gs = backward(&ins, out, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        acc(*v, &mut |d| add_into(d, &gi));
                    }
                }
            }
        }
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
