use super::conv::{self, ConvGeom, Padding};
use super::tape::Op;
use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::config(format!("{op}: shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    fn scalar_operand(&self, s: Var, op: &str) -> Result<T> {
        if self.tensor(s).numel() != 1 {
            return Err(Error::config(format!(
                "{op}: expected a one-element tensor, got shape {:?}",
                self.shape(s)
            )));
        }
        Ok(self.item(s))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let shape = self.same_shape(a, b, name)?;
        let values = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(shape, values, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let shape = self.shape(a).to_vec();
        let values = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(shape, values, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    /// Tensor times a one-element tensor (the only broadcast the tape allows).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand(s, "mul_scalar")?;
        let shape = self.shape(a).to_vec();
        let values = self.value(a).iter().map(|&x| x * sv).collect();
        Ok(self.push(shape, values, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamps into `[-bound, bound]` where `bound` is a one-element tensor.
    pub fn clamp_sym(&mut self, a: Var, bound: Var) -> Result<Var> {
        let b = self.scalar_operand(bound, "clamp_sym")?;
        let shape = self.shape(a).to_vec();
        let values = self.value(a).iter().map(|&x| x.max(-b).min(b)).collect();
        Ok(self.push(shape, values, Op::ClampSym(a, bound), &[a, bound]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean_reduce(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Identity in the forward pass; the result is a fresh leaf that does
    /// not require grad, so nothing flows back into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            values: self.value(a).to_vec(),
            requires_grad: false,
            grad: None,
        };
        self.leaf(t)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.tensor(a).numel() {
            return Err(Error::config(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let values = self.value(a).to_vec();
        Ok(self.push(shape, values, Op::Reshape(a), &[a]))
    }

    /// `out[i] = a[src[i]]` with the given output shape.
    pub fn gather(&mut self, a: Var, src: Vec<u32>, shape: Vec<usize>) -> Result<Var> {
        let n = self.tensor(a).numel();
        if shape.iter().product::<usize>() != src.len() || src.iter().any(|&i| i as usize >= n) {
            return Err(Error::config("gather: indices do not match output shape or input size"));
        }
        let x = self.value(a);
        let values = src.iter().map(|&i| x[i as usize]).collect();
        Ok(self.push(shape, values, Op::Gather(a, src), &[a]))
    }

    /// Selects frames along axis 1 of `[N, T, ...]`.
    pub fn index_frames(&mut self, a: Var, frames: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::config(format!("index_frames needs rank >= 2, got {shape:?}")));
        }
        let (n, t) = (shape[0], shape[1]);
        if let Some(&bad) = frames.iter().find(|&&f| f >= t) {
            return Err(Error::config(format!("frame {bad} out of range for {t} frames")));
        }
        let inner: usize = shape[2..].iter().product();
        let mut src = Vec::with_capacity(n * frames.len() * inner);
        for ni in 0..n {
            for &f in frames {
                let base = (ni * t + f) * inner;
                src.extend((base..base + inner).map(|i| i as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[1] = frames.len();
        self.gather(a, src, out_shape)
    }

    /// Unweighted mean over axis 1 of `[B, C, ...]`, keeping a unit channel axis.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::config(format!("channel_mean needs rank >= 2, got {shape:?}")));
        }
        let (outer, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let x = self.value(a);
        let w = T::one() / T::of(c as f64);
        let mut values = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for ch in 0..c {
                let src = &x[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                for (d, &v) in values[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        for v in &mut values {
            *v *= w;
        }
        let mut out_shape = shape;
        out_shape[1] = 1;
        Ok(self.push(out_shape, values, Op::ChannelMean { x: a, outer, c, inner }, &[a]))
    }

    /// 2D convolution of `[B, C_in, H, W]` with `[C_out, C_in, kH, kW]`
    /// ("same" output size for stride 1, `ceil(H / stride)` otherwise).
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, dilation: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (&[b, cin, h, w], &[cout, kcin, kh, kw]) = (&xs[..], &ks[..]) else {
            return Err(Error::config(format!("conv2d expects rank-4 input and kernel, got {xs:?} and {ks:?}")));
        };
        if cin != kcin {
            return Err(Error::config(format!("conv2d: input has {cin} channels, kernel expects {kcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!("conv2d: kernel {kh}x{kw} must have odd sizes")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::config("conv2d: stride and dilation must be positive"));
        }
        let geom = ConvGeom {
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            dilation,
            padding,
        };
        let values = conv::conv2d_forward(self.value(x), self.value(k), &geom);
        let (ho, wo) = geom.out_hw();
        Ok(self.push(vec![b, cout, ho, wo], values, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// Depthwise convolution along T of `[N, T, C, H, W]` with a `[C, kT]`
    /// kernel and replicate padding.
    pub fn conv1d_temporal(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (&[n, t, c, h, w], &[kc, kt]) = (&xs[..], &ks[..]) else {
            return Err(Error::config(format!(
                "conv1d_temporal expects [N,T,C,H,W] input and [C,kT] kernel, got {xs:?} and {ks:?}"
            )));
        };
        if kc != c {
            return Err(Error::config(format!("conv1d_temporal: {c} channels but kernel has {kc}")));
        }
        if kt % 2 == 0 {
            return Err(Error::config(format!("conv1d_temporal: kernel length {kt} must be odd")));
        }
        if kt > t {
            return Err(Error::config(format!("conv1d_temporal: kernel length {kt} exceeds {t} frames")));
        }
        let dims = [n, t, c, h * w];
        let values = conv::temporal_forward(self.value(x), self.value(k), dims, kt);
        Ok(self.push(xs, values, Op::TemporalConv { x, k, dims, kt }, &[x, k]))
    }

    /// Adds a per-channel bias to `[B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.get(1).ok_or_else(|| Error::config("add_channel_bias needs rank >= 2"))?;
        if self.shape(b) != [c] {
            return Err(Error::config(format!("bias shape {:?} does not match {c} channels", self.shape(b))));
        }
        let inner: usize = shape[2..].iter().product();
        let bias = self.value(b);
        let values = self
            .value(x)
            .chunks(inner)
            .enumerate()
            .flat_map(|(j, chunk)| {
                let bj = bias[j % c];
                chunk.iter().map(move |&v| v + bj)
            })
            .collect();
        Ok(self.push(shape, values, Op::AddChannelBias { x, b, c, inner }, &[x, b]))
    }

    /// 2x2 max pooling with stride 2 on the last two axes (odd edges are dropped).
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::config(format!("max_pool2d needs rank >= 3, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h < 2 || w < 2 {
            return Err(Error::config(format!("max_pool2d: spatial size {h}x{w} too small")));
        }
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut src = Vec::with_capacity(outer * ho * wo);
        for o in 0..outer {
            let base = o * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    src.push(best as u32);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = ho;
        out_shape[r - 1] = wo;
        self.gather(x, src, out_shape)
    }

    /// Max over consecutive frame pairs of `[N, T, ...]`, T -> T/2.
    pub fn temporal_max_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[1] < 2 {
            return Err(Error::config(format!("temporal_max_pool needs at least 2 frames, got {shape:?}")));
        }
        let (n, t) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let to = t / 2;
        let xv = self.value(x);
        let mut src = Vec::with_capacity(n * to * inner);
        for ni in 0..n {
            for ti in 0..to {
                let a = (ni * t + 2 * ti) * inner;
                let b = a + inner;
                for q in 0..inner {
                    src.push(if xv[b + q] > xv[a + q] { b + q } else { a + q } as u32);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[1] = to;
        self.gather(x, src, out_shape)
    }

    /// Mean over T, H, W of `[N, T, C, H, W]` (or over H, W of `[B, C, H, W]`), giving `[N, C]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let dims = self.ntcs(x, "global_average_pool")?;
        let [n, t, c, s] = dims;
        let xv = self.value(x);
        let w = T::one() / T::of((t * s) as f64);
        let mut values = vec![T::zero(); n * c];
        for ni in 0..n {
            for ti in 0..t {
                for ci in 0..c {
                    let base = ((ni * t + ti) * c + ci) * s;
                    values[ni * c + ci] += xv[base..base + s].iter().copied().sum::<T>();
                }
            }
        }
        for v in &mut values {
            *v *= w;
        }
        Ok(self.push(vec![n, c], values, Op::GlobalAvgPool { x, dims }, &[x]))
    }

    /// Multiplies every channel map of `x` by the matching entry of `gate` (`[N, C]`).
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let dims = self.ntcs(x, "scale_channels")?;
        let [n, t, c, s] = dims;
        if self.shape(gate) != [n, c] {
            return Err(Error::config(format!(
                "scale_channels: gate shape {:?}, expected [{n}, {c}]",
                self.shape(gate)
            )));
        }
        let (xv, gv) = (self.value(x), self.value(gate));
        let mut values = xv.to_vec();
        for ni in 0..n {
            for ti in 0..t {
                for ci in 0..c {
                    let m = gv[ni * c + ci];
                    let base = ((ni * t + ti) * c + ci) * s;
                    for v in &mut values[base..base + s] {
                        *v *= m;
                    }
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, values, Op::ScaleChannels { x, g: gate, dims }, &[x, gate]))
    }

    fn ntcs(&self, x: Var, op: &str) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [n, t, c, h, w] => Ok([n, t, c, h * w]),
            [b, c, h, w] => Ok([b, 1, c, h * w]),
            ref s => Err(Error::config(format!("{op} expects rank 4 or 5, got {s:?}"))),
        }
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[m, k], &[k2, n]) = (&sa[..], &sb[..]) else {
            return Err(Error::config(format!("matmul expects rank-2 operands, got {sa:?} and {sb:?}")));
        };
        if k != k2 {
            return Err(Error::config(format!("matmul: inner dimensions {k} and {k2} differ")));
        }
        let mut values = vec![T::zero(); m * n];
        super::matmul_into(m, k, n, self.value(a), false, self.value(b), false, &mut values, false);
        Ok(self.push(vec![m, n], values, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Adds a `[N]` bias to every row of `[M, N]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [_, n] = shape[..] else {
            return Err(Error::config(format!("add_row_bias expects [M, N], got {shape:?}")));
        };
        if self.shape(b) != [n] {
            return Err(Error::config(format!("row bias shape {:?}, expected [{n}]", self.shape(b))));
        }
        let bv = self.value(b);
        let values = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &c)| v + c))
            .collect();
        Ok(self.push(shape, values, Op::AddRowBias { x, b, n }, &[x, b]))
    }

    /// `x W + b` for `x: [M, D]`, `W: [D, K]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row_bias(y, bias)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::config(format!("concat axis {axis} out of range for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::config(format!("concat: shape {s:?} incompatible with {first:?}")));
            }
            out_shape[axis] += s[axis];
            sizes.push(s[axis..].iter().product::<usize>());
        }
        let total: usize = sizes.iter().sum();
        let mut values = vec![T::zero(); outer * total];
        let mut offset = 0;
        for (&p, &sz) in parts.iter().zip(&sizes) {
            let v = self.value(p);
            for o in 0..outer {
                values[o * total + offset..o * total + offset + sz].copy_from_slice(&v[o * sz..(o + 1) * sz]);
            }
            offset += sz;
        }
        Ok(self.push(
            out_shape,
            values,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                sizes,
            },
            parts,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let axis = match self.shape(parts[0]).len() {
            5 => 2,
            _ => 1,
        };
        self.concat(parts, axis)
    }

    /// Elementwise arithmetic mean of equally shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::config("mean of zero tensors"))?;
        if rest.is_empty() {
            return Ok(first);
        }
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, T::one() / T::of(parts.len() as f64)))
    }
}
