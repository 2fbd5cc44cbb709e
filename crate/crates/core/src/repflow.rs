//! Differentiable TV-L1 optical flow ("representation flow").
//!
//! The primal-dual iterations are composed from tape primitives only, so the
//! flow hyperparameters and the finite-difference kernels receive gradients
//! from whatever loss consumes the flow field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

/// Intensities in `[0, 1]` are rescaled to `[0, 255]` before the variational
/// iterations; the default θ/λ/τ values are calibrated for that range.
pub const INTENSITY_SCALE: f64 = 255.0;

/// Added to `|∇I|²` in the threshold denominator.
pub const GRAD_EPS: f64 = 1e-8;

/// Added under the square root of `|∇u|²` so its derivative stays finite at zero.
const NORM_EPS: f64 = 1e-12;

/// Stability bound on the dual step.
pub const MAX_TAU: f64 = 0.25;

/// Which flow hyperparameters are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowLearnable {
    pub theta: bool,
    pub lambda_data: bool,
    pub tau: bool,
    pub kernels: bool,
}

impl Default for FlowLearnable {
    fn default() -> Self {
        FlowLearnable {
            theta: true,
            lambda_data: true,
            tau: true,
            kernels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Coupling between the data and smoothness sub-problems.
    pub theta: f64,
    /// Data-term weight.
    pub lambda_data: f64,
    /// Dual ascent step.
    pub tau: f64,
    pub n_iterations: usize,
    pub grad_kernel_x: [f64; 3],
    pub grad_kernel_y: [f64; 3],
    pub learnable: FlowLearnable,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            theta: 0.3,
            lambda_data: 0.15,
            tau: 0.25,
            n_iterations: 10,
            grad_kernel_x: [-0.5, 0.0, 0.5],
            grad_kernel_y: [-0.5, 0.0, 0.5],
            learnable: FlowLearnable::default(),
        }
    }
}

pub const THETA: &str = "flow.theta";
pub const LAMBDA: &str = "flow.lambda_data";
pub const TAU: &str = "flow.tau";
pub const KERNEL_X: &str = "flow.kernel_x";
pub const KERNEL_Y: &str = "flow.kernel_y";
pub const PARAM_NAMES: [&str; 5] = [THETA, LAMBDA, TAU, KERNEL_X, KERNEL_Y];

/// Lower bound kept on θ, λ and τ after each optimizer step.
pub const MIN_POSITIVE: f64 = 1e-3;

impl FlowParams {
    pub fn with_iterations(mut self, n: usize) -> Self {
        self.n_iterations = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta", self.theta), ("lambda_data", self.lambda_data), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("flow {name} must be positive, got {v}")));
            }
        }
        if self.tau > MAX_TAU {
            return Err(Error::config(format!(
                "flow tau {} exceeds the primal-dual stability bound {MAX_TAU}",
                self.tau
            )));
        }
        if self.n_iterations == 0 {
            return Err(Error::config("flow n_iterations must be at least 1"));
        }
        Ok(())
    }

    /// Adds the flow parameters to `store` under the `flow.*` names.
    pub fn register<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.validate()?;
        let l = self.learnable;
        let mut put = |name: &str, shape: Vec<usize>, v: &[f64], learn: bool| -> Result<()> {
            let mut t = Tensor::from_f64(shape, v)?;
            t.requires_grad = learn;
            store.insert(name, t);
            Ok(())
        };
        put(THETA, vec![1], &[self.theta], l.theta)?;
        put(LAMBDA, vec![1], &[self.lambda_data], l.lambda_data)?;
        put(TAU, vec![1], &[self.tau], l.tau)?;
        put(KERNEL_X, vec![3], &self.grad_kernel_x, l.kernels)?;
        put(KERNEL_Y, vec![3], &self.grad_kernel_y, l.kernels)?;
        Ok(())
    }

    /// Reads learned values back out of a store (iterations and flags are kept).
    pub fn from_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<FlowParams> {
        let get = |name: &str| -> Result<Vec<f64>> {
            store
                .get(name)
                .map(|t| t.values().iter().map(|v| v.as_f64()).collect())
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))
        };
        let kx = get(KERNEL_X)?;
        let ky = get(KERNEL_Y)?;
        Ok(FlowParams {
            theta: get(THETA)?[0],
            lambda_data: get(LAMBDA)?[0],
            tau: get(TAU)?[0],
            grad_kernel_x: [kx[0], kx[1], kx[2]],
            grad_kernel_y: [ky[0], ky[1], ky[2]],
            ..self.clone()
        })
    }
}

/// Keeps θ, λ and τ positive, and τ within the stability bound, after an
/// optimizer step.
pub fn project_params<T: Scalar>(store: &mut ParamStore<T>) {
    for (name, hi) in [(THETA, f64::INFINITY), (LAMBDA, f64::INFINITY), (TAU, MAX_TAU)] {
        if let Some(t) = store.get_mut(name) {
            for v in t.values_mut() {
                if !(v.as_f64() >= MIN_POSITIVE) {
                    *v = T::of(MIN_POSITIVE);
                } else if v.as_f64() > hi {
                    *v = T::of(hi);
                }
            }
        }
    }
}

/// Tape handles of the flow parameters for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FlowVars {
    pub theta: Var,
    pub lambda_data: Var,
    pub tau: Var,
    pub kernel_x: Var,
    pub kernel_y: Var,
    pub n_iterations: usize,
}

impl FlowVars {
    pub fn from_bound(bound: &Bound, n_iterations: usize) -> Result<Self> {
        Ok(FlowVars {
            theta: bound.get(THETA)?,
            lambda_data: bound.get(LAMBDA)?,
            tau: bound.get(TAU)?,
            kernel_x: bound.get(KERNEL_X)?,
            kernel_y: bound.get(KERNEL_Y)?,
            n_iterations,
        })
    }

    /// Records fixed or learnable parameter values directly on a tape.
    pub fn record<T: Scalar>(tape: &mut Tape<T>, p: &FlowParams) -> Result<Self> {
        let mut store = ParamStore::new();
        p.register(&mut store)?;
        let bound = store.bind(tape);
        Self::from_bound(&bound, p.n_iterations)
    }
}

/// Output of [`compute_flow`]: `[.., 2, H, W]` with channels (horizontal, vertical) in pixels.
#[derive(Debug, Clone, Copy)]
pub struct FlowField {
    pub u: Var,
}

/// `(∂x, ∂y)` of `[F, 1, H, W]` by correlating with a 1x3 kernel along each axis.
pub fn spatial_gradient<T: Scalar>(tape: &mut Tape<T>, image: Var, kx: Var, ky: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::config(format!("spatial_gradient expects [F, 1, H, W], got {shape:?}")));
    }
    let kx4 = tape.reshape(kx, vec![1, 1, 1, 3])?;
    let ky4 = tape.reshape(ky, vec![1, 1, 3, 1])?;
    let dx = tape.conv2d(image, kx4, 1, 1, Padding::SameReplicate)?;
    let dy = tape.conv2d(image, ky4, 1, 1, Padding::SameReplicate)?;
    Ok((dx, dy))
}

/// Negated adjoint of [`spatial_gradient`]: `div p = -(Kxᵀ p₁ + Kyᵀ p₂)`,
/// realized as correlation with the flipped, negated kernels.
pub fn divergence_parts<T: Scalar>(tape: &mut Tape<T>, px: Var, py: Var, kx: Var, ky: Var) -> Result<Var> {
    let adjoint = |tape: &mut Tape<T>, k: Var, shape: Vec<usize>| -> Result<Var> {
        let flipped = tape.gather(k, vec![2, 1, 0], shape)?;
        Ok(tape.scale(flipped, -T::one()))
    };
    let kx4 = adjoint(tape, kx, vec![1, 1, 1, 3])?;
    let ky4 = adjoint(tape, ky, vec![1, 1, 3, 1])?;
    let a = tape.conv2d(px, kx4, 1, 1, Padding::SameReplicate)?;
    let b = tape.conv2d(py, ky4, 1, 1, Padding::SameReplicate)?;
    tape.add(a, b)
}

/// Divergence of a `[F, 2, H, W]` vector field.
pub fn divergence<T: Scalar>(tape: &mut Tape<T>, p: Var, kx: Var, ky: Var) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::config(format!("divergence expects [F, 2, H, W], got {shape:?}")));
    }
    let px = tape.index_frames(p, &[0])?;
    let py = tape.index_frames(p, &[1])?;
    divergence_parts(tape, px, py, kx, ky)
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, iteration: usize) -> Result<()> {
    if let Some(pos) = tape.value(v).iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            stage: "compute_flow",
            index: iteration,
            detail: format!("non-finite flow value at element {pos}"),
        });
    }
    Ok(())
}

/// Per-iteration observer used by tests to inspect the dual variables.
pub trait FlowObserver<T: Scalar> {
    fn dual_updated(&mut self, tape: &Tape<T>, iteration: usize, dual: [Var; 4]);
}

impl<T: Scalar> FlowObserver<T> for () {
    fn dual_updated(&mut self, _: &Tape<T>, _: usize, _: [Var; 4]) {}
}

/// TV-L1 flow between consecutive frames of a single clip `[T, C, H, W]`,
/// returning `[T-1, 2, H, W]`.
pub fn compute_flow<T: Scalar>(tape: &mut Tape<T>, frames: Var, params: &FlowVars) -> Result<FlowField> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 4 {
        return Err(Error::input(format!("compute_flow expects [T, C, H, W] frames, got {shape:?}")));
    }
    let mut batched = shape.clone();
    batched.insert(0, 1);
    let clip = tape.reshape(frames, batched)?;
    let field = compute_flow_batch(tape, clip, params, &mut ())?;
    let out_shape = tape.shape(field.u)[1..].to_vec();
    Ok(FlowField {
        u: tape.reshape(field.u, out_shape)?,
    })
}

/// Batched flow over `[N, T, C, H, W]` clips, returning `[N, T-1, 2, H, W]`.
/// Multichannel frames are channel-averaged first.
pub fn compute_flow_batch<T: Scalar>(
    tape: &mut Tape<T>,
    clips: Var,
    params: &FlowVars,
    observer: &mut dyn FlowObserver<T>,
) -> Result<FlowField> {
    let shape = tape.shape(clips).to_vec();
    let [n, t, c, h, w] = shape[..] else {
        return Err(Error::input(format!("compute_flow expects [N, T, C, H, W] clips, got {shape:?}")));
    };
    if t < 2 {
        return Err(Error::input(format!("compute_flow needs at least 2 frames, got {t}")));
    }
    if params.n_iterations == 0 {
        return Err(Error::config("flow n_iterations must be at least 1"));
    }
    let f = n * (t - 1);
    let plane = vec![f, 1, h, w];

    let flat = tape.reshape(clips, vec![n * t, c, h, w])?;
    let gray = if c == 1 { flat } else { tape.channel_mean(flat)? };
    let gray = tape.scale(gray, T::of(INTENSITY_SCALE));
    let gray = tape.reshape(gray, vec![n, t, 1, h, w])?;
    let prev: Vec<usize> = (0..t - 1).collect();
    let next: Vec<usize> = (1..t).collect();
    let i0 = tape.index_frames(gray, &prev)?;
    let i0 = tape.reshape(i0, plane.clone())?;
    let i1 = tape.index_frames(gray, &next)?;
    let i1 = tape.reshape(i1, plane.clone())?;

    let (kx, ky) = (params.kernel_x, params.kernel_y);
    let (ix, iy) = spatial_gradient(tape, i1, kx, ky)?;
    let it = tape.sub(i1, i0)?;
    let ix2 = tape.square(ix);
    let iy2 = tape.square(iy);
    let grad_sq = tape.add(ix2, iy2)?;
    let grad_sq = tape.add_const(grad_sq, T::of(GRAD_EPS));

    let threshold = tape.mul(params.lambda_data, params.theta)?;
    let dual_step = tape.div(params.tau, params.theta)?;

    let numel = f * h * w;
    let zeros = || vec![T::zero(); numel];
    let mut u1 = tape.constant(plane.clone(), zeros())?;
    let mut u2 = tape.constant(plane.clone(), zeros())?;
    let mut p11 = tape.constant(plane.clone(), zeros())?;
    let mut p12 = tape.constant(plane.clone(), zeros())?;
    let mut p21 = tape.constant(plane.clone(), zeros())?;
    let mut p22 = tape.constant(plane.clone(), zeros())?;

    for iteration in 0..params.n_iterations {
        // Linearized brightness-constancy residual and its three-case soft threshold.
        let a = tape.mul(ix, u1)?;
        let b = tape.mul(iy, u2)?;
        let rho = tape.add(a, b)?;
        let rho = tape.add(rho, it)?;
        let ratio = tape.div(rho, grad_sq)?;
        let step = tape.clamp_sym(ratio, threshold)?;
        let sx = tape.mul(step, ix)?;
        let sy = tape.mul(step, iy)?;
        let v1 = tape.sub(u1, sx)?;
        let v2 = tape.sub(u2, sy)?;

        let d1 = divergence_parts(tape, p11, p12, kx, ky)?;
        let d1 = tape.mul_scalar(d1, params.theta)?;
        u1 = tape.add(v1, d1)?;
        let d2 = divergence_parts(tape, p21, p22, kx, ky)?;
        let d2 = tape.mul_scalar(d2, params.theta)?;
        u2 = tape.add(v2, d2)?;

        (p11, p12) = dual_update(tape, u1, p11, p12, kx, ky, dual_step)?;
        (p21, p22) = dual_update(tape, u2, p21, p22, kx, ky, dual_step)?;
        observer.dual_updated(tape, iteration, [p11, p12, p21, p22]);

        check_finite(tape, u1, iteration)?;
        check_finite(tape, u2, iteration)?;
    }

    let u = tape.concat(&[u1, u2], 1)?;
    Ok(FlowField {
        u: tape.reshape(u, vec![n, t - 1, 2, h, w])?,
    })
}

/// `p <- (p + c ∇u) / (1 + c |∇u|)`.
fn dual_update<T: Scalar>(
    tape: &mut Tape<T>,
    u: Var,
    px: Var,
    py: Var,
    kx: Var,
    ky: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let (ux, uy) = spatial_gradient(tape, u, kx, ky)?;
    let ux2 = tape.square(ux);
    let uy2 = tape.square(uy);
    let norm = tape.add(ux2, uy2)?;
    let norm = tape.add_const(norm, T::of(NORM_EPS));
    let norm = tape.sqrt(norm);
    let denom = tape.mul_scalar(norm, c)?;
    let denom = tape.add_const(denom, T::one());
    let sx = tape.mul_scalar(ux, c)?;
    let sy = tape.mul_scalar(uy, c)?;
    let nx = tape.add(px, sx)?;
    let ny = tape.add(py, sy)?;
    Ok((tape.div(nx, denom)?, tape.div(ny, denom)?))
}

/// Mean endpoint error between `[.., 2, H, W]` flows over pixels where `mask` is set.
/// `mask` has one entry per `(frame, y, x)`.
pub fn mean_epe(pred: &[f64], truth: &[f64], frames: usize, h: usize, w: usize, mask: &[bool]) -> Option<f64> {
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..frames {
        for q in 0..hw {
            if !mask[f * hw + q] {
                continue;
            }
            let du = pred[(f * 2) * hw + q] - truth[(f * 2) * hw + q];
            let dv = pred[(f * 2 + 1) * hw + q] - truth[(f * 2 + 1) * hw + q];
            total += (du * du + dv * dv).sqrt();
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}
