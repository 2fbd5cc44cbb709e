//! Seeded parameter initialization.

use rand::Rng;

use super::{Scalar, Tensor};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
    Tensor::new(shape, values).expect("shape matches generated values").with_grad()
}

/// Fan-in/fan-out of a conv kernel `[C_out, C_in, kh, kw]`.
pub fn conv_fans(shape: &[usize]) -> (usize, usize) {
    let receptive: usize = shape[2..].iter().product();
    (shape[1] * receptive, shape[0] * receptive)
}
