//! Seeded weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Uniform(-s, s) with s = sqrt(1/fan_in); the usual fan-in scaling.
pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let s = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * s).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Conv weight [c_out, c_in, kd, kh, kw].
pub fn conv_weight(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kernel: (usize, usize, usize),
) -> Tensor {
    let fan_in = c_in * kernel.0 * kernel.1 * kernel.2;
    uniform_fan_in(
        rng,
        vec![c_out, c_in, kernel.0, kernel.1, kernel.2],
        fan_in,
    )
}

/// Linear weight [out, in].
pub fn linear_weight(rng: &mut ChaCha8Rng, out: usize, input: usize) -> Tensor {
    uniform_fan_in(rng, vec![out, input], input)
}

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}
