//! Minimal dense/convolutional network plumbing with hand-written backward
//! passes. Everything runs in f64 on the CPU; convolutions are lowered to
//! matrix products via im2col.

pub mod adam;
pub mod layers;

pub use adam::Adam;

use ndarray::ArrayD;
use rand::Rng;

/// A trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Visitor access to named parameters and persistent buffers (running
/// batch-norm statistics). Names are dotted paths rooted at the prefix.
pub trait HasParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut ArrayD<f64>)) {}

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

/// Standard-normal draw (Box-Muller); keeps the RNG stream deterministic.
pub fn randn(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
