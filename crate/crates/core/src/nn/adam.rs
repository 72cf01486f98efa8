//! Adam optimizer keyed by parameter name.

use super::{HasParams, Param};
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub state: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update over all parameters of `model` using their accumulated
    /// gradients; gradients are left untouched (callers zero them).
    pub fn step<M: HasParams>(&mut self, model: &mut M) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let state = &mut self.state;
        model.visit_params("", &mut |name: String, p: &mut Param| {
            let (m, v) = state.entry(name).or_insert_with(|| {
                (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim()))
            });
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, mi, vi| {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    struct Quad {
        p: Param,
    }

    impl HasParams for Quad {
        fn visit_params(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f("p".into(), &mut self.p);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut q = Quad { p: Param::new(ArrayD::from_elem(vec![3], 5.0)) };
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            q.zero_grads();
            let g = q.p.value.mapv(|w| 2.0 * w);
            q.p.grad.assign(&g);
            opt.step(&mut q);
        }
        assert!(q.p.value.iter().all(|w| w.abs() < 1e-3));
    }
}
