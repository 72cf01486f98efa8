//! Real-input FFT helpers on top of rustfft, with explicit scaling so the
//! training code can use exact adjoints.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct RealFft {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RealFft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// Unnormalized forward DFT of a real signal; returns bins 0..=n/2.
    pub fn rfft(&self, x: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(x.len(), self.n);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf.truncate(self.n / 2 + 1);
        buf
    }

    /// Inverse of [`rfft`] (1/n-normalized), assuming Hermitian symmetry.
    /// Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn irfft(&self, spectrum: &[Complex64]) -> Vec<f64> {
        debug_assert_eq!(spectrum.len(), self.n / 2 + 1);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        buf[0] = Complex64::new(spectrum[0].re, 0.0);
        buf[self.n / 2] = Complex64::new(spectrum[self.n / 2].re, 0.0);
        for k in 1..self.n / 2 {
            buf[k] = spectrum[k];
            buf[self.n - k] = spectrum[k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter().map(|z| z.re * scale).collect()
    }

    /// Adjoint of [`irfft`] as a real-linear map from (Re, Im) bin pairs to
    /// time samples: interior bins pick up a factor 2/n, DC and Nyquist 1/n
    /// with zero imaginary sensitivity.
    pub fn irfft_adjoint(&self, grad_time: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(grad_time.len(), self.n);
        let mut g = self.rfft(grad_time);
        let n = self.n as f64;
        let last = g.len() - 1;
        g[0] = Complex64::new(g[0].re / n, 0.0);
        g[last] = Complex64::new(g[last].re / n, 0.0);
        for v in &mut g[1..last] {
            *v *= 2.0 / n;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rfft_irfft_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fft = RealFft::new(64);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = fft.irfft(&fft.rfft(&x));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn irfft_adjoint_matches_inner_product_identity() {
        // <irfft(S), g> == <S, adjoint(g)> under the real-pair inner product.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 32;
        let fft = RealFft::new(n);
        let s: Vec<Complex64> = (0..n / 2 + 1)
            .map(|k| {
                let im = if k == 0 || k == n / 2 { 0.0 } else { rng.gen_range(-1.0..1.0) };
                Complex64::new(rng.gen_range(-1.0..1.0), im)
            })
            .collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = fft.irfft(&s).iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = fft.irfft_adjoint(&g);
        let rhs: f64 = s.iter().zip(&adj).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
