//! Composite training objective: time-domain SDR loss plus mean absolute
//! error on compressed magnitudes in the time-frequency domain.

use crate::dsp::{compress, stft, AudioClip, ComplexSpectrogram, StftConfig};
use crate::error::{Error, Result};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Denominator guard of the SDR ratio.
    pub epsilon: f64,
    pub w_sdr: f64,
    pub w_mae: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { epsilon: 1e-8, w_sdr: 1.0, w_mae: 1.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub sdr_term: f64,
    pub mag_mae_term: f64,
    pub total: f64,
    pub weights: (f64, f64),
    /// True when the reference was silent and the SDR term was skipped.
    pub silent_target: bool,
}

/// Energy-ratio SDR loss, sign-anchored:
/// -<s,e>*|<s,e>| / (|s|^2 |e|^2 - <s,e>^2 + eps).
/// Lower is better; 0 for orthogonal estimates; unbounded below as the
/// estimate aligns with the reference. The plain squared-correlation ratio
/// cannot tell s from -s, and a complex mask is free to rotate phase by pi,
/// so the sign of the correlation is kept to rule out the inverted solution
/// (which time-domain SDR scores as catastrophic). A silent reference
/// contributes 0 and is flagged rather than producing NaN.
pub fn sdr_loss(estimate: &AudioClip, reference: &AudioClip, epsilon: f64) -> Result<(f64, bool)> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "sdr_loss: estimate {} vs reference {} samples",
            estimate.len(),
            reference.len()
        )));
    }
    let s = reference.samples();
    let e = estimate.samples();
    let es: f64 = s.iter().map(|v| v * v).sum();
    if es == 0.0 {
        return Ok((0.0, true));
    }
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let p: f64 = s.iter().zip(e).map(|(a, b)| a * b).sum();
    Ok((-(p * p.abs()) / (es * ee - p * p + epsilon), false))
}

/// Gradient of [`sdr_loss`] with respect to the estimate; zeros for a silent
/// reference.
pub fn sdr_loss_grad(estimate: &AudioClip, reference: &AudioClip, epsilon: f64) -> Vec<f64> {
    let s = reference.samples();
    let e = estimate.samples();
    let es: f64 = s.iter().map(|v| v * v).sum();
    if es == 0.0 {
        return vec![0.0; e.len()];
    }
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let p: f64 = s.iter().zip(e).map(|(a, b)| a * b).sum();
    let d = es * ee - p * p + epsilon;
    // L = -p|p| / d with dp/de_i = s_i, dd/de_i = 2*es*e_i - 2p*s_i:
    // dL/de_i = -2|p|(d + p^2)/d^2 * s_i + 2p|p|es/d^2 * e_i
    let c_s = -2.0 * p.abs() * (d + p * p) / (d * d);
    let c_e = 2.0 * p * p.abs() * es / (d * d);
    s.iter().zip(e).map(|(si, ei)| c_s * si + c_e * ei).collect()
}

/// Mean absolute error between the magnitudes of two spectrograms.
pub fn mag_mae(estimate: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<f64> {
    if estimate.data.dim() != reference.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "mag_mae: {:?} vs {:?}",
            estimate.data.dim(),
            reference.data.dim()
        )));
    }
    let n = estimate.data.len() as f64;
    Ok(estimate
        .data
        .iter()
        .zip(reference.data.iter())
        .map(|(a, b)| (a.norm() - b.norm()).abs())
        .sum::<f64>()
        / n)
}

/// Gradient of [`mag_mae`] with respect to the estimate's entries
/// (convention: re = d/dRe, im = d/dIm). Zero-magnitude entries get a zero
/// subgradient.
pub fn mag_mae_grad(
    estimate: &Array2<Complex64>,
    reference: &Array2<Complex64>,
) -> Array2<Complex64> {
    let n = estimate.len() as f64;
    let mut g = Array2::from_elem(estimate.dim(), Complex64::new(0.0, 0.0));
    ndarray::Zip::from(&mut g)
        .and(estimate)
        .and(reference)
        .for_each(|gi, &a, &b| {
            let m = a.norm();
            if m > 0.0 {
                let sign = (m - b.norm()).signum();
                *gi = a * (sign / (m * n));
            }
        });
    g
}

/// Weighted sum of the SDR and magnitude-MAE terms, recomputing compressed
/// spectrograms of both clips for the MAE term.
pub fn total_loss(
    estimate: &AudioClip,
    reference: &AudioClip,
    cfg: &LossConfig,
    stft_cfg: &StftConfig,
) -> Result<LossBreakdown> {
    let (sdr_term, silent_target) = sdr_loss(estimate, reference, cfg.epsilon)?;
    let est_spec = compress(&stft(estimate, stft_cfg)?);
    let ref_spec = compress(&stft(reference, stft_cfg)?);
    let mag_mae_term = mag_mae(&est_spec, &ref_spec)?;
    Ok(LossBreakdown {
        sdr_term,
        mag_mae_term,
        total: cfg.w_sdr * sdr_term + cfg.w_mae * mag_mae_term,
        weights: (cfg.w_sdr, cfg.w_mae),
        silent_target,
    })
}
