//! Band-limited sample-rate conversion with a windowed-sinc kernel.

use super::AudioClip;
use crate::error::{Error, Result};

/// Kernel width in taps at the output-side Nyquist; widened by 1/cutoff when
/// downsampling so the transition band stays proportional.
pub const SINC_TAPS: usize = 64;

/// Relative cutoff below the narrower Nyquist.
const CUTOFF: f64 = 0.95;

fn blackman(x: f64) -> f64 {
    // x in [-1, 1]
    let t = std::f64::consts::PI * (x + 1.0);
    0.42 - 0.5 * (t).cos() + 0.08 * (2.0 * t).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Resamples a clip with windowed-sinc interpolation. Duration is preserved
/// within one sample; identical rates return an identity copy.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidConfig("target_rate must be > 0".into()));
    }
    if clip.is_empty() {
        return Err(Error::InvalidAudio("resample of empty clip".into()));
    }
    if target_rate == clip.sample_rate() {
        return Ok(clip.clone());
    }
    let src = clip.sample_rate() as f64;
    let dst = target_rate as f64;
    let out_len = ((clip.len() as u128 * target_rate as u128 + clip.sample_rate() as u128 / 2)
        / clip.sample_rate() as u128) as usize;
    let fc = (dst / src).min(1.0) * CUTOFF;
    let half = SINC_TAPS as f64 / 2.0 / fc;
    let x = clip.samples();

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 * src / dst;
        let k_lo = (center - half).ceil() as isize;
        let k_hi = (center + half).floor() as isize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for k in k_lo..=k_hi {
            let tau = center - k as f64;
            let w = fc * sinc(fc * tau) * blackman(tau / half);
            wsum += w;
            if k >= 0 && (k as usize) < x.len() {
                acc += w * x[k as usize];
            }
        }
        out.push(if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 });
    }
    AudioClip::new(out, target_rate)
}
