//! Deterministic signal processing: resampling, STFT/ISTFT, log compression,
//! complex mask application, chunking and overlap-add reconstruction.
//!
//! Everything here is a pure function on immutable inputs; no shared state.

mod fft;
mod resample;
mod stft;
pub mod wav;

pub use resample::resample;
pub use stft::{istft, istft_adjoint, stft, stft_window};

use crate::error::{Error, Result};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Mono waveform with a sample rate; the unit of all time-domain I/O.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio("samples contain NaN/Inf".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    /// All-zero clip of the given length.
    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Copy of the sample range [start, start+len), zero-padded past the end.
    pub fn slice_padded(&self, start: usize, len: usize) -> Self {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let n = (self.samples.len() - start).min(len);
            out[..n].copy_from_slice(&self.samples[start..start + n]);
        }
        Self { samples: out, sample_rate: self.sample_rate }
    }

    /// Sample-wise sum; rates and lengths must match.
    pub fn mix(clips: &[&AudioClip]) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::InvalidAudio("mix of zero clips".into()))?;
        let mut samples = vec![0.0; first.len()];
        for c in clips {
            if c.len() != first.len() || c.sample_rate != first.sample_rate {
                return Err(Error::ShapeMismatch("mix: clip length/rate mismatch".into()));
            }
            for (o, s) in samples.iter_mut().zip(&c.samples) {
                *o += s;
            }
        }
        Ok(Self { samples, sample_rate: first.sample_rate })
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    Hann,
    Rect,
}

/// STFT analysis/synthesis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
    pub centered: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 1024, hop: 256, window: Window::Hann, centered: true }
    }
}

impl StftConfig {
    /// Checks structural invariants and that the window/hop pair admits exact
    /// weighted-overlap-add inversion (window-square sum bounded away from
    /// zero at every interior sample).
    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "fft_size must be a power of two, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::InvalidConfig(format!(
                "hop must be in 1..=fft_size, got {}",
                self.hop
            )));
        }
        // Window-square sum over one hop period, with all contributing frames.
        let w = stft_window(self);
        let mut min_wss = f64::INFINITY;
        for n in 0..self.hop {
            let mut wss = 0.0;
            let mut j = n;
            while j < self.fft_size {
                wss += w[j] * w[j];
                j += self.hop;
            }
            min_wss = min_wss.min(wss);
        }
        if min_wss < 1e-8 {
            return Err(Error::InvalidConfig(format!(
                "window/hop pair violates overlap-add invertibility (min window-square sum {min_wss:.3e})"
            )));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a centered analysis of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// Complex time-frequency representation [freq_bins x frames].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
    pub sample_rate: u32,
    /// Length in samples of the analyzed signal; needed for exact inversion.
    pub n_samples: usize,
}

impl ComplexSpectrogram {
    pub fn freq_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Complex mask with sigmoid-bounded magnitude, stored as one complex entry
/// per time-frequency cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub data: Array2<Complex64>,
}

impl ComplexMask {
    /// Validates that every entry's magnitude lies in (0, 1]. The sigmoid
    /// bound is mathematically strict, but float64 rounds a saturated
    /// sigmoid to exactly 1.
    pub fn new(data: Array2<Complex64>) -> Result<Self> {
        for v in data.iter() {
            let m = v.norm();
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::InvalidAudio(format!(
                    "mask magnitude {m} outside (0, 1]"
                )));
            }
        }
        Ok(Self { data })
    }
}

/// Log-compress: magnitude m -> log(1+m), phase preserved exactly.
pub fn compress(spec: &ComplexSpectrogram) -> ComplexSpectrogram {
    let data = spec.data.mapv(|z| {
        let m = z.norm();
        if m > 0.0 {
            z * (m.ln_1p() / m)
        } else {
            Complex64::new(0.0, 0.0)
        }
    });
    ComplexSpectrogram { data, ..spec.clone() }
}

/// Exact inverse of [`compress`]: magnitude m -> exp(m)-1, phase preserved.
pub fn decompress(spec: &ComplexSpectrogram) -> ComplexSpectrogram {
    let data = spec.data.mapv(|z| z * decompress_factor(z.norm()));
    ComplexSpectrogram { data, ..spec.clone() }
}

/// Radial gain expm1(m)/m with its m -> 0 limit of 1.
pub(crate) fn decompress_factor(m: f64) -> f64 {
    if m < 1e-12 {
        1.0
    } else {
        m.exp_m1() / m
    }
}

/// Elementwise complex product of spectrogram and mask.
pub fn apply_mask(spec: &ComplexSpectrogram, mask: &ComplexMask) -> Result<ComplexSpectrogram> {
    if spec.data.dim() != mask.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "apply_mask: spectrogram {:?} vs mask {:?}",
            spec.data.dim(),
            mask.data.dim()
        )));
    }
    Ok(ComplexSpectrogram { data: &spec.data * &mask.data, ..spec.clone() })
}

/// Splits a clip into fixed-length chunks with fractional overlap.
///
/// Consecutive offsets differ by chunk_len*(1-overlap); the final chunk is
/// zero-padded so every input sample is covered.
pub fn chunk(clip: &AudioClip, chunk_len: usize, overlap: f64) -> Result<Vec<(usize, AudioClip)>> {
    if chunk_len == 0 {
        return Err(Error::InvalidConfig("chunk_len must be > 0".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidConfig(format!("overlap {overlap} not in [0, 1)")));
    }
    let step = ((chunk_len as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut out = Vec::new();
    let mut offset = 0usize;
    loop {
        out.push((offset, clip.slice_padded(offset, chunk_len)));
        if offset + chunk_len >= clip.len() {
            break;
        }
        offset += step;
    }
    Ok(out)
}

/// Reconstructs a signal from (offset, chunk) pairs with a triangular
/// cross-fade normalized to a partition of unity, so unmodified chunks
/// reconstruct the original exactly.
pub fn overlap_add(chunks: &[(usize, AudioClip)], total_len: usize) -> Result<AudioClip> {
    let sample_rate = chunks
        .first()
        .map(|(_, c)| c.sample_rate())
        .ok_or_else(|| Error::InvalidAudio("overlap_add of zero chunks".into()))?;
    let mut acc = vec![0.0; total_len];
    let mut wsum = vec![0.0; total_len];
    for (offset, c) in chunks {
        let l = c.len();
        for (j, s) in c.samples().iter().enumerate() {
            let n = offset + j;
            if n >= total_len {
                break;
            }
            // Triangular weight, strictly positive at both chunk ends.
            let w = (j + 1).min(l - j) as f64;
            acc[n] += w * s;
            wsum[n] += w;
        }
    }
    for n in 0..total_len {
        if wsum[n] <= 0.0 {
            return Err(Error::InvalidAudio(format!(
                "overlap_add: no chunk covers sample {n}"
            )));
        }
        acc[n] /= wsum[n];
    }
    AudioClip::new(acc, sample_rate)
}

/// Loads a WAV file as a mono clip, averaging channels if needed.
pub fn load_wav_mono(path: &std::path::Path) -> Result<AudioClip> {
    wav::read_wav(path)
}
