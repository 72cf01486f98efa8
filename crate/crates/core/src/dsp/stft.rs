//! STFT and inverse STFT with weighted overlap-add synthesis, plus the exact
//! adjoint of the inverse transform used by the training backward pass.

use super::fft::RealFft;
use super::{AudioClip, ComplexSpectrogram, StftConfig, Window};
use crate::error::{Error, Result};
use ndarray::Array2;
use num_complex::Complex64;

/// Analysis window for a config (periodic Hann or rectangular).
pub fn stft_window(cfg: &StftConfig) -> Vec<f64> {
    let n = cfg.fft_size;
    match cfg.window {
        Window::Hann => (0..n)
            .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos()))
            .collect(),
        Window::Rect => vec![1.0; n],
    }
}

/// Index into a signal with reflection (no edge repeat) for out-of-range
/// positions.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

fn pad_left(cfg: &StftConfig) -> usize {
    if cfg.centered {
        cfg.fft_size / 2
    } else {
        0
    }
}

/// Padded length covering all frames.
fn padded_len(cfg: &StftConfig, n_samples: usize) -> usize {
    (cfg.n_frames(n_samples) - 1) * cfg.hop + cfg.fft_size
}

pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if clip.is_empty() {
        return Err(Error::InvalidAudio("stft of empty clip".into()));
    }
    let n_frames = cfg.n_frames(clip.len());
    let bins = cfg.freq_bins();
    let left = pad_left(cfg) as isize;
    let x = clip.samples();

    // Padded view: reflection on the left/right when centered, zeros past the
    // reflection range for very short signals handled by reflect_index.
    let total = padded_len(cfg, clip.len());
    let mut padded = vec![0.0; total];
    for (p, v) in padded.iter_mut().enumerate() {
        let i = p as isize - left;
        if i >= 0 && (i as usize) < clip.len() {
            *v = x[i as usize];
        } else if cfg.centered {
            *v = x[reflect_index(i, clip.len())];
        }
    }

    let window = stft_window(cfg);
    let fft = RealFft::new(cfg.fft_size);
    let mut data = Array2::from_elem((bins, n_frames), Complex64::new(0.0, 0.0));
    let mut frame = vec![0.0; cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for j in 0..cfg.fft_size {
            frame[j] = padded[start + j] * window[j];
        }
        let spectrum = fft.rfft(&frame);
        for (k, v) in spectrum.into_iter().enumerate() {
            data[(k, t)] = v;
        }
    }
    Ok(ComplexSpectrogram {
        data,
        config: *cfg,
        sample_rate: clip.sample_rate(),
        n_samples: clip.len(),
    })
}

/// Window-square sum per padded sample over all frames.
fn window_square_sum(cfg: &StftConfig, n_samples: usize) -> Vec<f64> {
    let w = stft_window(cfg);
    let mut wss = vec![0.0; padded_len(cfg, n_samples)];
    for t in 0..cfg.n_frames(n_samples) {
        let start = t * cfg.hop;
        for j in 0..cfg.fft_size {
            wss[start + j] += w[j] * w[j];
        }
    }
    wss
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioClip> {
    let cfg = &spec.config;
    cfg.validate()?;
    let n_frames = spec.n_frames();
    if spec.freq_bins() != cfg.freq_bins() {
        return Err(Error::ShapeMismatch(format!(
            "istft: {} bins but config implies {}",
            spec.freq_bins(),
            cfg.freq_bins()
        )));
    }
    if n_frames != cfg.n_frames(spec.n_samples) {
        return Err(Error::ShapeMismatch(format!(
            "istft: {} frames inconsistent with n_samples {}",
            n_frames, spec.n_samples
        )));
    }
    let window = stft_window(cfg);
    let fft = RealFft::new(cfg.fft_size);
    let total = padded_len(cfg, spec.n_samples);
    let mut acc = vec![0.0; total];
    let mut col = vec![Complex64::new(0.0, 0.0); cfg.freq_bins()];
    for t in 0..n_frames {
        for k in 0..cfg.freq_bins() {
            col[k] = spec.data[(k, t)];
        }
        let frame = fft.irfft(&col);
        let start = t * cfg.hop;
        for j in 0..cfg.fft_size {
            acc[start + j] += window[j] * frame[j];
        }
    }
    let wss = window_square_sum(cfg, spec.n_samples);
    let left = pad_left(cfg);
    let mut out = vec![0.0; spec.n_samples];
    for (i, o) in out.iter_mut().enumerate() {
        let n = left + i;
        if wss[n] > 1e-12 {
            *o = acc[n] / wss[n];
        }
    }
    AudioClip::new(out, spec.sample_rate)
}

/// Adjoint of [`istft`] as a real-linear map: given the gradient of a scalar
/// loss with respect to the time-domain output, returns the gradient with
/// respect to the spectrogram entries (convention: re = d/dRe, im = d/dIm).
pub fn istft_adjoint(grad_out: &[f64], cfg: &StftConfig, n_samples: usize) -> Array2<Complex64> {
    debug_assert_eq!(grad_out.len(), n_samples);
    let n_frames = cfg.n_frames(n_samples);
    let window = stft_window(cfg);
    let wss = window_square_sum(cfg, n_samples);
    let left = pad_left(cfg);
    let total = padded_len(cfg, n_samples);
    let mut gacc = vec![0.0; total];
    for (i, g) in grad_out.iter().enumerate() {
        let n = left + i;
        if wss[n] > 1e-12 {
            gacc[n] = g / wss[n];
        }
    }
    let fft = RealFft::new(cfg.fft_size);
    let mut out = Array2::from_elem((cfg.freq_bins(), n_frames), Complex64::new(0.0, 0.0));
    let mut gframe = vec![0.0; cfg.fft_size];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for j in 0..cfg.fft_size {
            gframe[j] = window[j] * gacc[start + j];
        }
        for (k, v) in fft.irfft_adjoint(&gframe).into_iter().enumerate() {
            out[(k, t)] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, rate: u32, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), rate).unwrap()
    }

    #[test]
    fn zero_clip_gives_zero_spectrogram_of_expected_shape() {
        let clip = AudioClip::silence(66150, 22050);
        let spec = stft(&clip, &StftConfig::default()).unwrap();
        assert_eq!(spec.data.dim(), (513, 259));
        assert!(spec.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn frame_count_formula() {
        let clip = noise(66150, 22050, 0);
        let spec = stft(&clip, &StftConfig::default()).unwrap();
        assert_eq!(spec.n_frames(), 66150 / 256 + 1);
    }

    #[test]
    fn roundtrip_white_noise() {
        let clip = noise(66150, 22050, 1);
        let cfg = StftConfig::default();
        let rec = istft(&stft(&clip, &cfg).unwrap()).unwrap();
        assert_eq!(rec.len(), clip.len());
        let edge = cfg.fft_size / 2;
        for (i, (a, b)) in clip.samples().iter().zip(rec.samples()).enumerate() {
            let tol = if i >= edge && i + edge < clip.len() { 1e-9 } else { 1e-6 };
            assert!((a - b).abs() < tol, "sample {i}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram {
            data: Array2::from_elem((513, 259), Complex64::new(0.0, 0.0)),
            config: cfg,
            sample_rate: 22050,
            n_samples: 66150,
        };
        let clip = istft(&spec).unwrap();
        assert!(clip.samples().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn pure_tone_concentrates_in_its_bin_with_rect_window() {
        // Sine at exactly bin 21 of a 1024-point DFT at 22050 Hz.
        let cfg = StftConfig { window: Window::Rect, ..Default::default() };
        let rate = 22050u32;
        let freq = 21.0 * rate as f64 / 1024.0;
        let n = 66150;
        let clip = AudioClip::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
                .collect(),
            rate,
        )
        .unwrap();
        let spec = stft(&clip, &cfg).unwrap();
        // Interior frames: > 99% of energy in bin 21.
        for t in 10..spec.n_frames() - 10 {
            let total: f64 = (0..513).map(|k| spec.data[(k, t)].norm_sqr()).sum();
            let peak = spec.data[(21, t)].norm_sqr();
            assert!(peak / total > 0.99, "frame {t}: {}", peak / total);
        }
        // Direct DFT summation oracle on one interior frame.
        let t = 50;
        let start = t * cfg.hop - cfg.fft_size / 2; // centered framing
        for k in [0usize, 21, 100] {
            let mut oracle = Complex64::new(0.0, 0.0);
            for j in 0..cfg.fft_size {
                let x = clip.samples()[start + j];
                let ang = -2.0 * std::f64::consts::PI * (k * j) as f64 / cfg.fft_size as f64;
                oracle += Complex64::new(x * ang.cos(), x * ang.sin());
            }
            let got = spec.data[(k, t)];
            assert!((got - oracle).norm() < 1e-6 * oracle.norm().max(1.0), "bin {k}");
        }
    }

    #[test]
    fn stft_is_linear() {
        let cfg = StftConfig::default();
        let x = noise(10000, 22050, 2);
        let y = noise(10000, 22050, 3);
        let (a, b) = (0.7, -1.3);
        let combo = AudioClip::new(
            x.samples()
                .iter()
                .zip(y.samples())
                .map(|(xi, yi)| a * xi + b * yi)
                .collect(),
            22050,
        )
        .unwrap();
        let sx = stft(&x, &cfg).unwrap();
        let sy = stft(&y, &cfg).unwrap();
        let sc = stft(&combo, &cfg).unwrap();
        let mut max_err = 0.0f64;
        let mut max_mag = 0.0f64;
        for ((c, xv), yv) in sc.data.iter().zip(sx.data.iter()).zip(sy.data.iter()) {
            max_err = max_err.max((c - (a * xv + b * yv)).norm());
            max_mag = max_mag.max(c.norm());
        }
        assert!(max_err < 1e-9 * max_mag.max(1.0));
    }

    #[test]
    fn istft_adjoint_inner_product_identity() {
        // <istft(S), g> == <S, adjoint(g)>
        let cfg = StftConfig { fft_size: 64, hop: 16, window: Window::Hann, centered: true };
        let n_samples = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n_frames = cfg.n_frames(n_samples);
        let s = Array2::from_shape_fn((cfg.freq_bins(), n_frames), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let spec = ComplexSpectrogram { data: s.clone(), config: cfg, sample_rate: 22050, n_samples };
        let y = istft(&spec).unwrap();
        let g: Vec<f64> = (0..n_samples).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = y.samples().iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = istft_adjoint(&g, &cfg, n_samples);
        let rhs: f64 = s
            .iter()
            .zip(adj.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
