//! Deterministic synthetic multitrack generator. Three timbral archetypes
//! with disjoint spectral-centroid ranges keep the classes acoustically
//! distinguishable by construction.

use super::MultiTrack;
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Sustained stack of harmonics with slow attack/release.
    HarmonicStack,
    /// Exponentially decaying pluck with harmonics damped by order.
    PluckedDecay,
    /// White noise through a resonant band-pass.
    FilteredNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClassSpec {
    pub name: String,
    pub archetype: Archetype,
    /// Fundamental (or band center) range in Hz; wide ranges force the
    /// separator to rely on conditioning rather than a fixed band split.
    pub pitch_lo: f64,
    pub pitch_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: Vec<SynthClassSpec>,
    pub n_tracks: usize,
    pub duration_secs: f64,
    pub sample_rate: u32,
    /// Mean note events per second per stem.
    pub events_per_sec: f64,
    pub min_stems: usize,
    pub max_stems: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: vec![
                SynthClassSpec {
                    name: "sub".into(),
                    archetype: Archetype::HarmonicStack,
                    pitch_lo: 80.0,
                    pitch_hi: 350.0,
                },
                SynthClassSpec {
                    name: "keys".into(),
                    archetype: Archetype::PluckedDecay,
                    pitch_lo: 500.0,
                    pitch_hi: 1400.0,
                },
                SynthClassSpec {
                    name: "air".into(),
                    archetype: Archetype::FilteredNoise,
                    pitch_lo: 3800.0,
                    pitch_hi: 7500.0,
                },
            ],
            n_tracks: 12,
            duration_secs: 12.0,
            sample_rate: 22050,
            events_per_sec: 1.2,
            min_stems: 2,
            max_stems: 3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.n_tracks == 0 {
            return Err(Error::InvalidConfig("synth spec needs classes and tracks".into()));
        }
        if self.min_stems < 1 || self.min_stems > self.max_stems || self.max_stems > self.classes.len()
        {
            return Err(Error::InvalidConfig(format!(
                "stem range {}..={} invalid for {} classes",
                self.min_stems,
                self.max_stems,
                self.classes.len()
            )));
        }
        for c in &self.classes {
            if !(c.pitch_lo > 0.0 && c.pitch_hi > c.pitch_lo)
                || c.pitch_hi >= self.sample_rate as f64 / 2.0
            {
                return Err(Error::InvalidConfig(format!(
                    "class '{}' pitch range {}..{} invalid at {} Hz",
                    c.name, c.pitch_lo, c.pitch_hi, self.sample_rate
                )));
            }
        }
        Ok(())
    }
}

/// Second-order resonant band-pass (constant-skirt biquad).
fn bandpass(x: &[f64], center: f64, q: f64, sr: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * center / sr;
    let alpha = w0.sin() / (2.0 * q);
    let (b0, b1, b2) = (w0.sin() / 2.0, 0.0, -w0.sin() / 2.0);
    let (a0, a1, a2) = (1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha);
    let mut y = vec![0.0; x.len()];
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let yi = (b0 * xi + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2) / a0;
        x2 = x1;
        x1 = xi;
        y2 = y1;
        y1 = yi;
        y[i] = yi;
    }
    y
}

fn render_note(
    class: &SynthClassSpec,
    dur: f64,
    pitch: f64,
    sr: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = (dur * sr) as usize;
    let mut out = vec![0.0; n];
    match class.archetype {
        Archetype::HarmonicStack => {
            let n_harm = ((sr / 2.0 * 0.9 / pitch) as usize).clamp(1, 8);
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let attack = (0.02 * sr) as usize;
            let release = (0.05 * sr) as usize;
            for i in 0..n {
                let t = i as f64 / sr;
                let mut s = 0.0;
                for (h, ph) in phases.iter().enumerate() {
                    let k = (h + 1) as f64;
                    s += (2.0 * PI * pitch * k * t + ph).sin() / k;
                }
                let env = ((i + 1) as f64 / attack.max(1) as f64)
                    .min(1.0)
                    .min((n - i) as f64 / release.max(1) as f64);
                out[i] = s * env;
            }
        }
        Archetype::PluckedDecay => {
            let n_harm = ((sr / 2.0 * 0.9 / pitch) as usize).clamp(1, 6);
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            for i in 0..n {
                let t = i as f64 / sr;
                let mut s = 0.0;
                for (h, ph) in phases.iter().enumerate() {
                    let k = (h + 1) as f64;
                    // Higher partials die faster, as on a struck string.
                    s += (2.0 * PI * pitch * k * t + ph).sin() * (-t * (3.0 + 4.0 * k)).exp() / k;
                }
                out[i] = s;
            }
        }
        Archetype::FilteredNoise => {
            let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut y = bandpass(&noise, pitch, 8.0, sr);
            let attack = (0.02 * sr) as usize;
            let release = (0.08 * sr) as usize;
            for (i, v) in y.iter_mut().enumerate() {
                let env = ((i + 1) as f64 / attack.max(1) as f64)
                    .min(1.0)
                    .min((n - i) as f64 / release.max(1) as f64);
                *v *= env;
            }
            out = y;
        }
    }
    out
}

fn render_stem(class: &SynthClassSpec, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> AudioClip {
    let sr = spec.sample_rate as f64;
    let total = (spec.duration_secs * sr) as usize;
    let mut samples = vec![0.0; total];
    let n_events = ((spec.duration_secs * spec.events_per_sec).round() as usize).max(1);
    // Each stem occupies a track-specific register drawn geometrically from
    // the class range; events stay within about a semitone of it, the way
    // one instrument keeps one tessitura across a song. Any short excerpt of
    // the stem therefore reveals the register, while an excerpt of the same
    // class from another track generally does not match it.
    let register = class.pitch_lo * (class.pitch_hi / class.pitch_lo).powf(rng.gen_range(0.0..1.0));
    let semitone = 2f64.powf(1.0 / 12.0);
    for _ in 0..n_events {
        let dur = rng.gen_range(0.4..1.5);
        let pitch = (register * rng.gen_range(1.0 / semitone..semitone))
            .clamp(class.pitch_lo, class.pitch_hi);
        let onset = (rng.gen_range(0.0..(spec.duration_secs - dur).max(0.01)) * sr) as usize;
        let amp = rng.gen_range(0.5..1.0);
        let note = render_note(class, dur, pitch, sr, rng);
        for (j, v) in note.iter().enumerate() {
            if onset + j < total {
                samples[onset + j] += amp * v;
            }
        }
    }
    AudioClip::new(samples, spec.sample_rate).expect("finite by construction")
}

/// Deterministically renders `n_tracks` multitracks, each with
/// `min_stems..=max_stems` stems of distinct classes. Stems are peak
/// normalized so the mixture cannot clip.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Vec<MultiTrack>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tracks = Vec::with_capacity(spec.n_tracks);
    for ti in 0..spec.n_tracks {
        let k = rng.gen_range(spec.min_stems..=spec.max_stems);
        // Distinct classes via partial shuffle.
        let mut order: Vec<usize> = (0..spec.classes.len()).collect();
        for i in 0..k {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut stems = Vec::with_capacity(k);
        for &ci in order.iter().take(k) {
            let class = &spec.classes[ci];
            let raw = render_stem(class, spec, &mut rng);
            let peak = raw.peak();
            let gain = if peak > 0.0 { 0.9 / (k as f64 * peak) } else { 1.0 };
            stems.push((class.name.clone(), raw.scaled(gain)));
        }
        stems.sort_by(|a, b| a.0.cmp(&b.0));
        tracks.push(MultiTrack::new(format!("synth-{ti:03}"), stems)?);
    }
    Ok(tracks)
}
