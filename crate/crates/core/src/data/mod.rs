//! Multitrack storage, the training-example sampler, and the deterministic
//! synthetic corpus generator used for desk-scale runs.

pub mod loader;
pub mod sampler;
pub mod synth;

pub use loader::{load_corpus_dir, load_multitrack_dir};
pub use sampler::{sample_training_example, Provenance, SamplerConfig, TrainingExample};
pub use synth::{generate_synthetic_corpus, Archetype, SynthClassSpec, SynthSpec};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

/// Silence threshold used when rejecting inactive chunks: -60 dBFS RMS.
pub const SILENCE_RMS: f64 = 1e-3;

/// A set of solo-instrument stems sharing length and sample rate; the
/// mixture is their sample-wise sum.
#[derive(Debug, Clone)]
pub struct MultiTrack {
    pub id: String,
    stems: Vec<(String, AudioClip)>,
}

impl MultiTrack {
    pub fn new(id: String, stems: Vec<(String, AudioClip)>) -> Result<Self> {
        let (first_class, first) = stems
            .first()
            .ok_or_else(|| Error::InvalidAudio(format!("track '{id}' has no stems")))?;
        let (len, rate) = (first.len(), first.sample_rate());
        let mut seen = std::collections::HashSet::new();
        seen.insert(first_class.clone());
        for (class, clip) in &stems[1..] {
            if clip.len() != len || clip.sample_rate() != rate {
                return Err(Error::InvalidAudio(format!(
                    "track '{id}': stem '{class}' is {} samples @ {} Hz, expected {len} @ {rate}",
                    clip.len(),
                    clip.sample_rate()
                )));
            }
            if !seen.insert(class.clone()) {
                return Err(Error::InvalidAudio(format!(
                    "track '{id}': duplicate stem class '{class}'"
                )));
            }
        }
        Ok(Self { id, stems })
    }

    pub fn stems(&self) -> &[(String, AudioClip)] {
        &self.stems
    }

    pub fn len_samples(&self) -> usize {
        self.stems[0].1.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.stems[0].1.sample_rate()
    }

    pub fn stem(&self, class: &str) -> Option<&AudioClip> {
        self.stems.iter().find(|(c, _)| c == class).map(|(_, s)| s)
    }

    pub fn classes(&self) -> Vec<&str> {
        self.stems.iter().map(|(c, _)| c.as_str()).collect()
    }

    /// Sample-wise sum of all stems.
    pub fn mixture(&self) -> AudioClip {
        let clips: Vec<&AudioClip> = self.stems.iter().map(|(_, c)| c).collect();
        AudioClip::mix(&clips).expect("stems validated at construction")
    }
}
