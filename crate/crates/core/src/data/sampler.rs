//! Training-example sampler: uniform multi-level sampling with non-overlap
//! rejection for conditioning chunks, multi-source relaxation, cross-track
//! conditioning, negative examples, and class holdout.

use super::{MultiTrack, SILENCE_RMS};
use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Bounded retries for rejection sampling (overlap / silence).
const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Conditioning examples per draw, 1..=5.
    pub n_shots: usize,
    /// Chunk length in samples.
    pub chunk_len: usize,
    /// Train with multi-sourced conditioning examples (the "MS" variant).
    pub multi_source: bool,
    /// When `multi_source` is set: probability that each positive example
    /// mixes in one non-target instrument before chunk extraction.
    pub multi_source_prob: f64,
    /// Draw positive examples from other tracks containing the class.
    pub cross_track: bool,
    pub use_negatives: bool,
    /// Target classes never sampled (their stems still appear in mixtures).
    pub holdout: Vec<String>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_shots: 5,
            chunk_len: 66150,
            multi_source: false,
            multi_source_prob: 0.5,
            cross_track: false,
            use_negatives: false,
            holdout: Vec::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.n_shots) {
            return Err(Error::InvalidConfig(format!("n_shots {} not in 1..=5", self.n_shots)));
        }
        if !(0.0..=1.0).contains(&self.multi_source_prob) {
            return Err(Error::InvalidConfig(format!(
                "multi_source_prob {} not in [0, 1]",
                self.multi_source_prob
            )));
        }
        if self.chunk_len == 0 {
            return Err(Error::InvalidConfig("chunk_len must be > 0".into()));
        }
        Ok(())
    }
}

/// Offsets and stem identities that make an example reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub track_id: String,
    pub target_offset: usize,
    pub mixture_classes: Vec<String>,
    /// (track_id, offset, multi_sourced_with) per positive example.
    pub positives: Vec<(String, usize, Option<String>)>,
    /// (class, offset) per negative example, drawn from the target track.
    pub negatives: Vec<(String, usize)>,
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub mixture: AudioClip,
    pub target: AudioClip,
    pub target_class: String,
    pub positive_examples: Vec<AudioClip>,
    pub negative_examples: Vec<AudioClip>,
    pub provenance: Provenance,
}

fn chunk_at(clip: &AudioClip, offset: usize, len: usize) -> AudioClip {
    clip.slice_padded(offset, len)
}

fn intervals_overlap(a: usize, b: usize, len: usize) -> bool {
    a < b + len && b < a + len
}

/// Uniform offset with silence rejection; `avoid` forbids overlap with the
/// target interval.
pub(crate) fn draw_offset(
    clip: &AudioClip,
    len: usize,
    avoid: Option<usize>,
    rng: &mut impl Rng,
    what: &str,
) -> Result<usize> {
    if clip.len() < len {
        return Err(Error::Sampling(format!("{what}: stem shorter than chunk length")));
    }
    let hi = clip.len() - len;
    for _ in 0..MAX_RETRIES {
        let off = rng.gen_range(0..=hi);
        if let Some(t) = avoid {
            if intervals_overlap(off, t, len) {
                continue;
            }
        }
        if chunk_at(clip, off, len).rms() < SILENCE_RMS {
            continue;
        }
        return Ok(off);
    }
    Err(Error::Sampling(format!(
        "{what}: no non-silent{} chunk found in {MAX_RETRIES} tries",
        if avoid.is_some() { ", non-overlapping" } else { "" }
    )))
}

/// Draws one training example per the sampling scheme: uniform over tracks,
/// target stems, and offsets, with conditioning chunks rejected on overlap
/// with the target interval.
pub fn sample_training_example(
    corpus: &[MultiTrack],
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Sampling("empty corpus".into()));
    }
    let eligible: Vec<&MultiTrack> = corpus
        .iter()
        .filter(|t| {
            t.len_samples() >= cfg.chunk_len
                && t.stems().iter().any(|(c, _)| !cfg.holdout.contains(c))
                && (!cfg.use_negatives || t.stems().len() >= 2)
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(
            "no track is long enough and has a non-holdout target stem (and a second stem when negatives are enabled)"
                .into(),
        ));
    }
    let track = eligible[rng.gen_range(0..eligible.len())];
    let candidates: Vec<&(String, AudioClip)> = track
        .stems()
        .iter()
        .filter(|(c, _)| !cfg.holdout.contains(c))
        .collect();
    let (target_class, target_stem) = {
        let pick = candidates[rng.gen_range(0..candidates.len())];
        (pick.0.clone(), &pick.1)
    };

    let target_offset = draw_offset(target_stem, cfg.chunk_len, None, rng, "target")?;
    let target = chunk_at(target_stem, target_offset, cfg.chunk_len);
    let stem_chunks: Vec<AudioClip> = track
        .stems()
        .iter()
        .map(|(_, s)| chunk_at(s, target_offset, cfg.chunk_len))
        .collect();
    let mixture = AudioClip::mix(&stem_chunks.iter().collect::<Vec<_>>())?;

    // Positive conditioning examples.
    let mut positives = Vec::with_capacity(cfg.n_shots);
    let mut pos_prov = Vec::with_capacity(cfg.n_shots);
    for _ in 0..cfg.n_shots {
        let (src_track, avoid) = if cfg.cross_track {
            let others: Vec<&MultiTrack> = corpus
                .iter()
                .filter(|t| {
                    t.id != track.id
                        && t.stem(&target_class).is_some()
                        && t.len_samples() >= cfg.chunk_len
                })
                .collect();
            if others.is_empty() {
                return Err(Error::Sampling(format!(
                    "cross-track conditioning: no other track contains class '{target_class}'"
                )));
            }
            (others[rng.gen_range(0..others.len())], None)
        } else {
            (track, Some(target_offset))
        };
        let src_stem = src_track.stem(&target_class).expect("checked above");
        let multi_with = if cfg.multi_source && rng.gen_range(0.0..1.0) < cfg.multi_source_prob {
            let others: Vec<&(String, AudioClip)> = src_track
                .stems()
                .iter()
                .filter(|(c, _)| c != &target_class)
                .collect();
            if others.is_empty() {
                None
            } else {
                Some(others[rng.gen_range(0..others.len())].0.clone())
            }
        } else {
            None
        };
        let source: AudioClip = match &multi_with {
            // Mix the extra instrument at unity gain before extraction.
            Some(c) => AudioClip::mix(&[src_stem, src_track.stem(c).unwrap()])?,
            None => src_stem.clone(),
        };
        let off = draw_offset(&source, cfg.chunk_len, avoid, rng, "positive example")?;
        positives.push(chunk_at(&source, off, cfg.chunk_len));
        pos_prov.push((src_track.id.clone(), off, multi_with));
    }

    // Negative examples: non-target instruments present in the mixture.
    let mut negatives = Vec::new();
    let mut neg_prov = Vec::new();
    if cfg.use_negatives {
        let others: Vec<&(String, AudioClip)> = track
            .stems()
            .iter()
            .filter(|(c, _)| c != &target_class)
            .collect();
        if others.is_empty() {
            return Err(Error::Sampling(format!(
                "negative examples requested but the mixture only contains '{target_class}'"
            )));
        }
        for _ in 0..cfg.n_shots {
            let (class, stem) = others[rng.gen_range(0..others.len())];
            let off = draw_offset(stem, cfg.chunk_len, None, rng, "negative example")?;
            negatives.push(chunk_at(stem, off, cfg.chunk_len));
            neg_prov.push((class.clone(), off));
        }
    }

    Ok(TrainingExample {
        mixture,
        target,
        target_class: target_class.clone(),
        positive_examples: positives,
        negative_examples: negatives,
        provenance: Provenance {
            track_id: track.id.clone(),
            target_offset,
            mixture_classes: track.classes().iter().map(|s| s.to_string()).collect(),
            positives: pos_prov,
            negatives: neg_prov,
        },
    })
}
