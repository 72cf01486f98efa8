//! Full-track separation via chunk/overlap-add, framewise SDR scoring, and
//! the multi-iteration evaluation protocol with its conditioning-constraint
//! matrix.

use crate::conditioning::ConditioningVector;
use crate::data::{sampler::draw_offset, MultiTrack};
use crate::dsp::{chunk, overlap_add, resample, AudioClip};
use crate::error::{Error, Result};
use crate::model::{ConditioningMode, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Reported SDR ceiling for (near-)perfect reconstruction.
pub const SDR_CAP_DB: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningSource {
    SameTrack,
    CrossTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningPurity {
    SingleSource,
    MultiSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub n_shots: usize,
    pub iterations: usize,
    pub conditioning_source: ConditioningSource,
    pub conditioning_purity: ConditioningPurity,
    pub use_negatives: bool,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_shots: 5,
            iterations: 10,
            conditioning_source: ConditioningSource::SameTrack,
            conditioning_purity: ConditioningPurity::SingleSource,
            use_negatives: false,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(1..=5).contains(&self.n_shots) {
            return Err(Error::InvalidConfig(format!("n_shots {} not in 1..=5", self.n_shots)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub track_id: String,
    pub target_class: String,
    /// SDR in dB per evaluation iteration.
    pub per_iteration: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// True when any iteration hit the +60 dB reporting cap.
    pub capped: bool,
}

/// Separates an arbitrary-length mixture: resample to the model rate, chunk
/// with 50% overlap, separate each chunk with one shared conditioning
/// vector, overlap-add, and resample back. Output length equals input
/// length.
pub fn separate_track(
    mix: &AudioClip,
    conditioning: &ConditioningVector,
    model: &Model,
) -> Result<AudioClip> {
    let native = if mix.sample_rate() == model.sample_rate {
        mix.clone()
    } else {
        resample(mix, model.sample_rate)?
    };
    let chunks = chunk(&native, model.chunk_samples, 0.5)?;
    let mut separated = Vec::with_capacity(chunks.len());
    for (offset, c) in &chunks {
        separated.push((*offset, model.separate_chunk(c, conditioning)?));
    }
    let out = overlap_add(&separated, native.len())?;
    let out = if mix.sample_rate() == model.sample_rate {
        out
    } else {
        resample(&out, mix.sample_rate())?
    };
    // Resampling rounds lengths; pin to the input exactly.
    let mut samples = out.into_samples();
    samples.resize(mix.len(), 0.0);
    AudioClip::new(samples, mix.sample_rate())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Framewise SDR: 1 s non-overlapping windows, silent-reference windows
/// excluded, median over windows. Returns the dB value and whether the
/// +60 dB cap was applied.
pub fn compute_sdr(estimate: &AudioClip, reference: &AudioClip) -> Result<(f64, bool)> {
    if estimate.len() != reference.len() || estimate.sample_rate() != reference.sample_rate() {
        return Err(Error::Eval(format!(
            "compute_sdr: {} samples @ {} Hz vs {} samples @ {} Hz",
            estimate.len(),
            estimate.sample_rate(),
            reference.len(),
            reference.sample_rate()
        )));
    }
    let win = reference.sample_rate() as usize;
    let n_windows = (reference.len() / win).max(1);
    let mut scores = Vec::new();
    let mut capped = false;
    for w in 0..n_windows {
        let lo = w * win;
        let hi = ((w + 1) * win).min(reference.len());
        let s = &reference.samples()[lo..hi];
        let e = &estimate.samples()[lo..hi];
        let ref_energy: f64 = s.iter().map(|v| v * v).sum();
        if ref_energy <= 1e-18 {
            continue;
        }
        let dist: f64 = s.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let sdr = 10.0 * (ref_energy / dist.max(1e-300)).log10();
        if sdr >= SDR_CAP_DB {
            capped = true;
            scores.push(SDR_CAP_DB);
        } else {
            scores.push(sdr);
        }
    }
    if scores.is_empty() {
        return Err(Error::Eval("compute_sdr: every reference window is silent".into()));
    }
    Ok((median(&mut scores), capped))
}

/// Draws the conditioning examples for one evaluation iteration per the
/// protocol constraints.
fn draw_conditioning(
    corpus: &[MultiTrack],
    track: &MultiTrack,
    target_class: &str,
    model: &Model,
    protocol: &EvalProtocol,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<ConditioningVector> {
    // Training-length examples, but never below the encoder's minimum.
    let min_len = (crate::conditioning::MIN_EXAMPLE_SECS * model.sample_rate as f64).ceil() as usize;
    let chunk_len = model.chunk_samples.max(min_len);
    let mut positives = Vec::with_capacity(protocol.n_shots);
    for _ in 0..protocol.n_shots {
        let src_track = match protocol.conditioning_source {
            ConditioningSource::SameTrack => track,
            ConditioningSource::CrossTrack => {
                let others: Vec<&MultiTrack> = corpus
                    .iter()
                    .filter(|t| {
                        t.id != track.id
                            && t.stem(target_class).is_some()
                            && t.len_samples() >= chunk_len
                    })
                    .collect();
                if others.is_empty() {
                    return Err(Error::Eval(format!(
                        "cross-track protocol: no other track contains class '{target_class}'"
                    )));
                }
                others[rng.gen_range(0..others.len())]
            }
        };
        let stem = src_track.stem(target_class).ok_or_else(|| {
            Error::Eval(format!("track '{}' has no '{target_class}' stem", src_track.id))
        })?;
        let source = match protocol.conditioning_purity {
            ConditioningPurity::SingleSource => stem.clone(),
            ConditioningPurity::MultiSource => {
                let others: Vec<&(String, AudioClip)> = src_track
                    .stems()
                    .iter()
                    .filter(|(c, _)| c != target_class)
                    .collect();
                if others.is_empty() {
                    stem.clone()
                } else {
                    let (_, other) = others[rng.gen_range(0..others.len())];
                    AudioClip::mix(&[stem, other])?
                }
            }
        };
        let off = draw_offset(&source, chunk_len, None, rng, "conditioning example")?;
        positives.push(source.slice_padded(off, chunk_len).scaled(gain));
    }
    let mut negatives = Vec::new();
    if protocol.use_negatives {
        let others: Vec<&(String, AudioClip)> = track
            .stems()
            .iter()
            .filter(|(c, _)| c != target_class)
            .collect();
        if others.is_empty() {
            return Err(Error::Eval(format!(
                "negative protocol: mixture only contains '{target_class}'"
            )));
        }
        for _ in 0..protocol.n_shots {
            let (_, stem) = others[rng.gen_range(0..others.len())];
            let off = draw_offset(stem, chunk_len, None, rng, "negative example")?;
            negatives.push(stem.slice_padded(off, chunk_len).scaled(gain));
        }
    }
    model.condition_examples(&positives, &negatives)
}

/// Evaluates one (track, class) pair over `protocol.iterations` iterations,
/// drawing fresh conditioning per iteration (few-shot modes) and scoring
/// against the ground-truth stem.
pub fn evaluate_track(
    corpus: &[MultiTrack],
    track: &MultiTrack,
    target_class: &str,
    model: &Model,
    protocol: &EvalProtocol,
) -> Result<TrackScore> {
    protocol.validate()?;
    let reference = track
        .stem(target_class)
        .ok_or_else(|| Error::Eval(format!("track '{}' has no '{target_class}' stem", track.id)))?;
    // Joint peak normalization: mixture and references share one gain.
    let mixture = track.mixture();
    let peak = mixture.peak();
    let gain = if peak > 0.0 { 0.9 / peak } else { 1.0 };
    let mixture = mixture.scaled(gain);
    let reference = reference.scaled(gain);
    if mixture.sample_rate() != model.sample_rate {
        return Err(Error::Eval(format!(
            "track rate {} != model rate {}; resample the corpus first",
            mixture.sample_rate(),
            model.sample_rate
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(
        protocol.seed ^ hash_id(&track.id) ^ hash_id(target_class),
    );
    let mut per_iteration = Vec::with_capacity(protocol.iterations);
    let mut capped = false;
    for _ in 0..protocol.iterations {
        let z = match model.mode {
            ConditioningMode::Class => model.condition_class(target_class)?,
            _ => draw_conditioning(corpus, track, target_class, model, protocol, gain, &mut rng)?,
        };
        let estimate = separate_track(&mixture, &z, model)?;
        let (sdr, c) = compute_sdr(&estimate, &reference)?;
        capped |= c;
        per_iteration.push(sdr);
    }
    let n = per_iteration.len() as f64;
    let mean = per_iteration.iter().sum::<f64>() / n;
    // Exactly zero when every iteration agrees (deterministic conditioning),
    // avoiding rounding dust from the mean subtraction.
    let var = if per_iteration.windows(2).all(|w| w[0] == w[1]) {
        0.0
    } else {
        per_iteration.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    };
    Ok(TrackScore {
        track_id: track.id.clone(),
        target_class: target_class.to_string(),
        per_iteration,
        mean,
        std: var.sqrt(),
        capped,
    })
}

fn hash_id(s: &str) -> u64 {
    // FNV-1a; stable across runs, unlike the default hasher.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub n_tracks: usize,
    /// Mean over tracks of per-track mean SDR.
    pub mean_sdr: f64,
    /// Median over tracks of per-track mean SDR.
    pub median_sdr: f64,
    /// Mean over tracks of per-track std (conditioning variance).
    pub mean_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub tracks: Vec<TrackScore>,
    pub classes: Vec<ClassSummary>,
}

/// Evaluates every (class, track) pair where the track contains the class;
/// summarizes per class with mean-of-track-means and median-of-track-means.
pub fn evaluate_corpus(
    corpus: &[MultiTrack],
    classes: &[String],
    model: &Model,
    protocol: &EvalProtocol,
) -> Result<CorpusReport> {
    if corpus.is_empty() {
        return Err(Error::Eval("empty evaluation corpus".into()));
    }
    let mut tracks = Vec::new();
    let mut classes_out = Vec::new();
    for class in classes {
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for track in corpus {
            if track.stem(class).is_none() {
                continue;
            }
            let score = evaluate_track(corpus, track, class, model, protocol)?;
            means.push(score.mean);
            stds.push(score.std);
            tracks.push(score);
        }
        if means.is_empty() {
            return Err(Error::Eval(format!("no track in the corpus contains class '{class}'")));
        }
        let n = means.len() as f64;
        let mut sorted = means.clone();
        classes_out.push(ClassSummary {
            class: class.clone(),
            n_tracks: means.len(),
            mean_sdr: means.iter().sum::<f64>() / n,
            median_sdr: median(&mut sorted),
            mean_std: stds.iter().sum::<f64>() / n,
        });
    }
    Ok(CorpusReport { tracks, classes: classes_out })
}

impl CorpusReport {
    /// One JSON record per track score plus one summary record per class.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.tracks {
            out.push_str(&serde_json::to_string(t).expect("serializable"));
            out.push('\n');
        }
        for c in &self.classes {
            out.push_str(&serde_json::to_string(c).expect("serializable"));
            out.push('\n');
        }
        out
    }
}
