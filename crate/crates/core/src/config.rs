//! Run configuration: one TOML file drives every subcommand. Defaults
//! encode the standard hyperparameters (1024-point FFT, hop 256, 3 s
//! chunks at 22050 Hz, batch 16, learning rate 0.001); unknown keys are
//! rejected.

use crate::conditioning::EncoderConfig;
use crate::data::{SamplerConfig, SynthSpec};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::loss::LossConfig;
use crate::model::{ConditioningMode, UNetConfig};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Optimization-loop knobs; loss and sampler settings live in their own
/// sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub val_every: u64,
    pub patience: u64,
    pub val_fraction: f64,
    pub val_batches: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_steps: t.max_steps,
            val_every: t.val_every,
            patience: t.patience,
            val_fraction: t.val_fraction,
            val_batches: t.val_batches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub log_file: PathBuf,
    pub report_file: PathBuf,
    /// Stem file name -> class name; empty passes file names through.
    pub stem_mapping: BTreeMap<String, String>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("corpus"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_file: PathBuf::from("train_log.jsonl"),
            report_file: PathBuf::from("eval_report.jsonl"),
            stem_mapping: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub mode: ConditioningMode,
    /// Class vocabulary; empty derives it from the corpus when training.
    pub classes: Vec<String>,
    pub stft: StftConfig,
    pub unet: UNetConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub training: TrainingSection,
    pub eval: EvalProtocol,
    pub synth: SynthSpec,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_rate: 22050,
            mode: ConditioningMode::FewShot,
            classes: Vec::new(),
            stft: StftConfig::default(),
            unet: UNetConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            training: TrainingSection::default(),
            eval: EvalProtocol::default(),
            synth: SynthSpec::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Separation/training chunk length in samples; the sampler's chunk
    /// length is the single source of truth.
    pub fn chunk_samples(&self) -> usize {
        self.sampler.chunk_len
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            max_steps: self.training.max_steps,
            val_every: self.training.val_every,
            patience: self.training.patience,
            val_fraction: self.training.val_fraction,
            val_batches: self.training.val_batches,
            loss: self.loss,
            sampler: self.sampler.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.unet.validate()?;
        self.encoder.validate()?;
        self.synth.validate()?;
        self.eval.validate()?;
        self.train_config().validate()?;
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be positive".into()));
        }
        let frames = self.sampler.chunk_len / self.stft.hop + 1;
        if frames < self.unet.in_frames {
            return Err(Error::InvalidConfig(format!(
                "chunk of {} samples yields {} STFT frames but the network consumes {}",
                self.sampler.chunk_len, frames, self.unet.in_frames
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::Window;

    #[test]
    fn defaults_encode_standard_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stft.fft_size, 1024);
        assert_eq!(cfg.stft.hop, 256);
        assert_eq!(cfg.stft.window, Window::Hann);
        assert_eq!(cfg.sample_rate, 22050);
        assert_eq!(cfg.sampler.chunk_len, 3 * 22050);
        assert_eq!(cfg.training.batch_size, 16);
        assert_eq!(cfg.training.learning_rate, 0.001);
        assert_eq!(cfg.sampler.multi_source_prob, 0.5);
        assert_eq!(cfg.eval.iterations, 10);
        assert_eq!(cfg.eval.n_shots, 5);
        assert_eq!(cfg.encoder.embedding_dim(), 512);
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.mode = ConditioningMode::FewShotNeg;
        cfg.sampler.holdout = vec!["air".into()];
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("learning_rate = 0.1").is_err());
        assert!(toml::from_str::<RunConfig>("[training]\nbatch = 4").is_err());
        assert!(toml::from_str::<RunConfig>("[stft]\nfft = 512").is_err());
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let cfg: RunConfig =
            toml::from_str("seed = 3\n[training]\nbatch_size = 4").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.training.batch_size, 4);
        assert_eq!(cfg.training.learning_rate, 0.001);
        assert_eq!(cfg.stft.fft_size, 1024);
    }

    #[test]
    fn chunk_too_short_for_network_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.sampler.chunk_len = 1024;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_reads_file_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 11\nmode = \"class\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.mode, ConditioningMode::Class);
        std::fs::write(&p, "nonsense = true\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
    }
}
