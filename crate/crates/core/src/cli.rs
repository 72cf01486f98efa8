//! Command-line surface: corpus synthesis, training, single-file
//! separation, and corpus evaluation, all driven by one TOML config.

use crate::config::RunConfig;
use crate::data::{generate_synthetic_corpus, load_corpus_dir, MultiTrack};
use crate::dsp::{load_wav_mono, resample, wav::write_wav_f32, AudioClip};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, ConditioningPurity, ConditioningSource};
use crate::model::{checkpoint, ConditioningMode, Model};
use crate::train::{train_model, TrainPaths};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "fewshot-sep", version, about = "Few-shot conditioned musical source separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the deterministic synthetic multitrack corpus.
    Synth(SynthArgs),
    /// Train a separator; writes best and last checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Separate one mixture WAV with a trained checkpoint.
    Separate(SeparateArgs),
    /// Evaluate a checkpoint over a stem corpus; writes a JSON-lines report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output corpus directory (default: the config's corpus_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Conditioning mode: class, few-shot, or few-shot+neg.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ConditioningMode>,
    /// Classes excluded from training targets (repeatable).
    #[arg(long)]
    pub holdout: Vec<String>,
    /// Train with multi-sourced conditioning examples (the "MS" variant).
    #[arg(long)]
    pub multi_source: bool,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mixture WAV to separate.
    #[arg(long)]
    pub input: PathBuf,
    /// Output WAV (written at the input sample rate).
    #[arg(long)]
    pub output: PathBuf,
    /// Target class name (class-conditioned checkpoints).
    #[arg(long = "class")]
    pub class_name: Option<String>,
    /// 1-5 example WAVs of the target instrument (few-shot checkpoints).
    #[arg(long, num_args = 1..)]
    pub examples: Vec<PathBuf>,
    /// Example WAVs of non-target instruments (few-shot+neg checkpoints).
    #[arg(long, num_args = 1..)]
    pub neg_examples: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory (default: the config's corpus_dir).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Target classes to evaluate (default: every class in the corpus).
    #[arg(long)]
    pub classes: Vec<String>,
    #[arg(long)]
    pub n_shots: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Draw conditioning examples from other tracks instead of the mixture's own stems.
    #[arg(long)]
    pub cross_track: bool,
    /// Mix one non-target stem into each conditioning example.
    #[arg(long)]
    pub multi_source: bool,
    /// Also condition on negative examples.
    #[arg(long)]
    pub negatives: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file (default: the config's report_file).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<ConditioningMode, String> {
    match s {
        "class" => Ok(ConditioningMode::Class),
        "few-shot" => Ok(ConditioningMode::FewShot),
        "few-shot+neg" => Ok(ConditioningMode::FewShotNeg),
        other => Err(format!("unknown mode '{other}'; expected class, few-shot, or few-shot+neg")),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Separate(args) => cmd_separate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let out = args.out.unwrap_or_else(|| cfg.paths.corpus_dir.clone());
    let corpus = generate_synthetic_corpus(&cfg.synth)?;
    std::fs::create_dir_all(&out)?;
    let mut class_counts = std::collections::BTreeMap::<String, usize>::new();
    let mut manifest_tracks = Vec::new();
    for track in &corpus {
        let dir = out.join(&track.id);
        std::fs::create_dir_all(&dir)?;
        for (class, clip) in track.stems() {
            write_wav_f32(&dir.join(format!("{class}.wav")), clip)?;
            *class_counts.entry(class.clone()).or_default() += 1;
        }
        manifest_tracks.push(serde_json::json!({
            "id": track.id,
            "classes": track.classes(),
            "samples": track.len_samples(),
            "sample_rate": track.sample_rate(),
        }));
    }
    let manifest = serde_json::json!({
        "spec": cfg.synth,
        "tracks": manifest_tracks,
        "class_counts": class_counts,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} tracks to {}", corpus.len(), out.display());
    Ok(())
}

/// Vocabulary: configured classes, or every class present in the corpus.
fn resolve_classes(cfg: &RunConfig, corpus: &[MultiTrack]) -> Vec<String> {
    if !cfg.classes.is_empty() {
        return cfg.classes.clone();
    }
    let mut names: Vec<String> =
        corpus.iter().flat_map(|t| t.classes()).map(str::to_string).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    names.sort();
    names
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if !args.holdout.is_empty() {
        cfg.sampler.holdout = args.holdout.clone();
    }
    if args.multi_source {
        cfg.sampler.multi_source = true;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.max_steps {
        cfg.training.max_steps = m;
    }
    cfg.sampler.use_negatives = cfg.mode == ConditioningMode::FewShotNeg;
    cfg.validate()?;

    let corpus = load_corpus_dir(&cfg.paths.corpus_dir, &cfg.paths.stem_mapping, cfg.sample_rate)?;
    let (mut model, adam) = match &args.resume {
        Some(p) => {
            let (model, adam) = checkpoint::load(p)?;
            if model.mode != cfg.mode {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint mode {} conflicts with requested mode {}",
                    model.mode.as_str(),
                    cfg.mode.as_str()
                )));
            }
            (model, adam)
        }
        None => {
            let vocab =
                crate::conditioning::InstrumentVocabulary::new(resolve_classes(&cfg, &corpus))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Model::new(
                cfg.mode,
                cfg.unet,
                cfg.encoder,
                vocab,
                cfg.stft,
                cfg.sample_rate,
                cfg.chunk_samples(),
                &mut rng,
            )?;
            (model, None)
        }
    };

    std::fs::create_dir_all(&cfg.paths.checkpoint_dir)?;
    let paths = TrainPaths {
        best: Some(cfg.paths.checkpoint_dir.join("best.ckpt")),
        last: Some(cfg.paths.checkpoint_dir.join("last.ckpt")),
    };
    if let Some(parent) = cfg.paths.log_file.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(true).open(&cfg.paths.log_file)?,
    );
    let summary = train_model(&mut model, &corpus, &cfg.train_config(), adam, &paths, |rec| {
        let line = serde_json::to_string(rec).expect("serializable");
        writeln!(log, "{line}").expect("log writable");
        if rec.kind == "val" {
            eprintln!("step {:>6}  val loss {:.4}", rec.step, rec.total);
        }
    })?;
    log.flush()?;
    println!(
        "trained {} steps (best validation loss {:.4}{}); checkpoints in {}",
        summary.steps_run,
        summary.best_val,
        if summary.stopped_early { ", stopped early" } else { "" },
        cfg.paths.checkpoint_dir.display()
    );
    Ok(())
}

fn load_examples(paths: &[PathBuf], rate: u32) -> Result<Vec<AudioClip>> {
    paths
        .iter()
        .map(|p| {
            let clip = load_wav_mono(p)?;
            if clip.sample_rate() == rate {
                Ok(clip)
            } else {
                resample(&clip, rate)
            }
        })
        .collect()
}

pub fn cmd_separate(args: SeparateArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    // Flag/checkpoint compatibility comes before any audio is read.
    match model.mode {
        ConditioningMode::Class => {
            if args.class_name.is_none() || !args.examples.is_empty() || !args.neg_examples.is_empty()
            {
                return Err(Error::InvalidConfig(
                    "class-conditioned checkpoint: pass --class NAME, not --examples".into(),
                ));
            }
        }
        ConditioningMode::FewShot | ConditioningMode::FewShotNeg => {
            if args.class_name.is_some() {
                return Err(Error::InvalidConfig(format!(
                    "{} checkpoint: pass --examples, not --class",
                    model.mode.as_str()
                )));
            }
            if !(1..=5).contains(&args.examples.len()) {
                return Err(Error::InvalidConfig(format!(
                    "need 1-5 example WAVs, got {}",
                    args.examples.len()
                )));
            }
            if !args.neg_examples.is_empty() && model.mode != ConditioningMode::FewShotNeg {
                return Err(Error::InvalidConfig(
                    "--neg-examples requires a few-shot+neg checkpoint".into(),
                ));
            }
        }
    }
    let conditioning = match model.mode {
        ConditioningMode::Class => model.condition_class(args.class_name.as_deref().unwrap())?,
        _ => {
            let pos = load_examples(&args.examples, model.sample_rate)?;
            let neg = load_examples(&args.neg_examples, model.sample_rate)?;
            model.condition_examples(&pos, &neg)?
        }
    };
    let mix = load_wav_mono(&args.input)?;
    let separated = crate::eval::separate_track(&mix, &conditioning, &model)?;
    write_wav_f32(&args.output, &separated)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let (model, _) = checkpoint::load(&args.checkpoint)?;
    let mut protocol = cfg.eval.clone();
    if let Some(n) = args.n_shots {
        protocol.n_shots = n;
    }
    if let Some(i) = args.iterations {
        protocol.iterations = i;
    }
    if args.cross_track {
        protocol.conditioning_source = ConditioningSource::CrossTrack;
    }
    if args.multi_source {
        protocol.conditioning_purity = ConditioningPurity::MultiSource;
    }
    if args.negatives {
        protocol.use_negatives = true;
    }
    if let Some(s) = args.seed {
        protocol.seed = s;
    }
    protocol.validate()?;
    if protocol.use_negatives && model.mode != ConditioningMode::FewShotNeg {
        return Err(Error::InvalidConfig(
            "--negatives requires a few-shot+neg checkpoint".into(),
        ));
    }

    let corpus_dir = args.corpus.unwrap_or_else(|| cfg.paths.corpus_dir.clone());
    let corpus = load_corpus_dir(&corpus_dir, &cfg.paths.stem_mapping, model.sample_rate)?;
    let classes = if args.classes.is_empty() {
        let mut names: Vec<String> = corpus
            .iter()
            .flat_map(|t| t.classes())
            .map(str::to_string)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        names.sort();
        names
    } else {
        args.classes.clone()
    };
    let report = evaluate_corpus(&corpus, &classes, &model, &protocol)?;

    let report_path = args.report.unwrap_or_else(|| cfg.paths.report_file.clone());
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&report_path, report.to_json_lines())?;
    for c in &report.classes {
        println!(
            "{:<12} tracks {:>3}  mean SDR {:>7.2} dB  median {:>7.2} dB  mean std {:>5.2} dB",
            c.class, c.n_tracks, c.mean_sdr, c.median_sdr, c.mean_std
        );
    }
    println!("report written to {}", report_path.display());
    Ok(())
}

/// Entry point shared by the binary; maps errors to a nonzero exit code.
pub fn main_from_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
