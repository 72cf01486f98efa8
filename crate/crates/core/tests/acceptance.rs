//! Desk-scale acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture`. The trend
//! criteria train several small models from scratch on a synthetic corpus,
//! so the full suite takes on the order of an hour on one CPU core; models
//! and evaluation reports are shared between criteria.

use fewshot_sep::conditioning::{aggregate, one_hot, EncoderConfig, InstrumentVocabulary};
use fewshot_sep::data::{
    generate_synthetic_corpus, sample_training_example, MultiTrack, SamplerConfig, SynthSpec,
};
use fewshot_sep::dsp::{
    chunk, compress, decompress, istft, overlap_add, stft, AudioClip, StftConfig, Window,
};
use fewshot_sep::eval::{
    compute_sdr, evaluate_corpus, evaluate_track, ConditioningPurity, ConditioningSource,
    CorpusReport, EvalProtocol,
};
use fewshot_sep::loss::LossConfig;
use fewshot_sep::model::{ConditioningMode, Model, UNetConfig};
use fewshot_sep::nn::HasParams;
use fewshot_sep::train::{loss_and_grad, train_model, training_loss, TrainConfig, TrainPaths};
use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

// ---------------------------------------------------------------- scale --

const SAMPLE_RATE: u32 = 22050;
/// 1.5 s chunks: floor(33075/256)+1 = 130 STFT frames, cropped to 128.
const CHUNK: usize = 33075;
// 4500 steps (within the 5000-step criterion budget): the hardest class
// ("keys") clears the 5 dB bar with margin at this point while still below
// it at 1500. Models compared head-to-head share a budget: the multi-source
// and negative variants train MAIN_STEPS like the main model; the two
// holdout models (compared only against each other) train AUX_STEPS.
const MAIN_STEPS: u64 = 4500;
const AUX_STEPS: u64 = 2000;
const HOLDOUT_CLASS: &str = "keys";
const EVAL_SEED: u64 = 7;

fn desk_stft() -> StftConfig {
    StftConfig { fft_size: 512, hop: 256, window: Window::Hann, centered: true }
}

fn desk_unet() -> UNetConfig {
    UNetConfig { depth: 4, base_channels: 4, kernel: 5, leaky_slope: 0.2, in_freq: 256, in_frames: 128 }
}

fn desk_encoder() -> EncoderConfig {
    EncoderConfig { blocks: 4, filters: 8, kernel: 3, pool: 2, input_bands: 64 }
}

fn vocab() -> InstrumentVocabulary {
    InstrumentVocabulary::new(vec!["air".into(), "keys".into(), "sub".into()]).unwrap()
}

static CORPUS: Lazy<Vec<MultiTrack>> = Lazy::new(|| {
    generate_synthetic_corpus(&SynthSpec {
        n_tracks: 40,
        duration_secs: 30.0,
        seed: 1,
        // Dense mixtures: with sparse stems many sampled chunks have the
        // non-target stems silent, so mixture == target there and the
        // unbounded SDR term rewards the identity mask instead of
        // separation.
        events_per_sec: 3.0,
        min_stems: 3,
        max_stems: 3,
        ..SynthSpec::default()
    })
    .unwrap()
});

fn train_tracks() -> &'static [MultiTrack] {
    &CORPUS[..32]
}

fn eval_tracks() -> &'static [MultiTrack] {
    &CORPUS[32..]
}

/// Unseen-class corpus: six classes (two per archetype, adjacent bands) so
/// that holding one out still leaves five conditioning targets to learn
/// from. With only two remaining classes the few-shot model has nothing to
/// generalize across and scores at mixture level on the held-out class.
static CORPUS6: Lazy<Vec<MultiTrack>> = Lazy::new(|| {
    use fewshot_sep::data::{Archetype, SynthClassSpec};
    let class = |name: &str, archetype: Archetype, lo: f64, hi: f64| SynthClassSpec {
        name: name.into(),
        archetype,
        pitch_lo: lo,
        pitch_hi: hi,
    };
    generate_synthetic_corpus(&SynthSpec {
        classes: vec![
            class("sub", Archetype::HarmonicStack, 80.0, 350.0),
            class("growl", Archetype::HarmonicStack, 350.0, 900.0),
            class("keys", Archetype::PluckedDecay, 500.0, 1400.0),
            class("bells", Archetype::PluckedDecay, 1400.0, 3500.0),
            class("hiss", Archetype::FilteredNoise, 1800.0, 3600.0),
            class("air", Archetype::FilteredNoise, 3800.0, 7500.0),
        ],
        n_tracks: 40,
        duration_secs: 30.0,
        seed: 1,
        events_per_sec: 3.0,
        min_stems: 3,
        max_stems: 3,
        ..SynthSpec::default()
    })
    .unwrap()
});

fn vocab6() -> InstrumentVocabulary {
    InstrumentVocabulary::new(
        ["air", "bells", "growl", "hiss", "keys", "sub"].iter().map(|s| s.to_string()).collect(),
    )
    .unwrap()
}

fn train_desk(
    label: &str,
    mode: ConditioningMode,
    steps: u64,
    seed: u64,
    mutate: impl FnOnce(&mut TrainConfig),
) -> Model {
    train_desk_on(label, mode, steps, seed, vocab(), train_tracks(), mutate)
}

fn train_desk_on(
    label: &str,
    mode: ConditioningMode,
    steps: u64,
    seed: u64,
    vocab: InstrumentVocabulary,
    tracks: &[MultiTrack],
    mutate: impl FnOnce(&mut TrainConfig),
) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(
        mode,
        desk_unet(),
        desk_encoder(),
        vocab,
        desk_stft(),
        SAMPLE_RATE,
        CHUNK,
        &mut rng,
    )
    .unwrap();
    let mut cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 0.001,
        max_steps: steps,
        val_every: 250,
        patience: 10,
        val_fraction: 0.1,
        val_batches: 2,
        loss: LossConfig::default(),
        sampler: SamplerConfig {
            n_shots: 3,
            chunk_len: CHUNK,
            use_negatives: mode == ConditioningMode::FewShotNeg,
            ..SamplerConfig::default()
        },
        seed,
    };
    mutate(&mut cfg);
    let t0 = Instant::now();
    train_model(&mut model, tracks, &cfg, None, &TrainPaths::default(), |r| {
        if r.kind == "val" {
            eprintln!("[{label}] step {:>5}  val loss {:>8.3}", r.step, r.total);
        }
    })
    .unwrap();
    eprintln!("[{label}] trained {steps} steps in {:.0} s", t0.elapsed().as_secs_f64());
    model
}

static M_FS: Lazy<Model> =
    Lazy::new(|| train_desk("few-shot", ConditioningMode::FewShot, MAIN_STEPS, 42, |_| {}));
static M_MS: Lazy<Model> = Lazy::new(|| {
    train_desk("multi-source", ConditioningMode::FewShot, MAIN_STEPS, 42, |c| {
        c.sampler.multi_source = true;
    })
});
static M_NEG: Lazy<Model> =
    Lazy::new(|| train_desk("few-shot+neg", ConditioningMode::FewShotNeg, MAIN_STEPS, 42, |_| {}));
static F_HOLD: Lazy<Model> = Lazy::new(|| {
    train_desk_on(
        "few-shot holdout",
        ConditioningMode::FewShot,
        AUX_STEPS,
        42,
        vocab6(),
        &CORPUS6[..32],
        |c| c.sampler.holdout = vec![HOLDOUT_CLASS.into()],
    )
});
static B_HOLD: Lazy<Model> = Lazy::new(|| {
    train_desk_on(
        "baseline holdout",
        ConditioningMode::Class,
        AUX_STEPS,
        42,
        vocab6(),
        &CORPUS6[..32],
        |c| c.sampler.holdout = vec![HOLDOUT_CLASS.into()],
    )
});

fn protocol(n_shots: usize, source: ConditioningSource, purity: ConditioningPurity) -> EvalProtocol {
    EvalProtocol {
        n_shots,
        iterations: 10,
        conditioning_source: source,
        conditioning_purity: purity,
        use_negatives: false,
        seed: EVAL_SEED,
    }
}

fn same_single(n: usize) -> EvalProtocol {
    protocol(n, ConditioningSource::SameTrack, ConditioningPurity::SingleSource)
}

fn all_classes() -> Vec<String> {
    vocab().names().to_vec()
}

fn run_eval(label: &str, model: &Model, p: &EvalProtocol, classes: &[String]) -> CorpusReport {
    let t0 = Instant::now();
    let report = evaluate_corpus(eval_tracks(), classes, model, p).unwrap();
    eprintln!("[eval {label}] {} pairs in {:.0} s", report.tracks.len(), t0.elapsed().as_secs_f64());
    report
}

static R_SAME_N3: Lazy<CorpusReport> =
    Lazy::new(|| run_eval("fs same n3", &M_FS, &same_single(3), &all_classes()));
static R_SAME_N1: Lazy<CorpusReport> =
    Lazy::new(|| run_eval("fs same n1", &M_FS, &same_single(1), &all_classes()));
static R_SAME_N5: Lazy<CorpusReport> =
    Lazy::new(|| run_eval("fs same n5", &M_FS, &same_single(5), &all_classes()));
static R_CROSS_N3: Lazy<CorpusReport> = Lazy::new(|| {
    run_eval(
        "fs cross n3",
        &M_FS,
        &protocol(3, ConditioningSource::CrossTrack, ConditioningPurity::SingleSource),
        &all_classes(),
    )
});
static R_MULTI_N3: Lazy<CorpusReport> = Lazy::new(|| {
    run_eval(
        "fs multi n3",
        &M_FS,
        &protocol(3, ConditioningSource::SameTrack, ConditioningPurity::MultiSource),
        &all_classes(),
    )
});
static R_MS_MULTI_N3: Lazy<CorpusReport> = Lazy::new(|| {
    run_eval(
        "ms multi n3",
        &M_MS,
        &protocol(3, ConditioningSource::SameTrack, ConditioningPurity::MultiSource),
        &all_classes(),
    )
});
static R_NEG_N3: Lazy<CorpusReport> = Lazy::new(|| {
    let mut p = same_single(3);
    p.use_negatives = true;
    run_eval("neg same n3", &M_NEG, &p, &all_classes())
});

fn class_mean(report: &CorpusReport, class: &str) -> f64 {
    report.classes.iter().find(|c| c.class == class).expect("class present").mean_sdr
}

fn overall_mean(report: &CorpusReport) -> f64 {
    let n = report.tracks.len() as f64;
    report.tracks.iter().map(|t| t.mean).sum::<f64>() / n
}

fn mean_std(report: &CorpusReport) -> f64 {
    let n = report.tracks.len() as f64;
    report.tracks.iter().map(|t| t.std).sum::<f64>() / n
}

/// Mean SDR of the raw mixture against the reference stem per class,
/// over the evaluation tracks.
fn mixture_baseline(class: &str) -> f64 {
    let mut scores = Vec::new();
    for track in eval_tracks() {
        if let Some(stem) = track.stem(class) {
            let (sdr, _) = compute_sdr(&track.mixture(), stem).unwrap();
            scores.push(sdr);
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {criterion} ({name}): {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

// ---------------------------------------------------------- criterion 1 --

#[test]
fn c01_dsp_invariants() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_stft = 0.0f64;
    let mut worst_comp = 0.0f64;
    let mut worst_ola = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(900..40_000);
        let clip =
            AudioClip::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), SAMPLE_RATE).unwrap();
        let cfg = desk_stft();

        let spec = stft(&clip, &cfg).unwrap();
        let back = istft(&spec).unwrap();
        let e = clip
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_stft = worst_stft.max(e);

        let rt = decompress(&compress(&spec));
        let ec = spec
            .data
            .iter()
            .zip(rt.data.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        worst_comp = worst_comp.max(ec);

        let chunks = chunk(&clip, 8000, 0.5).unwrap();
        let rec = overlap_add(&chunks, clip.len()).unwrap();
        let eo = clip
            .samples()
            .iter()
            .zip(rec.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_ola = worst_ola.max(eo);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_stft < 1e-6 && worst_comp < 1e-9 && worst_ola < 1e-9 && secs < 60.0;
    report(
        1,
        "DSP invariants",
        pass,
        &format!(
            "stft round-trip {worst_stft:.2e} (<1e-6), compress {worst_comp:.2e} (<1e-9), \
             overlap-add {worst_ola:.2e} (<1e-9), {secs:.1} s (<60 s)"
        ),
    );
}

// ---------------------------------------------------------- criterion 2 --

fn miniature_model(mode: ConditioningMode, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(
        mode,
        UNetConfig { depth: 2, base_channels: 2, kernel: 5, leaky_slope: 0.2, in_freq: 16, in_frames: 16 },
        EncoderConfig { blocks: 2, filters: 4, kernel: 3, pool: 2, input_bands: 16 },
        vocab(),
        StftConfig { fft_size: 32, hop: 8, window: Window::Hann, centered: true },
        SAMPLE_RATE,
        120,
        &mut rng,
    )
    .unwrap()
}

fn miniature_batch(negatives: bool) -> Vec<fewshot_sep::data::TrainingExample> {
    let corpus = generate_synthetic_corpus(&SynthSpec {
        n_tracks: 3,
        duration_secs: 1.0,
        min_stems: 3,
        max_stems: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = SamplerConfig {
        n_shots: 2,
        chunk_len: 120,
        use_negatives: negatives,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    (0..2).map(|_| sample_training_example(&corpus, &cfg, &mut rng).unwrap()).collect()
}

/// Worst relative error between analytic and central finite-difference
/// gradients over three probes of every parameter tensor.
fn max_grad_error(mode: ConditioningMode, negatives: bool) -> f64 {
    let mut model = miniature_model(mode, 21);
    let batch = miniature_batch(negatives);
    let loss_cfg = LossConfig::default();
    model.zero_grads();
    loss_and_grad(&mut model, &batch, &loss_cfg).unwrap();

    let mut names = Vec::new();
    model.visit_params("", &mut |name, p| names.push((name, p.value.len())));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, len) in names {
        let probes: Vec<usize> = [0usize, len / 3, len - 1]
            .into_iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for idx in probes {
            let mut analytic = 0.0;
            model.visit_params("", &mut |n2, p| {
                if n2 == name {
                    analytic = p.grad.as_slice().unwrap()[idx];
                }
            });
            let eval_at = |delta: f64, model: &mut Model| -> f64 {
                model.visit_params("", &mut |n2, p| {
                    if n2 == name {
                        p.value.as_slice_mut().unwrap()[idx] += delta;
                    }
                });
                let s = training_loss(model, &batch, &loss_cfg).unwrap().total;
                model.visit_params("", &mut |n2, p| {
                    if n2 == name {
                        p.value.as_slice_mut().unwrap()[idx] -= delta;
                    }
                });
                s
            };
            let fd = (eval_at(h, &mut model) - eval_at(-h, &mut model)) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max((fd - analytic).abs() / denom);
        }
    }
    worst
}

#[test]
fn c02_gradient_checks() {
    let t0 = Instant::now();
    let e_class = max_grad_error(ConditioningMode::Class, false);
    let e_fs = max_grad_error(ConditioningMode::FewShot, false);
    let e_neg = max_grad_error(ConditioningMode::FewShotNeg, true);
    let secs = t0.elapsed().as_secs_f64();
    let worst = e_class.max(e_fs).max(e_neg);
    let pass = worst < 1e-4 && secs < 300.0;
    report(
        2,
        "gradient checks",
        pass,
        &format!(
            "max relative error: class {e_class:.2e}, few-shot {e_fs:.2e}, \
             few-shot+neg {e_neg:.2e} (<1e-4), {secs:.1} s (<300 s)"
        ),
    );
}

// ---------------------------------------------------------- criterion 3 --

#[test]
fn c03_conditioning_properties() {
    let t0 = Instant::now();

    // Aggregation is exactly permutation-invariant.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vecs: Vec<_> = (0..5)
        .map(|_| fewshot_sep::conditioning::ConditioningVector {
            values: ndarray::Array1::from_iter((0..32).map(|_| rng.gen_range(-1.0..1.0))),
            mode: fewshot_sep::conditioning::VectorMode::FewShot,
        })
        .collect();
    let mut perm = vecs.clone();
    perm.reverse();
    perm.swap(1, 3);
    let perm_invariant = aggregate(&vecs).unwrap().values == aggregate(&perm).unwrap().values;

    // One-hot round trip over the full vocabulary.
    let v = InstrumentVocabulary::default_18();
    let one_hot_ok = v.names().iter().all(|name| {
        let z = one_hot(name, &v).unwrap();
        z.values.iter().filter(|&&x| x == 1.0).count() == 1
            && z.values.sum() == 1.0
            && z.values[v.index_of(name).unwrap()] == 1.0
    });

    // Full-size encoder: 512-dim embedding for 0.5 s, 3 s, and 10 s inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::new(
        ConditioningMode::FewShotNeg,
        desk_unet(),
        EncoderConfig::default(),
        vocab(),
        StftConfig::default(),
        SAMPLE_RATE,
        CHUNK,
        &mut rng,
    )
    .unwrap();
    let mut dims_ok = true;
    let clip_for = |secs: f64| {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        AudioClip::new(
            (0..n).map(|i| (0.3 * (i as f64 * 0.05).sin()) + 0.01).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    };
    for secs in [0.5, 3.0, 10.0] {
        let z = model.encode_example(&clip_for(secs)).unwrap();
        dims_ok &= z.values.len() == 512;
    }

    // Positive/negative fusion: 512-dim, nonnegative output.
    let pos = clip_for(1.0);
    let neg = clip_for(2.0);
    let fused = model.condition_examples(&[pos], &[neg]).unwrap();
    let fuse_ok = fused.values.len() == 512 && fused.values.iter().all(|&x| x >= 0.0);

    let secs = t0.elapsed().as_secs_f64();
    let pass = perm_invariant && one_hot_ok && dims_ok && fuse_ok && secs < 60.0;
    report(
        3,
        "conditioning properties",
        pass,
        &format!(
            "permutation-invariant {perm_invariant}, one-hot {one_hot_ok}, \
             embedding dims {dims_ok}, fusion {fuse_ok}, {secs:.1} s (<60 s)"
        ),
    );
}

// ---------------------------------------------------------- criterion 4 --

#[test]
fn c04_desk_scale_training() {
    let t0 = Instant::now();
    Lazy::force(&M_FS);
    let train_secs = t0.elapsed().as_secs_f64();
    let mut detail = String::new();
    let mut pass = true;
    for class in vocab().names() {
        let sdr = class_mean(&R_SAME_N3, class);
        let mix = mixture_baseline(class);
        pass &= sdr >= 5.0 && mix <= 0.0;
        detail.push_str(&format!("{class}: {sdr:.2} dB (mixture {mix:.2} dB); "));
    }
    pass &= train_secs < 7200.0;
    detail.push_str(&format!(
        "{MAIN_STEPS} steps (<=5000), wall {train_secs:.0} s (<7200 s incl. shared eval)"
    ));
    report(4, "desk-scale training SDR >= 5 dB per class", pass, &detail);
}

// ---------------------------------------------------------- criterion 5 --

#[test]
fn c05_shots_vs_variance() {
    let s1 = mean_std(&R_SAME_N1);
    let s5 = mean_std(&R_SAME_N5);
    report(
        5,
        "SDR std shrinks from 1-shot to 5-shot",
        s5 < s1,
        &format!("mean per-track std: n=1 {s1:.3} dB, n=5 {s5:.3} dB"),
    );
}

// ---------------------------------------------------------- criterion 6 --

#[test]
fn c06_unseen_class() {
    let classes = vec![HOLDOUT_CLASS.to_string()];
    let eval6 = &CORPUS6[32..];
    let t0 = Instant::now();
    let r_fs = evaluate_corpus(eval6, &classes, &F_HOLD, &same_single(5)).unwrap();
    let r_base = evaluate_corpus(eval6, &classes, &B_HOLD, &same_single(5)).unwrap();
    eprintln!("[eval holdout] {} + {} pairs in {:.0} s", r_fs.tracks.len(), r_base.tracks.len(), t0.elapsed().as_secs_f64());
    let fs = class_mean(&r_fs, HOLDOUT_CLASS);
    let base = class_mean(&r_base, HOLDOUT_CLASS);
    report(
        6,
        "unseen class: few-shot beats class baseline by >= 3 dB",
        fs >= base + 3.0,
        &format!("held-out '{HOLDOUT_CLASS}': few-shot {fs:.2} dB vs baseline {base:.2} dB"),
    );
}

// ---------------------------------------------------------- criterion 7 --

#[test]
fn c07_conditioning_constraints() {
    let same = overall_mean(&R_SAME_N3);
    let cross = overall_mean(&R_CROSS_N3);
    let mix: f64 = {
        let names = vocab();
        let ms: Vec<f64> = names.names().iter().map(|c| mixture_baseline(c)).collect();
        ms.iter().sum::<f64>() / ms.len() as f64
    };
    let ordering_ok = cross < same && cross > mix;

    let multi = overall_mean(&R_MULTI_N3);
    let degraded = multi < same;
    let mut recovered = 0;
    let mut per_class = String::new();
    for class in vocab().names() {
        let gain = class_mean(&R_MS_MULTI_N3, class) - class_mean(&R_MULTI_N3, class);
        if gain >= 1.0 {
            recovered += 1;
        }
        per_class.push_str(&format!("{class} +{gain:.2} dB, "));
    }
    let pass = ordering_ok && degraded && recovered >= 2;
    report(
        7,
        "conditioning constraints",
        pass,
        &format!(
            "same {same:.2} > cross {cross:.2} > mixture {mix:.2} dB ({ordering_ok}); \
             multi-source degrades to {multi:.2} dB ({degraded}); \
             MS recovery {per_class}>= 1 dB on {recovered}/3 classes"
        ),
    );
}

// ---------------------------------------------------------- criterion 8 --

#[test]
fn c08_negative_conditioning() {
    let mut wins = 0;
    let mut detail = String::new();
    for class in vocab().names() {
        let pos_only = class_mean(&R_SAME_N3, class);
        let with_neg = class_mean(&R_NEG_N3, class);
        // "matches or exceeds" with a 0.1 dB tolerance on "matches".
        if with_neg >= pos_only - 0.1 {
            wins += 1;
        }
        detail.push_str(&format!("{class}: +neg {with_neg:.2} vs {pos_only:.2} dB; "));
    }
    detail.push_str(&format!("{wins}/3 classes match or exceed"));
    report(8, "negative conditioning matches positive-only on >= 2 classes", wins >= 2, &detail);
}

// ---------------------------------------------------------- criterion 9 --

#[test]
fn c09_sdr_oracle() {
    let rate = 8000u32;
    let secs = 2;
    let n = rate as usize * secs;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let f_ref = rng.gen_range(50..2000) as f64;
        let mut f_noise = rng.gen_range(50..2000) as f64;
        while f_noise == f_ref {
            f_noise = rng.gen_range(50..2000) as f64;
        }
        let alpha = rng.gen_range(0.01..1.0);
        let w = 2.0 * std::f64::consts::PI / rate as f64;
        let reference: Vec<f64> = (0..n).map(|i| (w * f_ref * i as f64).sin()).collect();
        let estimate: Vec<f64> = (0..n)
            .map(|i| (w * f_ref * i as f64).sin() + alpha * (w * f_noise * i as f64).sin())
            .collect();
        let e_ref: f64 = reference.iter().map(|x| x * x).sum();
        let e_err: f64 = reference
            .iter()
            .zip(&estimate)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let brute = 10.0 * (e_ref / e_err).log10();
        let (sdr, _) = compute_sdr(
            &AudioClip::new(estimate, rate).unwrap(),
            &AudioClip::new(reference, rate).unwrap(),
        )
        .unwrap();
        worst = worst.max((sdr - brute).abs());
    }
    report(
        9,
        "SDR oracle equivalence",
        worst < 0.01,
        &format!("max |framewise - brute force| = {worst:.2e} dB over 100 cases (<0.01)"),
    );
}

// --------------------------------------------------------- criterion 10 --

#[test]
fn c10_determinism() {
    // Same seed, same evaluation -> byte-identical scores.
    let track = &eval_tracks()[0];
    let class = track.classes()[0].to_string();
    let p = same_single(3);
    let a = evaluate_track(eval_tracks(), track, &class, &M_FS, &p).unwrap();
    let b = evaluate_track(eval_tracks(), track, &class, &M_FS, &p).unwrap();
    let eval_ok = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();

    // Same seed, same training run -> identical loss trajectory and params.
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = Model::new(
            ConditioningMode::FewShot,
            desk_unet(),
            desk_encoder(),
            vocab(),
            desk_stft(),
            SAMPLE_RATE,
            CHUNK,
            &mut rng,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_steps: 10,
            val_every: 5,
            val_batches: 1,
            sampler: SamplerConfig { n_shots: 2, chunk_len: CHUNK, ..SamplerConfig::default() },
            seed: 5,
            ..TrainConfig::default()
        };
        let summary =
            train_model(&mut model, train_tracks(), &cfg, None, &TrainPaths::default(), |_| {})
                .unwrap();
        let mut params = Vec::new();
        model.visit_params("", &mut |name, p| params.push((name, p.value.clone())));
        (summary.train_history, params)
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    let train_ok = h1 == h2 && p1 == p2;

    report(
        10,
        "determinism",
        eval_ok && train_ok,
        &format!("repeated evaluation identical: {eval_ok}; repeated training identical: {train_ok}"),
    );
}
