//! Training: the full forward/backward pipeline through STFT, compression,
//! the masked U-Net, and both loss terms, plus the Adam-driven loop with
//! validation and early stopping.

use crate::conditioning::example_features;
use crate::data::{sample_training_example, MultiTrack, SamplerConfig, TrainingExample};
use crate::dsp::{compress, istft, istft_adjoint, stft, AudioClip, ComplexSpectrogram};
use crate::error::{Error, Result};
use crate::loss::{mag_mae, mag_mae_grad, sdr_loss, sdr_loss_grad, LossConfig};
use crate::model::{
    checkpoint, crop_spec, expand_spec, mask_backward, raw_to_mask, specs_to_input,
    ConditioningMode, Model,
};
use crate::nn::{Adam, HasParams};
use ndarray::{s, Array2, Array4, ArrayD};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    /// Validation cadence in steps.
    pub val_every: u64,
    /// Early stopping: give up after this many validations without
    /// improvement, restoring the best parameters.
    pub patience: u64,
    /// Fraction of tracks held out for validation (seeded shuffle).
    pub val_fraction: f64,
    /// Batches drawn per validation pass.
    pub val_batches: usize,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 0.001,
            max_steps: 10_000,
            val_every: 200,
            patience: 10,
            val_fraction: 0.1,
            val_batches: 4,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.val_every == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, max_steps and val_every must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction {} not in [0, 1)",
                self.val_fraction
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        self.sampler.validate()
    }
}

/// Aggregated loss numbers for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub total: f64,
    pub sdr_term: f64,
    pub mag_mae_term: f64,
    pub silent_targets: usize,
}

/// One structured training-log record (JSON-lines friendly).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub kind: String,
    pub total: f64,
    pub sdr_term: f64,
    pub mag_mae_term: f64,
    pub silent_targets: usize,
}

/// Everything the optimizer step needs after gradients are accumulated:
/// batch-norm caches to fold into running statistics.
pub struct StepArtifacts {
    pub stats: BatchStats,
    unet_cache: crate::model::UNetCache,
    enc_cache: Option<crate::conditioning::EncoderCache>,
}

fn wrap_spec(data: Array2<Complex64>, like: &ComplexSpectrogram) -> ComplexSpectrogram {
    ComplexSpectrogram {
        data,
        config: like.config,
        sample_rate: like.sample_rate,
        n_samples: like.n_samples,
    }
}

/// Gradient of decompress (radial expm1(m)/m gain) at input z, given the
/// gradient g on its output; real-pair convention.
fn decompress_grad(z: Complex64, g: Complex64) -> Complex64 {
    let m = z.norm();
    if m < 1e-12 {
        return g;
    }
    let f = m.exp_m1() / m;
    let fp = (m.exp() * m - m.exp_m1()) / (m * m);
    let dot = g.re * z.re + g.im * z.im;
    Complex64::new(
        f * g.re + (fp / m) * z.re * dot,
        f * g.im + (fp / m) * z.im * dot,
    )
}

struct ConditioningForward {
    z_batch: Array2<f64>,
    enc_cache: Option<crate::conditioning::EncoderCache>,
    /// Stacked feature maps fed to the encoder (positives then negatives).
    n_pos: usize,
    n_neg: usize,
    pos_agg: Array2<f64>,
    fuse_cat: Option<Array2<f64>>,
}

fn condition_batch(
    model: &Model,
    batch: &[TrainingExample],
    training: bool,
) -> Result<ConditioningForward> {
    let n = batch.len();
    if model.mode == ConditioningMode::Class {
        let dim = model.vocab.len();
        let mut z = Array2::zeros((n, dim));
        for (i, ex) in batch.iter().enumerate() {
            let oh = model.condition_class(&ex.target_class)?;
            z.row_mut(i).assign(&oh.values);
        }
        return Ok(ConditioningForward {
            z_batch: z,
            enc_cache: None,
            n_pos: 0,
            n_neg: 0,
            pos_agg: Array2::zeros((0, 0)),
            fuse_cat: None,
        });
    }

    let enc = model
        .encoder
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("few-shot mode without an encoder".into()))?;
    let n_pos = batch[0].positive_examples.len();
    let n_neg = batch[0].negative_examples.len();
    if n_pos == 0 {
        return Err(Error::InvalidConfig("few-shot training needs positive examples".into()));
    }
    if n_neg > 0 && model.fuse.is_none() {
        return Err(Error::InvalidConfig(
            "negative examples require a few-shot+neg checkpoint".into(),
        ));
    }
    if model.mode == ConditioningMode::FewShotNeg && n_neg == 0 {
        return Err(Error::InvalidConfig(
            "few-shot+neg training needs negative examples".into(),
        ));
    }
    for ex in batch {
        if ex.positive_examples.len() != n_pos || ex.negative_examples.len() != n_neg {
            return Err(Error::ShapeMismatch(
                "all batch items must have the same example counts".into(),
            ));
        }
    }

    // Stack every example's mel features into one encoder batch so batch
    // normalization sees consistent statistics: positives first, then
    // negatives.
    let mut feats: Vec<Array2<f64>> = Vec::with_capacity(n * (n_pos + n_neg));
    for ex in batch {
        for clip in &ex.positive_examples {
            feats.push(example_features(clip, &model.stft_cfg, &model.mel)?);
        }
    }
    for ex in batch {
        for clip in &ex.negative_examples {
            feats.push(example_features(clip, &model.stft_cfg, &model.mel)?);
        }
    }
    let (bands, frames) = feats[0].dim();
    let mut x = Array4::zeros((feats.len(), 1, bands, frames));
    for (i, f) in feats.iter().enumerate() {
        if f.dim() != (bands, frames) {
            return Err(Error::ShapeMismatch(
                "conditioning examples must share a length at training time".into(),
            ));
        }
        x.slice_mut(s![i, 0, .., ..]).assign(f);
    }
    let (emb, cache) = enc.forward(&x, training);
    let dim = emb.ncols();

    let mut pos_agg = Array2::zeros((n, dim));
    for i in 0..n {
        for k in 0..n_pos {
            let row = emb.row(i * n_pos + k);
            pos_agg.row_mut(i).zip_mut_with(&row, |a, b| *a += b / n_pos as f64);
        }
    }
    let mut neg_agg = Array2::zeros((n, dim));
    if n_neg > 0 {
        let base = n * n_pos;
        for i in 0..n {
            for k in 0..n_neg {
                let row = emb.row(base + i * n_neg + k);
                neg_agg.row_mut(i).zip_mut_with(&row, |a, b| *a += b / n_neg as f64);
            }
        }
    }

    let (z_batch, fuse_cat) = if n_neg > 0 {
        let fuse = model.fuse.as_ref().expect("checked above");
        let (z, cat) = fuse.forward(&pos_agg, &neg_agg);
        (z, Some(cat))
    } else {
        (pos_agg.clone(), None)
    };
    Ok(ConditioningForward {
        z_batch,
        enc_cache: Some(cache),
        n_pos,
        n_neg,
        pos_agg,
        fuse_cat,
    })
}

struct BatchForward {
    stats: BatchStats,
    cond: ConditioningForward,
    unet_cache: crate::model::UNetCache,
    raw: Array4<f64>,
    cropped_mix: Vec<Array2<Complex64>>,
    target_cropped: Vec<Array2<Complex64>>,
    masked: Vec<Array2<Complex64>>,
    full_like: Vec<ComplexSpectrogram>,
    estimates: Vec<AudioClip>,
}

fn forward_batch(
    model: &Model,
    batch: &[TrainingExample],
    loss_cfg: &LossConfig,
    training: bool,
) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let cfg = &model.unet.cfg;
    let mut cropped_mix = Vec::with_capacity(batch.len());
    let mut target_cropped = Vec::with_capacity(batch.len());
    let mut full_like = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.mixture.len() != model.chunk_samples || ex.target.len() != model.chunk_samples {
            return Err(Error::ShapeMismatch(format!(
                "training chunks must be {} samples, got mixture {} / target {}",
                model.chunk_samples,
                ex.mixture.len(),
                ex.target.len()
            )));
        }
        let mix_comp = compress(&stft(&ex.mixture, &model.stft_cfg)?);
        let tgt_comp = compress(&stft(&ex.target, &model.stft_cfg)?);
        cropped_mix.push(crop_spec(&mix_comp, cfg.in_freq, cfg.in_frames)?);
        target_cropped.push(crop_spec(&tgt_comp, cfg.in_freq, cfg.in_frames)?);
        full_like.push(mix_comp);
    }

    let cond = condition_batch(model, batch, training)?;
    let (gamma, beta) = model.film_gen.forward(&cond.z_batch)?;
    let x = specs_to_input(&cropped_mix, cfg.in_freq, cfg.in_frames)?;
    let (raw, unet_cache) = model.unet.forward(&x, &gamma, &beta, training)?;
    let masks = raw_to_mask(&raw);

    let mut masked = Vec::with_capacity(batch.len());
    let mut estimates = Vec::with_capacity(batch.len());
    let (mut sdr_sum, mut mae_sum, mut silent) = (0.0, 0.0, 0usize);
    for (i, ex) in batch.iter().enumerate() {
        let m = &cropped_mix[i] * &masks[i];
        let like = &full_like[i];
        let est_spec = crate::dsp::decompress(&wrap_spec(
            expand_spec(&m, like.freq_bins(), like.n_frames()),
            like,
        ));
        let estimate = istft(&est_spec)?;
        let (sdr, is_silent) = sdr_loss(&estimate, &ex.target, loss_cfg.epsilon)?;
        let mae = mag_mae(
            &wrap_spec(m.clone(), like),
            &wrap_spec(target_cropped[i].clone(), like),
        )?;
        sdr_sum += sdr;
        mae_sum += mae;
        silent += is_silent as usize;
        masked.push(m);
        estimates.push(estimate);
    }
    let n = batch.len() as f64;
    let stats = BatchStats {
        total: (loss_cfg.w_sdr * sdr_sum + loss_cfg.w_mae * mae_sum) / n,
        sdr_term: sdr_sum / n,
        mag_mae_term: mae_sum / n,
        silent_targets: silent,
    };
    Ok(BatchForward {
        stats,
        cond,
        unet_cache,
        raw,
        cropped_mix,
        target_cropped,
        masked,
        full_like,
        estimates,
    })
}

/// Forward in inference mode; used for validation.
pub fn batch_loss(
    model: &Model,
    batch: &[TrainingExample],
    loss_cfg: &LossConfig,
) -> Result<BatchStats> {
    Ok(forward_batch(model, batch, loss_cfg, false)?.stats)
}

/// Training-mode forward (batch statistics in the batch norms) without
/// gradient accumulation; the finite-difference counterpart of
/// [`loss_and_grad`].
pub fn training_loss(
    model: &Model,
    batch: &[TrainingExample],
    loss_cfg: &LossConfig,
) -> Result<BatchStats> {
    Ok(forward_batch(model, batch, loss_cfg, true)?.stats)
}

/// Full forward/backward over one batch in training mode. Parameter
/// gradients of the mean loss are accumulated into the model; the returned
/// artifacts carry the batch-norm caches for [`absorb_batch_stats`].
pub fn loss_and_grad(
    model: &mut Model,
    batch: &[TrainingExample],
    loss_cfg: &LossConfig,
) -> Result<StepArtifacts> {
    let fwd = forward_batch(model, batch, loss_cfg, true)?;
    let n = batch.len();
    let cfg = &model.unet.cfg;

    // Gradient on each per-sample mask, complex real-pair convention.
    let mut g_masks: Vec<Array2<Complex64>> = Vec::with_capacity(n);
    for (i, ex) in batch.iter().enumerate() {
        let like = &fwd.full_like[i];
        // SDR term: estimate samples -> istft adjoint -> decompress grad ->
        // crop back to the network region.
        let g_est: Vec<f64> = sdr_loss_grad(&fwd.estimates[i], &ex.target, loss_cfg.epsilon)
            .into_iter()
            .map(|g| g * loss_cfg.w_sdr / n as f64)
            .collect();
        let g_full = istft_adjoint(&g_est, &model.stft_cfg, like.n_samples);
        let full_masked = expand_spec(&fwd.masked[i], like.freq_bins(), like.n_frames());
        let mut g_decomp = Array2::zeros(g_full.raw_dim());
        ndarray::Zip::from(&mut g_decomp)
            .and(&g_full)
            .and(&full_masked)
            .for_each(|out, &g, &z| *out = decompress_grad(z, g));
        let g_sdr = g_decomp.slice(s![..cfg.in_freq, ..cfg.in_frames]).to_owned();

        // Magnitude MAE term, computed directly on the masked compressed
        // spectrogram.
        let g_mae =
            mag_mae_grad(&fwd.masked[i], &fwd.target_cropped[i]).mapv(|g| g * loss_cfg.w_mae / n as f64);

        // masked = cropped_mix * mask, so grad wrt mask is g * conj(X).
        let g_masked = g_sdr + g_mae;
        let mut gm = Array2::zeros(g_masked.raw_dim());
        ndarray::Zip::from(&mut gm)
            .and(&g_masked)
            .and(&fwd.cropped_mix[i])
            .for_each(|out, &g, &x| *out = g * x.conj());
        g_masks.push(gm);
    }

    let g_raw = mask_backward(&fwd.raw, &g_masks);
    let (g_gamma, g_beta) = model.unet.backward(&fwd.unet_cache, &g_raw);
    let g_z = model.film_gen.backward(&fwd.cond.z_batch, &g_gamma, &g_beta);

    if model.mode != ConditioningMode::Class {
        let cond = &fwd.cond;
        let (g_pos, g_neg) = if let Some(cat) = &cond.fuse_cat {
            let fuse = model.fuse.as_mut().expect("fuse head present");
            fuse.backward(cat, &g_z)
        } else {
            (g_z, Array2::zeros((n, cond.pos_agg.ncols())))
        };
        let dim = g_pos.ncols();
        let total = n * (cond.n_pos + cond.n_neg);
        let mut gout = Array2::zeros((total, dim));
        for i in 0..n {
            for k in 0..cond.n_pos {
                gout.row_mut(i * cond.n_pos + k)
                    .assign(&g_pos.row(i).mapv(|v| v / cond.n_pos as f64));
            }
        }
        if cond.n_neg > 0 {
            let base = n * cond.n_pos;
            for i in 0..n {
                for k in 0..cond.n_neg {
                    gout.row_mut(base + i * cond.n_neg + k)
                        .assign(&g_neg.row(i).mapv(|v| v / cond.n_neg as f64));
                }
            }
        }
        let enc = model.encoder.as_mut().expect("encoder present");
        enc.backward(cond.enc_cache.as_ref().expect("training cache"), &gout);
    }

    Ok(StepArtifacts { stats: fwd.stats, unet_cache: fwd.unet_cache, enc_cache: fwd.cond.enc_cache })
}

/// Folds the batch statistics from a completed step into the running
/// batch-norm averages.
pub fn absorb_batch_stats(model: &mut Model, art: &StepArtifacts) {
    model.unet.absorb_bn(&art.unet_cache);
    if let (Some(enc), Some(cache)) = (model.encoder.as_mut(), &art.enc_cache) {
        enc.absorb_bn(cache);
    }
}

/// Where to persist checkpoints during training; both optional.
#[derive(Debug, Clone, Default)]
pub struct TrainPaths {
    pub best: Option<PathBuf>,
    pub last: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub best_val: f64,
    pub stopped_early: bool,
    /// (step, mean train loss) per step.
    pub train_history: Vec<(u64, f64)>,
    /// (step, validation loss) per validation pass.
    pub val_history: Vec<(u64, f64)>,
}

fn snapshot(model: &mut Model) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| out.push((name, p.value.clone())));
    model.visit_buffers("", &mut |name, b| out.push((format!("buf.{name}"), b.clone())));
    out
}

fn restore(model: &mut Model, snap: &[(String, ArrayD<f64>)]) {
    let map: std::collections::BTreeMap<&str, &ArrayD<f64>> =
        snap.iter().map(|(n, t)| (n.as_str(), t)).collect();
    model.visit_params("", &mut |name, p| {
        p.value = (*map.get(name.as_str()).expect("snapshot covers all params")).clone();
    });
    model.visit_buffers("", &mut |name, b| {
        *b = (*map
            .get(format!("buf.{name}").as_str())
            .expect("snapshot covers all buffers"))
        .clone();
    });
}

/// Splits tracks into train/validation by seeded shuffle. A single-track
/// corpus validates on the training track.
fn split_corpus(
    corpus: &[MultiTrack],
    frac: f64,
    seed: u64,
) -> (Vec<MultiTrack>, Vec<MultiTrack>) {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_511f_u64);
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = ((corpus.len() as f64 * frac).round() as usize).min(corpus.len() - 1);
    if corpus.len() < 2 || n_val == 0 {
        return (corpus.to_vec(), corpus.to_vec());
    }
    let val: Vec<MultiTrack> = idx[..n_val].iter().map(|&i| corpus[i].clone()).collect();
    let train: Vec<MultiTrack> = idx[n_val..].iter().map(|&i| corpus[i].clone()).collect();
    (train, val)
}

fn sample_batch(
    tracks: &[MultiTrack],
    cfg: &SamplerConfig,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingExample>> {
    (0..batch)
        .map(|_| sample_training_example(tracks, cfg, rng))
        .collect()
}

/// The training loop: Adam on the composite loss with periodic validation,
/// early stopping on patience, best-parameter restoration, and optional
/// best/last checkpoint persistence. `on_event` receives one record per
/// step and per validation.
pub fn train_model(
    model: &mut Model,
    corpus: &[MultiTrack],
    cfg: &TrainConfig,
    resume_adam: Option<Adam>,
    paths: &TrainPaths,
    mut on_event: impl FnMut(&LogRecord),
) -> Result<TrainSummary> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Sampling("empty training corpus".into()));
    }
    let (train_tracks, val_tracks) = split_corpus(corpus, cfg.val_fraction, cfg.seed);
    let mut adam = match resume_adam {
        Some(mut a) => {
            a.lr = cfg.learning_rate;
            a
        }
        None => Adam::new(cfg.learning_rate),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(model.step));
    let mut best_val = f64::INFINITY;
    let mut best_snap = snapshot(model);
    let mut strikes = 0u64;
    let mut stopped_early = false;
    let mut train_history = Vec::new();
    let mut val_history = Vec::new();

    let validate = |model: &Model, cfg: &TrainConfig, val_tracks: &[MultiTrack]| -> Result<BatchStats> {
        let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a11_da7e_u64);
        let (mut total, mut sdr, mut mae, mut silent) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..cfg.val_batches.max(1) {
            let batch = sample_batch(val_tracks, &cfg.sampler, cfg.batch_size, &mut vrng)?;
            let s = batch_loss(model, &batch, &cfg.loss)?;
            total += s.total;
            sdr += s.sdr_term;
            mae += s.mag_mae_term;
            silent += s.silent_targets;
        }
        let k = cfg.val_batches.max(1) as f64;
        Ok(BatchStats {
            total: total / k,
            sdr_term: sdr / k,
            mag_mae_term: mae / k,
            silent_targets: silent,
        })
    };

    for _ in 0..cfg.max_steps {
        let batch = sample_batch(&train_tracks, &cfg.sampler, cfg.batch_size, &mut rng)?;
        model.zero_grads();
        let art = loss_and_grad(model, &batch, &cfg.loss)?;
        adam.step(model);
        absorb_batch_stats(model, &art);
        model.step += 1;
        train_history.push((model.step, art.stats.total));
        on_event(&LogRecord {
            step: model.step,
            kind: "train".into(),
            total: art.stats.total,
            sdr_term: art.stats.sdr_term,
            mag_mae_term: art.stats.mag_mae_term,
            silent_targets: art.stats.silent_targets,
        });

        if model.step % cfg.val_every == 0 {
            let vs = validate(model, cfg, &val_tracks)?;
            val_history.push((model.step, vs.total));
            on_event(&LogRecord {
                step: model.step,
                kind: "val".into(),
                total: vs.total,
                sdr_term: vs.sdr_term,
                mag_mae_term: vs.mag_mae_term,
                silent_targets: vs.silent_targets,
            });
            if vs.total < best_val {
                best_val = vs.total;
                best_snap = snapshot(model);
                strikes = 0;
                if let Some(p) = &paths.best {
                    checkpoint::save(model, Some(&adam), p)?;
                }
            } else {
                strikes += 1;
                if strikes >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    if let Some(p) = &paths.last {
        checkpoint::save(model, Some(&adam), p)?;
    }
    // Restore the best validation parameters (the persisted "best" file
    // already matches this state).
    if best_val.is_finite() {
        restore(model, &best_snap);
    }
    Ok(TrainSummary {
        steps_run: model.step,
        best_val,
        stopped_early,
        train_history,
        val_history,
    })
}
