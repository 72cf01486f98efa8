//! The conditioned U-Net: strided-convolution encoder, FiLM-modulated
//! bottleneck, mirrored transpose-convolution decoder with skip connections,
//! and a sigmoid-magnitude complex mask head.

pub mod checkpoint;

use crate::conditioning::{
    aggregate, example_features, mel_filterbank, one_hot, ConditioningEncoder, ConditioningVector,
    EncoderCache, EncoderConfig, FuseHead, InstrumentVocabulary, VectorMode, MIN_EXAMPLE_SECS,
};
use crate::dsp::{
    compress, decompress, istft, stft, AudioClip, ComplexMask, ComplexSpectrogram,
    StftConfig,
};
use crate::error::{Error, Result};
use crate::nn::layers::{leaky_relu, leaky_relu_backward, BatchNorm2d, BnCache, Conv2d,
    ConvTranspose2d, Linear};
use crate::nn::{HasParams, Param};
use ndarray::{s, Array1, Array2, Array4, ArrayD, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Stabilizer inside the mask magnitude r = sqrt(a^2 + b^2 + EPS).
const MASK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub in_freq: usize,
    pub in_frames: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 6, base_channels: 16, kernel: 5, leaky_slope: 0.2, in_freq: 512, in_frames: 256 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("depth and base_channels must be > 0".into()));
        }
        let div = 1usize << self.depth;
        if self.in_freq % div != 0 || self.in_frames % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "input {}x{} not divisible by 2^depth = {}",
                self.in_freq, self.in_frames, div
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig("kernel must be odd".into()));
        }
        Ok(())
    }

    /// Channels at encoder layer i: base_channels * 2^i.
    pub fn channels_at(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.depth - 1)
    }
}

/// Per-channel FiLM scale and shift for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// out[c,f,t] = gamma[c] * features[c,f,t] + beta[c].
pub fn film(features: &ndarray::Array3<f64>, params: &FilmParams) -> Result<ndarray::Array3<f64>> {
    let (c, _, _) = features.dim();
    if params.gamma.len() != c || params.beta.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "film: {} channels vs gamma {} / beta {}",
            c,
            params.gamma.len(),
            params.beta.len()
        )));
    }
    let mut out = features.clone();
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch)
            .mapv_inplace(|v| params.gamma[ch] * v + params.beta[ch]);
    }
    Ok(out)
}

/// Two affine heads mapping a conditioning vector to per-channel gamma and
/// beta. Initialized so gamma = 1 and beta = 0 regardless of z, making FiLM
/// the identity at the start of training.
pub struct FilmGenerator {
    pub gamma_head: Linear,
    pub beta_head: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl FilmGenerator {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            gamma_head: Linear::zeros_with_bias(in_dim, out_dim, 1.0),
            beta_head: Linear::zeros_with_bias(in_dim, out_dim, 0.0),
            in_dim,
            out_dim,
        }
    }

    /// Batched: z [N, in_dim] -> (gamma [N, C], beta [N, C]).
    pub fn forward(&self, z: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if z.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "film_generator: z dim {} vs expected {}",
                z.ncols(),
                self.in_dim
            )));
        }
        Ok((self.gamma_head.forward(z), self.beta_head.forward(z)))
    }

    /// Accumulates head gradients; returns gradient w.r.t. z.
    pub fn backward(
        &mut self,
        z: &Array2<f64>,
        g_gamma: &Array2<f64>,
        g_beta: &Array2<f64>,
    ) -> Array2<f64> {
        let gz1 = self.gamma_head.backward(z, g_gamma);
        let gz2 = self.beta_head.backward(z, g_beta);
        gz1 + gz2
    }

    pub fn params_for(&self, z: &ConditioningVector) -> Result<FilmParams> {
        let zb = z.values.view().insert_axis(Axis(0)).to_owned();
        let (g, b) = self.forward(&zb)?;
        Ok(FilmParams { gamma: g.row(0).to_owned(), beta: b.row(0).to_owned() })
    }
}

impl HasParams for FilmGenerator {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.gamma_head.visit_params(&format!("{prefix}.gamma"), f);
        self.beta_head.visit_params(&format!("{prefix}.beta"), f);
    }
}

struct EncLayer {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct DecLayer {
    tconv: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
}

/// Forward-pass intermediates needed for the backward pass.
pub struct UNetCache {
    enc_inputs: Vec<Array4<f64>>,
    enc_bn: Vec<BnCache>,
    enc_bn_out: Vec<Array4<f64>>,
    /// Encoder activations (post Leaky ReLU), index i at level i.
    enc_act: Vec<Array4<f64>>,
    /// gamma/beta used at the bottleneck, [N, C].
    gamma: Array2<f64>,
    dec_inputs: Vec<Array4<f64>>,
    dec_bn: Vec<BnCache>,
    dec_bn_out: Vec<Array4<f64>>,
}

fn empty_bn_cache() -> BnCache {
    BnCache { xhat: Array4::zeros((0, 0, 0, 0)), mean: Array1::zeros(0), var: Array1::zeros(0) }
}

/// The U-Net backbone. Input is a 2-channel (re, im) compressed spectrogram
/// [N, 2, in_freq, in_frames]; output is the raw 2-channel mask pre-image of
/// the same spatial size.
pub struct UNet {
    encs: Vec<EncLayer>,
    decs: Vec<DecLayer>,
    pub cfg: UNetConfig,
}

impl UNet {
    pub fn new(cfg: UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.depth;
        let pad = cfg.kernel / 2;
        let mut encs = Vec::with_capacity(d);
        for i in 0..d {
            let in_ch = if i == 0 { 2 } else { cfg.channels_at(i - 1) };
            encs.push(EncLayer {
                conv: Conv2d::new(in_ch, cfg.channels_at(i), cfg.kernel, 2, pad, rng),
                bn: BatchNorm2d::new(cfg.channels_at(i)),
            });
        }
        let mut decs = Vec::with_capacity(d);
        for j in 0..d {
            // Level this layer upsamples from: d-1-j. Skip concatenation
            // doubles every decoder input except the first.
            let level = d - 1 - j;
            let in_ch = if j == 0 { cfg.channels_at(level) } else { 2 * cfg.channels_at(level) };
            let out_ch = if j == d - 1 { 2 } else { cfg.channels_at(level - 1) };
            let last = j == d - 1;
            decs.push(DecLayer {
                tconv: ConvTranspose2d::new(in_ch, out_ch, cfg.kernel, 2, pad, 1, rng),
                bn: if last { None } else { Some(BatchNorm2d::new(out_ch)) },
            });
        }
        Ok(Self { encs, decs, cfg })
    }

    /// Batched forward with per-sample FiLM at the bottleneck.
    /// x: [N, 2, F, T]; gamma/beta: [N, bottleneck_channels].
    pub fn forward(
        &self,
        x: &Array4<f64>,
        gamma: &Array2<f64>,
        beta: &Array2<f64>,
        training: bool,
    ) -> Result<(Array4<f64>, UNetCache)> {
        let (n, c, f, t) = x.dim();
        if c != 2 || f != self.cfg.in_freq || t != self.cfg.in_frames {
            return Err(Error::ShapeMismatch(format!(
                "unet input {:?}, expected [N, 2, {}, {}]",
                x.dim(),
                self.cfg.in_freq,
                self.cfg.in_frames
            )));
        }
        let cb = self.cfg.bottleneck_channels();
        if gamma.dim() != (n, cb) || beta.dim() != (n, cb) {
            return Err(Error::ShapeMismatch(format!(
                "film params {:?}/{:?}, expected [{n}, {cb}]",
                gamma.dim(),
                beta.dim()
            )));
        }
        let mut cache = UNetCache {
            enc_inputs: Vec::new(),
            enc_bn: Vec::new(),
            enc_bn_out: Vec::new(),
            enc_act: Vec::new(),
            gamma: gamma.clone(),
            dec_inputs: Vec::new(),
            dec_bn: Vec::new(),
            dec_bn_out: Vec::new(),
        };
        let slope = self.cfg.leaky_slope;
        let mut h = x.clone();
        for l in &self.encs {
            cache.enc_inputs.push(h.clone());
            let y = l.conv.forward(&h);
            let (y, bnc) = if training {
                l.bn.forward_train(&y)
            } else {
                (l.bn.forward_eval(&y), empty_bn_cache())
            };
            cache.enc_bn.push(bnc);
            cache.enc_bn_out.push(y.clone());
            h = leaky_relu(&y, slope);
            cache.enc_act.push(h.clone());
        }
        // FiLM at the bottleneck: per-sample, per-channel affine.
        let mut v = h;
        for ni in 0..n {
            for ch in 0..cb {
                v.slice_mut(s![ni, ch, .., ..])
                    .mapv_inplace(|u| gamma[(ni, ch)] * u + beta[(ni, ch)]);
            }
        }
        let d = self.cfg.depth;
        let mut hd = v;
        for (j, l) in self.decs.iter().enumerate() {
            cache.dec_inputs.push(hd.clone());
            let y = l.tconv.forward(&hd);
            hd = match &l.bn {
                Some(bn) => {
                    let (y, bnc) = if training {
                        bn.forward_train(&y)
                    } else {
                        (bn.forward_eval(&y), empty_bn_cache())
                    };
                    cache.dec_bn.push(bnc);
                    cache.dec_bn_out.push(y.clone());
                    y.mapv(|u| u.max(0.0))
                }
                None => {
                    cache.dec_bn.push(empty_bn_cache());
                    cache.dec_bn_out.push(Array4::zeros((0, 0, 0, 0)));
                    y
                }
            };
            if j < d - 1 {
                let skip = &cache.enc_act[d - 2 - j];
                hd = ndarray::concatenate(Axis(1), &[hd.view(), skip.view()])
                    .unwrap()
                    .as_standard_layout()
                    .to_owned();
            }
        }
        Ok((hd, cache))
    }

    /// Backward from gradients on the raw output. Accumulates parameter
    /// gradients; returns (grad_gamma, grad_beta) each [N, C_bottleneck].
    pub fn backward(
        &mut self,
        cache: &UNetCache,
        gout: &Array4<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = self.cfg.depth;
        let slope = self.cfg.leaky_slope;
        // Gradients flowing into each encoder activation via skips.
        let mut skip_grads: Vec<Option<Array4<f64>>> = vec![None; d];
        let mut g = gout.clone();
        for j in (0..d).rev() {
            if j < d - 1 {
                // Split the concat: first half continues down the decoder,
                // second half feeds the encoder skip.
                let own_ch = self.decs[j].tconv.out_channels();
                let g_own = g.slice(s![.., ..own_ch, .., ..]).to_owned();
                let g_skip = g.slice(s![.., own_ch.., .., ..]).to_owned();
                skip_grads[d - 2 - j] = Some(g_skip);
                g = g_own;
            }
            let l = &mut self.decs[j];
            let g_pre = match &mut l.bn {
                Some(bn) => {
                    let mut gr = g;
                    ndarray::Zip::from(&mut gr).and(&cache.dec_bn_out[j]).for_each(|gi, &v| {
                        if v < 0.0 {
                            *gi = 0.0;
                        }
                    });
                    bn.backward(&cache.dec_bn[j], &gr)
                }
                None => g,
            };
            g = l.tconv.backward(&cache.dec_inputs[j], &g_pre);
        }
        // g is now the gradient on the FiLM output.
        let (n, cb, _, _) = g.dim();
        let bott = &cache.enc_act[d - 1];
        let mut g_gamma = Array2::zeros((n, cb));
        let mut g_beta = Array2::zeros((n, cb));
        let mut g_bott = Array4::zeros(bott.raw_dim());
        for ni in 0..n {
            for ch in 0..cb {
                let gsl = g.slice(s![ni, ch, .., ..]);
                let xsl = bott.slice(s![ni, ch, .., ..]);
                g_gamma[(ni, ch)] = (&gsl * &xsl).sum();
                g_beta[(ni, ch)] = gsl.sum();
                let gm = cache.gamma[(ni, ch)];
                g_bott.slice_mut(s![ni, ch, .., ..]).assign(&gsl.mapv(|v| v * gm));
            }
        }
        let mut g = g_bott;
        for i in (0..d).rev() {
            if let Some(sg) = &skip_grads[i] {
                g += sg;
            }
            let l = &mut self.encs[i];
            let g_bn = leaky_relu_backward(&cache.enc_bn_out[i], &g, slope);
            let g_conv = l.bn.backward(&cache.enc_bn[i], &g_bn);
            g = l.conv.backward(&cache.enc_inputs[i], &g_conv);
        }
        (g_gamma, g_beta)
    }

    /// Folds batch statistics into the running averages after a train step.
    pub fn absorb_bn(&mut self, cache: &UNetCache) {
        for (l, c) in self.encs.iter_mut().zip(&cache.enc_bn) {
            l.bn.absorb(c);
        }
        for (l, c) in self.decs.iter_mut().zip(&cache.dec_bn) {
            if let Some(bn) = &mut l.bn {
                bn.absorb(c);
            }
        }
    }
}

impl HasParams for UNet {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, l) in self.encs.iter_mut().enumerate() {
            l.conv.visit_params(&format!("{prefix}.enc{i}.conv"), f);
            l.bn.visit_params(&format!("{prefix}.enc{i}.bn"), f);
        }
        for (j, l) in self.decs.iter_mut().enumerate() {
            l.tconv.visit_params(&format!("{prefix}.dec{j}.tconv"), f);
            if let Some(bn) = &mut l.bn {
                bn.visit_params(&format!("{prefix}.dec{j}.bn"), f);
            }
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f64>)) {
        for (i, l) in self.encs.iter_mut().enumerate() {
            l.bn.visit_buffers(&format!("{prefix}.enc{i}.bn"), f);
        }
        for (j, l) in self.decs.iter_mut().enumerate() {
            if let Some(bn) = &mut l.bn {
                bn.visit_buffers(&format!("{prefix}.dec{j}.bn"), f);
            }
        }
    }
}

/// Turns raw 2-channel decoder output into per-sample complex masks:
/// r = sqrt(a^2 + b^2 + eps), mask = sigmoid(r) * (a/r, b/r).
pub fn raw_to_mask(raw: &Array4<f64>) -> Vec<Array2<Complex64>> {
    let (n, _, f, t) = raw.dim();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut m = Array2::zeros((f, t));
        for fi in 0..f {
            for ti in 0..t {
                let a = raw[(ni, 0, fi, ti)];
                let b = raw[(ni, 1, fi, ti)];
                m[(fi, ti)] = if a == 0.0 && b == 0.0 {
                    // r -> 0 limit: magnitude sigmoid(0) = 0.5, phase (1, 0).
                    Complex64::new(0.5, 0.0)
                } else {
                    let r = (a * a + b * b + MASK_EPS).sqrt();
                    let sig = 1.0 / (1.0 + (-r).exp());
                    let v = Complex64::new(sig * a / r, sig * b / r);
                    // A saturated sigmoid times a unit vector can round one
                    // ulp past 1; pull it back onto the bound.
                    let m = v.norm();
                    if m > 1.0 {
                        v / m
                    } else {
                        v
                    }
                };
            }
        }
        out.push(m);
    }
    out
}

/// Backward of [`raw_to_mask`]: grad convention re = dJ/dRe(mask),
/// im = dJ/dIm(mask).
pub fn mask_backward(raw: &Array4<f64>, g_mask: &[Array2<Complex64>]) -> Array4<f64> {
    let (n, _, f, t) = raw.dim();
    let mut g = Array4::zeros(raw.raw_dim());
    for ni in 0..n {
        for fi in 0..f {
            for ti in 0..t {
                let a = raw[(ni, 0, fi, ti)];
                let b = raw[(ni, 1, fi, ti)];
                let r2 = a * a + b * b + MASK_EPS;
                let r = r2.sqrt();
                let sig = 1.0 / (1.0 + (-r).exp());
                let u = sig / r;
                // d(sig/r)/dr expanded through r(a,b); k multiplies a_i a_j.
                let k = (sig * (1.0 - sig) * r - sig) / (r2 * r);
                let gre = g_mask[ni][(fi, ti)].re;
                let gim = g_mask[ni][(fi, ti)].im;
                g[(ni, 0, fi, ti)] = gre * (u + a * a * k) + gim * (a * b * k);
                g[(ni, 1, fi, ti)] = gre * (a * b * k) + gim * (u + b * b * k);
            }
        }
    }
    g
}

/// Crops a compressed spectrogram to the network input: drops rows beyond
/// in_freq (the Nyquist bin) and frames beyond in_frames, zero-padding if
/// the clip yields fewer frames.
pub fn crop_spec(spec: &ComplexSpectrogram, in_freq: usize, in_frames: usize) -> Result<Array2<Complex64>> {
    if spec.freq_bins() < in_freq {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, network needs {}",
            spec.freq_bins(),
            in_freq
        )));
    }
    let mut out = Array2::zeros((in_freq, in_frames));
    let t = spec.n_frames().min(in_frames);
    out.slice_mut(s![.., ..t])
        .assign(&spec.data.slice(s![..in_freq, ..t]));
    Ok(out)
}

/// Re-embeds a cropped [in_freq x in_frames] array into the full spectrogram
/// shape, zero-filling the dropped Nyquist row and trailing frames.
pub fn expand_spec(small: &Array2<Complex64>, freq_bins: usize, n_frames: usize) -> Array2<Complex64> {
    let mut out = Array2::zeros((freq_bins, n_frames));
    let f = small.nrows().min(freq_bins);
    let t = small.ncols().min(n_frames);
    out.slice_mut(s![..f, ..t]).assign(&small.slice(s![..f, ..t]));
    out
}

/// Stacks compressed spectrograms into the real network input [N, 2, F, T].
pub fn specs_to_input(
    specs: &[Array2<Complex64>],
    in_freq: usize,
    in_frames: usize,
) -> Result<Array4<f64>> {
    let n = specs.len();
    let mut x = Array4::zeros((n, 2, in_freq, in_frames));
    for (ni, s2) in specs.iter().enumerate() {
        if s2.dim() != (in_freq, in_frames) {
            return Err(Error::ShapeMismatch(format!(
                "spec {:?} vs expected ({in_freq}, {in_frames})",
                s2.dim()
            )));
        }
        for fi in 0..in_freq {
            for ti in 0..in_frames {
                x[(ni, 0, fi, ti)] = s2[(fi, ti)].re;
                x[(ni, 1, fi, ti)] = s2[(fi, ti)].im;
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    Class,
    FewShot,
    #[serde(rename = "few-shot+neg")]
    FewShotNeg,
}

impl ConditioningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Class => "class",
            Self::FewShot => "few-shot",
            Self::FewShotNeg => "few-shot+neg",
        }
    }
}

/// The complete separation model: backbone, FiLM generator, and (in few-shot
/// modes) the example encoder and optional fusion head.
pub struct Model {
    pub unet: UNet,
    pub film_gen: FilmGenerator,
    pub encoder: Option<ConditioningEncoder>,
    pub fuse: Option<FuseHead>,
    pub mode: ConditioningMode,
    pub vocab: InstrumentVocabulary,
    pub stft_cfg: StftConfig,
    pub encoder_cfg: EncoderConfig,
    pub sample_rate: u32,
    /// Fixed chunk length in samples for separate_chunk.
    pub chunk_samples: usize,
    /// Mel filterbank shared by all conditioning examples.
    pub mel: Array2<f64>,
    pub step: u64,
}

impl Model {
    pub fn new(
        mode: ConditioningMode,
        unet_cfg: UNetConfig,
        encoder_cfg: EncoderConfig,
        vocab: InstrumentVocabulary,
        stft_cfg: StftConfig,
        sample_rate: u32,
        chunk_samples: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        stft_cfg.validate()?;
        let z_dim = match mode {
            ConditioningMode::Class => vocab.len(),
            _ => encoder_cfg.embedding_dim(),
        };
        let unet = UNet::new(unet_cfg, rng)?;
        let film_gen = FilmGenerator::new(z_dim, unet_cfg.bottleneck_channels());
        let (encoder, fuse) = match mode {
            ConditioningMode::Class => (None, None),
            ConditioningMode::FewShot => (Some(ConditioningEncoder::new(encoder_cfg, rng)?), None),
            ConditioningMode::FewShotNeg => (
                Some(ConditioningEncoder::new(encoder_cfg, rng)?),
                Some(FuseHead::new(encoder_cfg.embedding_dim(), rng)),
            ),
        };
        let mel = mel_filterbank(encoder_cfg.input_bands, stft_cfg.fft_size, sample_rate);
        Ok(Self {
            unet,
            film_gen,
            encoder,
            fuse,
            mode,
            vocab,
            stft_cfg,
            encoder_cfg,
            sample_rate,
            chunk_samples,
            mel,
            step: 0,
        })
    }

    pub fn z_dim(&self) -> usize {
        match self.mode {
            ConditioningMode::Class => self.vocab.len(),
            _ => self.encoder_cfg.embedding_dim(),
        }
    }

    fn check_vector(&self, z: &ConditioningVector) -> Result<()> {
        let want_mode = match self.mode {
            ConditioningMode::Class => VectorMode::Class,
            _ => VectorMode::FewShot,
        };
        if z.mode != want_mode || z.values.len() != self.z_dim() {
            return Err(Error::ShapeMismatch(format!(
                "conditioning vector dim {} / mode {:?} incompatible with model mode {}",
                z.values.len(),
                z.mode,
                self.mode.as_str()
            )));
        }
        Ok(())
    }

    /// Class-mode conditioning vector for a named instrument.
    pub fn condition_class(&self, class_name: &str) -> Result<ConditioningVector> {
        if self.mode != ConditioningMode::Class {
            return Err(Error::InvalidConfig(
                "class conditioning requires a class-mode checkpoint".into(),
            ));
        }
        one_hot(class_name, &self.vocab)
    }

    /// Embeds one conditioning example through the few-shot encoder
    /// (inference mode).
    pub fn encode_example(&self, example: &AudioClip) -> Result<ConditioningVector> {
        let enc = self.encoder.as_ref().ok_or_else(|| {
            Error::InvalidConfig("checkpoint has no few-shot encoder".into())
        })?;
        if example.duration_secs() < MIN_EXAMPLE_SECS {
            return Err(Error::InvalidAudio(format!(
                "conditioning example is {:.3} s; minimum is {MIN_EXAMPLE_SECS} s",
                example.duration_secs()
            )));
        }
        if example.sample_rate() != self.sample_rate {
            return Err(Error::InvalidAudio(format!(
                "example sample rate {} != model rate {}",
                example.sample_rate(),
                self.sample_rate
            )));
        }
        let feats = example_features(example, &self.stft_cfg, &self.mel)?;
        let (bands, frames) = feats.dim();
        let mut x = Array4::zeros((1, 1, bands, frames));
        x.slice_mut(s![0, 0, .., ..]).assign(&feats);
        let (emb, _) = enc.forward(&x, false);
        Ok(ConditioningVector { values: emb.row(0).to_owned(), mode: VectorMode::FewShot })
    }

    /// Aggregated embedding of positive examples, optionally fused with
    /// negative examples (few-shot+neg mode only).
    pub fn condition_examples(
        &self,
        positives: &[AudioClip],
        negatives: &[AudioClip],
    ) -> Result<ConditioningVector> {
        let pos_vecs: Vec<_> = positives
            .iter()
            .map(|c| self.encode_example(c))
            .collect::<Result<_>>()?;
        let pos = aggregate(&pos_vecs)?;
        if negatives.is_empty() {
            return Ok(pos);
        }
        let fuse = self.fuse.as_ref().ok_or_else(|| {
            Error::InvalidConfig(
                "negative examples require a few-shot+neg checkpoint".into(),
            )
        })?;
        let neg_vecs: Vec<_> = negatives
            .iter()
            .map(|c| self.encode_example(c))
            .collect::<Result<_>>()?;
        let neg = aggregate(&neg_vecs)?;
        self.fuse_pos_neg(&pos, &neg, fuse)
    }

    fn fuse_pos_neg(
        &self,
        pos: &ConditioningVector,
        neg: &ConditioningVector,
        fuse: &FuseHead,
    ) -> Result<ConditioningVector> {
        let dim = self.encoder_cfg.embedding_dim();
        if pos.mode != VectorMode::FewShot
            || neg.mode != VectorMode::FewShot
            || pos.values.len() != dim
            || neg.values.len() != dim
        {
            return Err(Error::ShapeMismatch(
                "fuse_pos_neg: both vectors must be few-shot with the embedding dimension".into(),
            ));
        }
        let p = pos.values.view().insert_axis(Axis(0)).to_owned();
        let n = neg.values.view().insert_axis(Axis(0)).to_owned();
        let (y, _) = fuse.forward(&p, &n);
        Ok(ConditioningVector { values: y.row(0).to_owned(), mode: VectorMode::FewShot })
    }

    /// Inference-mode mask for one compressed spectrogram.
    pub fn unet_forward(
        &self,
        spec_compressed: &ComplexSpectrogram,
        z: &ConditioningVector,
    ) -> Result<ComplexMask> {
        self.check_vector(z)?;
        let cfg = &self.unet.cfg;
        let cropped = crop_spec(spec_compressed, cfg.in_freq, cfg.in_frames)?;
        let x = specs_to_input(&[cropped], cfg.in_freq, cfg.in_frames)?;
        let zb = z.values.view().insert_axis(Axis(0)).to_owned();
        let (gamma, beta) = self.film_gen.forward(&zb)?;
        let (raw, _) = self.unet.forward(&x, &gamma, &beta, false)?;
        let masks = raw_to_mask(&raw);
        ComplexMask::new(masks.into_iter().next().unwrap())
    }

    /// Separates one fixed-length chunk: stft -> compress -> mask ->
    /// apply_mask -> decompress -> istft. Shorter input is zero-padded to
    /// the chunk length; the output always has chunk length.
    pub fn separate_chunk(&self, mix: &AudioClip, z: &ConditioningVector) -> Result<AudioClip> {
        if mix.sample_rate() != self.sample_rate {
            return Err(Error::InvalidAudio(format!(
                "chunk sample rate {} != model rate {}",
                mix.sample_rate(),
                self.sample_rate
            )));
        }
        if mix.len() > self.chunk_samples {
            return Err(Error::InvalidAudio(format!(
                "chunk of {} samples exceeds model chunk length {}",
                mix.len(),
                self.chunk_samples
            )));
        }
        let padded = mix.slice_padded(0, self.chunk_samples);
        let spec = stft(&padded, &self.stft_cfg)?;
        let comp = compress(&spec);
        let mask = self.unet_forward(&comp, z)?;
        let cfg = &self.unet.cfg;
        let cropped = crop_spec(&comp, cfg.in_freq, cfg.in_frames)?;
        let masked = &cropped * &mask.data;
        let full = expand_spec(&masked, comp.freq_bins(), comp.n_frames());
        let masked_spec = ComplexSpectrogram { data: full, ..comp.clone() };
        let out = decompress(&masked_spec);
        istft(&out)
    }
}

impl HasParams for Model {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.unet.visit_params(&format!("{prefix}unet"), f);
        self.film_gen.visit_params(&format!("{prefix}film"), f);
        if let Some(enc) = &mut self.encoder {
            enc.visit_params(&format!("{prefix}encoder"), f);
        }
        if let Some(fuse) = &mut self.fuse {
            fuse.visit_params(&format!("{prefix}fuse"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f64>)) {
        self.unet.visit_buffers(&format!("{prefix}unet"), f);
        if let Some(enc) = &mut self.encoder {
            enc.visit_buffers(&format!("{prefix}encoder"), f);
        }
    }
}

/// Re-exported cache type for training code.
pub type EncoderForwardCache = EncoderCache;
