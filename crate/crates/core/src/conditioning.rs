//! Conditioning vectors: one-hot class lookup (baseline), the few-shot audio
//! encoder with example averaging, and positive/negative fusion.

use crate::dsp::{stft, AudioClip, StftConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{
    relu2, relu2_backward, BatchNorm2d, BnCache, Conv2d, GlobalMaxPoolTime, Linear, MaxPool2d,
};
use crate::nn::{HasParams, Param};
use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ordered, unique list of instrument class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentVocabulary {
    names: Vec<String>,
}

impl InstrumentVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(Error::InvalidConfig(format!("duplicate class name '{n}'")));
            }
        }
        if names.is_empty() {
            return Err(Error::InvalidConfig("empty vocabulary".into()));
        }
        Ok(Self { names })
    }

    /// The paper's 18-class vocabulary.
    pub fn default_18() -> Self {
        Self {
            names: [
                "vocals", "drums", "bass", "guitar", "keyboards", "synthesizer", "strings",
                "woodwinds", "brass", "percussion", "accordion", "banjo", "harmonica", "ukulele",
                "mallets", "pipe organ", "bagpipes", "whistling",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorMode {
    Class,
    FewShot,
}

/// The vector z fed to FiLM.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector {
    pub values: Array1<f64>,
    pub mode: VectorMode,
}

/// One-hot class conditioning.
pub fn one_hot(class_name: &str, vocab: &InstrumentVocabulary) -> Result<ConditioningVector> {
    let idx = vocab.index_of(class_name).ok_or_else(|| Error::UnknownClass {
        name: class_name.to_string(),
        vocab: vocab.names().to_vec(),
    })?;
    let mut values = Array1::zeros(vocab.len());
    values[idx] = 1.0;
    Ok(ConditioningVector { values, mode: VectorMode::Class })
}

/// Elementwise mean of few-shot vectors.
pub fn aggregate(vectors: &[ConditioningVector]) -> Result<ConditioningVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidConfig("aggregate of zero vectors".into()))?;
    let dim = first.values.len();
    let mut sum = Array1::zeros(dim);
    for v in vectors {
        if v.mode != VectorMode::FewShot || v.values.len() != dim {
            return Err(Error::ShapeMismatch(
                "aggregate: all vectors must be few-shot mode with equal dimension".into(),
            ));
        }
        sum += &v.values;
    }
    Ok(ConditioningVector {
        values: sum / vectors.len() as f64,
        mode: VectorMode::FewShot,
    })
}

/// Few-shot conditioning encoder shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    /// Mel bands of the input feature; also the frequency extent.
    pub input_bands: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { blocks: 4, filters: 64, kernel: 3, pool: 2, input_bands: 128 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let div = self.pool.pow(self.blocks as u32);
        if self.input_bands == 0 || self.input_bands % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_bands {} not divisible by pool^blocks {}",
                self.input_bands, div
            )));
        }
        if self.pool != 2 {
            return Err(Error::InvalidConfig("only 2x2 pooling is supported".into()));
        }
        Ok(())
    }

    /// Flattened embedding size: residual bands x filters.
    pub fn embedding_dim(&self) -> usize {
        self.input_bands / self.pool.pow(self.blocks as u32) * self.filters
    }

    /// Frames that must survive the pooling stack.
    pub fn min_frames(&self) -> usize {
        self.pool.pow(self.blocks as u32)
    }
}

/// Minimum conditioning-example duration in seconds.
pub const MIN_EXAMPLE_SECS: f64 = 0.5;

/// Triangular mel filterbank [bands, fft_bins], area-normalized, spanning
/// 0 .. sample_rate/2.
pub fn mel_filterbank(bands: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let bins = fft_size / 2 + 1;
    let to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let from_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let fmax = sample_rate as f64 / 2.0;
    let mel_max = to_mel(fmax);
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| from_mel(mel_max * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_freq = |k: usize| k as f64 * sample_rate as f64 / fft_size as f64;
    let mut fb = Array2::zeros((bands, bins));
    for b in 0..bands {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = bin_freq(k);
            let w = if f <= lo || f >= hi {
                0.0
            } else if f <= mid {
                (f - lo) / (mid - lo).max(1e-12)
            } else {
                (hi - f) / (hi - mid).max(1e-12)
            };
            fb[(b, k)] = w * norm;
        }
    }
    fb
}

/// Log-compressed mel magnitude features of one clip: [bands, frames].
pub fn example_features(
    clip: &AudioClip,
    stft_cfg: &StftConfig,
    mel: &Array2<f64>,
) -> Result<Array2<f64>> {
    let spec = stft(clip, stft_cfg)?;
    let mag = spec.data.mapv(|z| z.norm());
    Ok(mel.dot(&mag).mapv(f64::ln_1p))
}

struct EncoderBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Convolutional example encoder: `blocks` x (conv, batch-norm, ReLU, 2x2
/// max-pool), then a global max-pool over time and a flatten to the
/// embedding.
pub struct ConditioningEncoder {
    blocks: Vec<EncoderBlock>,
    pub cfg: EncoderConfig,
}

pub struct EncoderCache {
    inputs: Vec<Array4<f64>>,
    bn: Vec<BnCache>,
    bn_out: Vec<Array4<f64>>,
    pool_idx: Vec<Array4<usize>>,
    pool_in_dims: Vec<(usize, usize)>,
    time_idx: Array3<usize>,
    time_len: usize,
}

impl ConditioningEncoder {
    pub fn new(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let in_ch = if i == 0 { 1 } else { cfg.filters };
            blocks.push(EncoderBlock {
                conv: Conv2d::new(in_ch, cfg.filters, cfg.kernel, 1, cfg.kernel / 2, rng),
                bn: BatchNorm2d::new(cfg.filters),
            });
        }
        Ok(Self { blocks, cfg })
    }

    /// Batched forward over feature maps [N, 1, bands, frames].
    pub fn forward(&self, feats: &Array4<f64>, training: bool) -> (Array2<f64>, EncoderCache) {
        let mut cache = EncoderCache {
            inputs: Vec::new(),
            bn: Vec::new(),
            bn_out: Vec::new(),
            pool_idx: Vec::new(),
            pool_in_dims: Vec::new(),
            time_idx: Array3::zeros((0, 0, 0)),
            time_len: 0,
        };
        let mut x = feats.clone();
        for b in &self.blocks {
            cache.inputs.push(x.clone());
            let y = b.conv.forward(&x);
            let (y, bn_cache) = if training {
                b.bn.forward_train(&y)
            } else {
                (b.bn.forward_eval(&y), BnCache {
                    xhat: Array4::zeros((0, 0, 0, 0)),
                    mean: Array1::zeros(0),
                    var: Array1::zeros(0),
                })
            };
            cache.bn.push(bn_cache);
            cache.bn_out.push(y.clone());
            let act = y.mapv(|v| v.max(0.0));
            let (_, _, h, w) = act.dim();
            cache.pool_in_dims.push((h, w));
            let (pooled, idx) = MaxPool2d::forward(&act);
            cache.pool_idx.push(idx);
            x = pooled;
        }
        let (_n, _c, _f, t) = x.dim();
        cache.time_len = t;
        let (y3, tidx) = GlobalMaxPoolTime::forward(&x);
        cache.time_idx = tidx;
        let (n, c, f) = y3.dim();
        let emb = y3.into_shape((n, c * f)).unwrap();
        (emb, cache)
    }

    /// Backward from embedding gradients [N, emb]; accumulates parameter
    /// gradients, returns nothing (input features are constants).
    pub fn backward(&mut self, cache: &EncoderCache, gout: &Array2<f64>) {
        let n = gout.nrows();
        let c = self.cfg.filters;
        let f = gout.ncols() / c;
        let g3 = gout.view().into_shape((n, c, f)).unwrap().to_owned();
        let mut g = GlobalMaxPoolTime::backward(&cache.time_idx, &g3, cache.time_len);
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            let (h, w) = cache.pool_in_dims[i];
            let g_act = MaxPool2d::backward(&cache.pool_idx[i], &g, h, w);
            // ReLU backward using the pre-activation sign
            let mut g_bn = g_act;
            ndarray::Zip::from(&mut g_bn).and(&cache.bn_out[i]).for_each(|gi, &v| {
                if v < 0.0 {
                    *gi = 0.0;
                }
            });
            let g_conv = b.bn.backward(&cache.bn[i], &g_bn);
            g = b.conv.backward(&cache.inputs[i], &g_conv);
        }
    }

    pub fn absorb_bn(&mut self, cache: &EncoderCache) {
        for (b, c) in self.blocks.iter_mut().zip(&cache.bn) {
            b.bn.absorb(c);
        }
    }
}

impl HasParams for ConditioningEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params(&format!("{prefix}.block{i}.conv"), f);
            b.bn.visit_params(&format!("{prefix}.block{i}.bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut ArrayD<f64>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.bn.visit_buffers(&format!("{prefix}.block{i}.bn"), f);
        }
    }
}

/// Fuses aggregated positive and negative conditioning vectors:
/// concat -> fully-connected -> ReLU, back to the embedding dimension.
pub struct FuseHead {
    pub linear: Linear,
}

impl FuseHead {
    pub fn new(embedding_dim: usize, rng: &mut impl Rng) -> Self {
        Self { linear: Linear::new(2 * embedding_dim, embedding_dim, rng) }
    }

    pub fn forward(&self, pos: &Array2<f64>, neg: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let cat = ndarray::concatenate(Axis(1), &[pos.view(), neg.view()]).unwrap();
        let pre = self.linear.forward(&cat);
        (relu2(&pre), cat)
    }

    /// Returns gradients w.r.t. (pos, neg).
    pub fn backward(
        &mut self,
        cat: &Array2<f64>,
        gout: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let pre = self.linear.forward(cat);
        let g_pre = relu2_backward(&pre, gout);
        let g_cat = self.linear.backward(cat, &g_pre);
        let half = cat.ncols() / 2;
        (
            g_cat.slice(ndarray::s![.., ..half]).to_owned(),
            g_cat.slice(ndarray::s![.., half..]).to_owned(),
        )
    }
}

impl HasParams for FuseHead {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.linear.visit_params(&format!("{prefix}.linear"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab3() -> InstrumentVocabulary {
        InstrumentVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn one_hot_endpoints_and_roundtrip() {
        let v = vocab3();
        let first = one_hot("a", &v).unwrap();
        assert_eq!(first.values.to_vec(), vec![1.0, 0.0, 0.0]);
        let last = one_hot("c", &v).unwrap();
        assert_eq!(last.values.to_vec(), vec![0.0, 0.0, 1.0]);
        for name in v.names() {
            let oh = one_hot(name, &v).unwrap();
            assert_eq!(oh.values.sum(), 1.0);
            assert_eq!(oh.values.iter().filter(|x| **x != 0.0).count(), 1);
            let argmax = oh
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, v.index_of(name).unwrap());
        }
        match one_hot("zither", &v) {
            Err(Error::UnknownClass { vocab, .. }) => assert_eq!(vocab.len(), 3),
            other => panic!("expected UnknownClass, got {other:?}"),
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(InstrumentVocabulary::new(vec!["x".into(), "x".into()]).is_err());
        assert_eq!(InstrumentVocabulary::default_18().len(), 18);
    }

    fn fs(values: Vec<f64>) -> ConditioningVector {
        ConditioningVector { values: Array1::from_vec(values), mode: VectorMode::FewShot }
    }

    #[test]
    fn aggregate_mean_permutation_invariant_idempotent() {
        let a = fs(vec![1.0, 0.0, 0.0]);
        let b = fs(vec![0.0, 1.0, 0.0]);
        let m = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.values.to_vec(), vec![0.5, 0.5, 0.0]);
        let m2 = aggregate(&[b.clone(), a.clone()]).unwrap();
        assert_eq!(m, m2);
        let single = aggregate(&[a.clone()]).unwrap();
        assert_eq!(single, a);
        // idempotent on replication
        let rep = aggregate(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for (x, y) in rep.values.iter().zip(a.values.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(aggregate(&[]).is_err());
        let class = one_hot("a", &vocab3()).unwrap();
        assert!(aggregate(&[class]).is_err());
    }

    #[test]
    fn encoder_config_dimensional_analysis() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.embedding_dim(), 512); // 128 / 2^4 * 64
        assert!(cfg.validate().is_ok());
        let bad = EncoderConfig { input_bands: 100, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mel_filterbank_covers_spectrum() {
        let fb = mel_filterbank(128, 1024, 22050);
        assert_eq!(fb.dim(), (128, 513));
        // every band has some support
        for b in 0..128 {
            assert!(fb.row(b).sum() > 0.0, "band {b} empty");
        }
        // interior bins are covered by at least one filter
        for k in 2..511 {
            assert!(fb.column(k).sum() > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn encoder_embedding_dim_is_length_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig { blocks: 3, filters: 4, kernel: 3, pool: 2, input_bands: 32 };
        let enc = ConditioningEncoder::new(cfg, &mut rng).unwrap();
        for t in [10usize, 40, 111] {
            let feats = Array4::from_shape_simple_fn((1, 1, 32, t), || rng.gen_range(0.0..1.0));
            let (emb, _) = enc.forward(&feats, false);
            assert_eq!(emb.dim(), (1, cfg.embedding_dim()));
        }
    }

    #[test]
    fn fuse_head_output_nonnegative_and_order_sensitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fuse = FuseHead::new(8, &mut rng);
        let p = Array2::from_shape_simple_fn((2, 8), || rng.gen_range(-1.0..1.0));
        let n = Array2::from_shape_simple_fn((2, 8), || rng.gen_range(-1.0..1.0));
        let (y, _) = fuse.forward(&p, &n);
        assert_eq!(y.dim(), (2, 8));
        assert!(y.iter().all(|v| *v >= 0.0));
        let (y_swapped, _) = fuse.forward(&n, &p);
        assert!(y != y_swapped);
    }
}
