//! Single-file checkpoint format: a magic tag, a JSON header describing
//! configs and the tensor index, then named little-endian float32 tensors.
//! Loading validates every shape against the configs and fails loudly.

use super::{ConditioningMode, Model, UNetConfig};
use crate::conditioning::{EncoderConfig, InstrumentVocabulary};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, HasParams};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FSSEP\x00\x01\x00";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    unet_config: UNetConfig,
    encoder_config: EncoderConfig,
    conditioning_mode: ConditioningMode,
    vocabulary: Vec<String>,
    stft_config: StftConfig,
    sample_rate: u32,
    chunk_samples: usize,
    step: u64,
    adam_t: Option<u64>,
    tensors: Vec<TensorMeta>,
}

fn collect_tensors(model: &mut Model, adam: Option<&Adam>) -> Vec<(String, ArrayD<f64>)> {
    let mut out: Vec<(String, ArrayD<f64>)> = Vec::new();
    model.visit_params("", &mut |name, p| out.push((name, p.value.clone())));
    model.visit_buffers("", &mut |name, b| out.push((format!("buf.{name}"), b.clone())));
    if let Some(opt) = adam {
        for (name, (m, v)) in &opt.state {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
    }
    out
}

/// Serializes the model (and optionally optimizer state) to one file.
pub fn save(model: &mut Model, adam: Option<&Adam>, path: &Path) -> Result<()> {
    let tensors = collect_tensors(model, adam);
    let header = Header {
        format_version: 1,
        unet_config: model.unet.cfg,
        encoder_config: model.encoder_cfg,
        conditioning_mode: model.mode,
        vocabulary: model.vocab.names().to_vec(),
        stft_config: model.stft_cfg,
        sample_rate: model.sample_rate,
        chunk_samples: model.chunk_samples,
        step: model.step,
        adam_t: adam.map(|a| a.t),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, t) in &tensors {
        for v in t.iter() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Loads a checkpoint; returns the model and, if present, the saved Adam
/// state (moments and step counter) keyed by parameter name.
pub fn load(path: &Path) -> Result<(Model, Option<Adam>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }

    let mut data: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        f.read_exact(&mut raw).map_err(|_| {
            Error::Checkpoint(format!("truncated tensor data for '{}'", meta.name))
        })?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let arr = ArrayD::from_shape_vec(meta.shape.clone(), vals)
            .map_err(|e| Error::Checkpoint(format!("tensor '{}': {e}", meta.name)))?;
        if data.insert(meta.name.clone(), arr).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor '{}'", meta.name)));
        }
    }

    // Rebuild the skeleton; the RNG is irrelevant since every parameter is
    // overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(
        header.conditioning_mode,
        header.unet_config,
        header.encoder_config,
        InstrumentVocabulary::new(header.vocabulary.clone())?,
        header.stft_config,
        header.sample_rate,
        header.chunk_samples,
        &mut rng,
    )?;
    model.step = header.step;

    let mut missing: Vec<String> = Vec::new();
    let mut err: Option<Error> = None;
    model.visit_params("", &mut |name, p| {
        match data.remove(&name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t,
            Some(t) => {
                err.get_or_insert(Error::Checkpoint(format!(
                    "tensor '{name}' shape {:?} != expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            None => missing.push(name),
        }
    });
    model.visit_buffers("", &mut |name, b| {
        let key = format!("buf.{name}");
        match data.remove(&key) {
            Some(t) if t.shape() == b.shape() => *b = t,
            Some(t) => {
                err.get_or_insert(Error::Checkpoint(format!(
                    "tensor '{key}' shape {:?} != expected {:?}",
                    t.shape(),
                    b.shape()
                )));
            }
            None => missing.push(key),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing tensors: {missing:?}")));
    }

    let adam = if let Some(t) = header.adam_t {
        let mut state: BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)> = BTreeMap::new();
        let keys: Vec<String> = data
            .keys()
            .filter_map(|k| k.strip_prefix("adam.m.").map(str::to_string))
            .collect();
        for k in keys {
            let m = data.remove(&format!("adam.m.{k}")).unwrap();
            let v = data.remove(&format!("adam.v.{k}")).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for '{k}' missing second moment"))
            })?;
            state.insert(k, (m, v));
        }
        let mut adam = Adam::new(0.0); // lr is set by the training config
        adam.t = t;
        adam.state = state;
        Some(adam)
    } else {
        None
    };
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensors in file: {:?}",
            data.keys().collect::<Vec<_>>()
        )));
    }
    Ok((model, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::EncoderConfig;
    use crate::dsp::{AudioClip, Window};
    use rand::Rng;

    fn small_model(mode: ConditioningMode) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        Model::new(
            mode,
            UNetConfig { depth: 2, base_channels: 2, kernel: 5, leaky_slope: 0.2, in_freq: 16, in_frames: 16 },
            EncoderConfig { blocks: 2, filters: 4, kernel: 3, pool: 2, input_bands: 16 },
            InstrumentVocabulary::new(vec!["x".into(), "y".into()]).unwrap(),
            StftConfig { fft_size: 32, hop: 8, window: Window::Hann, centered: true },
            22050,
            120,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        for mode in [ConditioningMode::Class, ConditioningMode::FewShot, ConditioningMode::FewShotNeg] {
            let mut model = small_model(mode);
            model.step = 17;
            save(&mut model, None, &path).unwrap();
            let (loaded, adam) = load(&path).unwrap();
            assert!(adam.is_none());
            assert_eq!(loaded.step, 17);
            assert_eq!(loaded.mode, mode);

            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mix =
                AudioClip::new((0..120).map(|_| rng.gen_range(-0.5..0.5)).collect(), 22050)
                    .unwrap();
            let z = match mode {
                ConditioningMode::Class => model.condition_class("y").unwrap(),
                _ => model
                    .condition_examples(&[AudioClip::silence(22050, 22050)], &[])
                    .unwrap(),
            };
            let a = model.separate_chunk(&mix, &z).unwrap();
            let b = loaded.separate_chunk(&mix, &z).unwrap();
            // f32 storage rounds parameters; outputs stay close.
            for (x, y) in a.samples().iter().zip(b.samples()) {
                assert!((x - y).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut model = small_model(ConditioningMode::Class);
        let mut adam = Adam::new(0.001);
        model.visit_params("", &mut |_, p| p.grad.fill(0.5));
        adam.step(&mut model);
        save(&mut model, Some(&adam), &path).unwrap();
        let (_, loaded) = load(&path).unwrap();
        let loaded = loaded.expect("optimizer state present");
        assert_eq!(loaded.t, 1);
        assert_eq!(loaded.state.len(), adam.state.len());
        for (k, (m, v)) in &adam.state {
            let (lm, lv) = &loaded.state[k];
            for (a, b) in m.iter().zip(lm.iter()) {
                assert!((a - b).abs() < 1e-7);
            }
            for (a, b) in v.iter().zip(lv.iter()) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn corrupted_files_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        assert!(matches!(load(&bad), Err(Error::Checkpoint(_)) | Err(Error::Io(_))));

        // Truncated tensor section.
        let path = dir.path().join("ck.bin");
        let mut model = small_model(ConditioningMode::Class);
        save(&mut model, None, &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &full[..full.len() - 100]).unwrap();
        match load(&bad) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected truncation error, got {:?}", other.map(|_| ())),
        }
    }
}
