//! RIFF WAV I/O (PCM 16-bit and IEEE float 32-bit, mono or stereo).
//! Multichannel input is downmixed to mono by channel averaging.

use super::AudioClip;
use crate::error::{Error, Result};
use std::path::Path;

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::InvalidAudio(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::InvalidAudio(format!(
                "{}: unsupported WAV format {fmt:?}/{bits}-bit (expected PCM16 or float32)",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let mut mono = Vec::with_capacity(frames);
    for f in 0..frames {
        let sum: f64 = interleaved[f * channels..(f + 1) * channels].iter().sum();
        mono.push(sum / channels as f64);
    }
    AudioClip::new(mono, spec.sample_rate)
}

/// Writes a mono clip as IEEE float 32-bit WAV.
pub fn write_wav_f32(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in clip.samples() {
        writer.write_sample(*s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Writes a mono clip as 16-bit PCM WAV, clamping to full scale.
pub fn write_wav_i16(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for s in clip.samples() {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
