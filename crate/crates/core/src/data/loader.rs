//! Ingestion of stem directories: one WAV per stem, file names mapped to
//! class names through an explicit table, everything resampled to the
//! model rate.

use super::MultiTrack;
use crate::dsp::{load_wav_mono, resample};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// Loads one multitrack from a directory of WAV stems. `mapping` translates
/// file stems (e.g. "vocals") to class names; an empty mapping passes names
/// through unchanged.
pub fn load_multitrack_dir(
    path: &Path,
    mapping: &BTreeMap<String, String>,
    target_rate: u32,
) -> Result<MultiTrack> {
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut entries: Vec<_> = std::fs::read_dir(path)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e.eq_ignore_ascii_case("wav")).unwrap_or(false))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::InvalidAudio(format!("no WAV stems in {}", path.display())));
    }
    let mut stems = Vec::with_capacity(entries.len());
    for p in entries {
        let raw_name = p
            .file_stem()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let class = if mapping.is_empty() {
            raw_name.clone()
        } else {
            mapping.get(&raw_name).cloned().ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "stem file '{raw_name}' has no class mapping; table: {:?}",
                    mapping
                ))
            })?
        };
        let clip = load_wav_mono(&p)?;
        let clip = if clip.sample_rate() != target_rate {
            resample(&clip, target_rate)?
        } else {
            clip
        };
        stems.push((class, clip));
    }
    MultiTrack::new(id, stems)
}

/// Loads every subdirectory of `root` as one multitrack, sorted by name.
pub fn load_corpus_dir(
    root: &Path,
    mapping: &BTreeMap<String, String>,
    target_rate: u32,
) -> Result<Vec<MultiTrack>> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidAudio(format!(
            "no track directories under {}",
            root.display()
        )));
    }
    dirs.iter()
        .map(|d| load_multitrack_dir(d, mapping, target_rate))
        .collect()
}
