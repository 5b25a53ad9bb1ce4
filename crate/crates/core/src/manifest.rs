//! JSON-lines dataset manifests and the on-disk dataset layout.
//!
//! Each manifest line describes one clip: frame CAVT paths, the spectrogram
//! CAVT path, the video-level label list and optional per-timestep labels.
//! Paths are relative to the manifest's directory. Alignment windows are
//! recomputed at load time from the configured window width.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::AlignedPair;
use crate::error::{Error, Result};
use crate::synthetic::{ClipRecord, Dataset};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    frames: Vec<String>,
    spectrogram: String,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestep_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window_labels: Option<Vec<usize>>,
}

/// Write a dataset under `dir`: one subdirectory of CAVT tensors per clip
/// plus `manifest.jsonl`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path)?;
    for clip in &dataset.clips {
        let clip_dir = dir.join(&clip.id);
        fs::create_dir_all(&clip_dir)?;
        let mut frame_paths = Vec::with_capacity(clip.pair.num_frames());
        for t in 0..clip.pair.num_frames() {
            let rel = format!("{}/frame_{t:03}.cavt", clip.id);
            clip.pair.frame(t).save_cavt(dir.join(&rel))?;
            frame_paths.push(rel);
        }
        let spec_rel = format!("{}/spectrogram.cavt", clip.id);
        clip.pair.spectrogram().save_cavt(dir.join(&spec_rel))?;
        let row = ManifestRow {
            id: clip.id.clone(),
            frames: frame_paths,
            spectrogram: spec_rel,
            labels: clip.labels.clone(),
            timestep_labels: Some(clip.timestep_labels.clone()),
            window_labels: Some(clip.window_labels.clone()),
        };
        serde_json::to_writer(&mut manifest, &row)
            .map_err(|e| Error::Format(e.to_string()))?;
        manifest.write_all(b"\n")?;
    }
    Ok(manifest_path)
}

/// Load a dataset from a manifest. `s_length` is the aligned window width
/// the pairs are built with; `patch` the tokenizer patch size they are
/// validated against.
pub fn ingest_manifest(path: &Path, s_length: usize, patch: usize) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut clips = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        let clip_err = |detail: String| Error::Load { clip: row.id.clone(), detail };

        let mut frames = Vec::with_capacity(row.frames.len());
        for rel in &row.frames {
            let tensor = Tensor::load_cavt(base.join(rel))
                .map_err(|e| clip_err(format!("frame {rel}: {e}")))?;
            frames.push(tensor);
        }
        let spectrogram = Tensor::load_cavt(base.join(&row.spectrogram))
            .map_err(|e| clip_err(format!("spectrogram {}: {e}", row.spectrogram)))?;
        let pair = AlignedPair::new(frames, spectrogram, s_length, patch)
            .map_err(|e| clip_err(e.to_string()))?;

        let t = pair.num_frames();
        if let Some(tl) = &row.timestep_labels {
            if tl.len() != t {
                return Err(clip_err(format!(
                    "{} timestep labels for {t} frames",
                    tl.len()
                )));
            }
        }
        for &l in row.labels.iter().chain(row.timestep_labels.iter().flatten()) {
            max_label = max_label.max(l);
        }
        let timestep_labels = row.timestep_labels.unwrap_or_else(|| vec![0; t]);
        let window_labels = row.window_labels.unwrap_or_else(|| timestep_labels.clone());
        clips.push(ClipRecord {
            id: row.id,
            pair,
            labels: row.labels,
            timestep_labels,
            window_labels,
        });
    }
    let num_classes = if clips.is_empty() { 0 } else { max_label + 1 };
    Ok(Dataset { clips, num_classes })
}
