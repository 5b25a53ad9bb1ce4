//! Checkpoints: a directory of named CAVT tensors plus a JSON metadata file
//! carrying the architecture, input geometry, seed and step count.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, ClassifierHead, DataShape, ModelState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    pub shapes: DataShape,
    pub seed: u64,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierMeta>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub width: usize,
    pub classes: usize,
}

pub fn save_checkpoint(state: &ModelState, dir: &Path, seed: u64, step: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        arch: state.arch.clone(),
        shapes: state.shapes.clone(),
        seed,
        step,
        classifier: state
            .classifier
            .as_ref()
            .map(|h| ClassifierMeta { width: h.width, classes: h.classes }),
    };
    let meta_json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("meta.json"), meta_json)?;
    let mut err = None;
    state.for_each_param(&mut |name, tensor| {
        if err.is_some() {
            return;
        }
        if let Err(e) = tensor.save_cavt(dir.join(format!("{name}.cavt"))) {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let meta_path = dir.join("meta.json");
    let meta_json = fs::read_to_string(&meta_path)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_json).map_err(|e| Error::Format(e.to_string()))?;

    // parameter values are overwritten below; the init rng seed is irrelevant
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut state = ModelState::init(meta.arch.clone(), meta.shapes.clone(), &mut rng)?;
    if let Some(c) = &meta.classifier {
        state.classifier = Some(ClassifierHead::init(c.width, c.classes, &mut rng));
    }

    let mut missing = BTreeSet::new();
    let mut err = None;
    state.for_each_param_mut(&mut |name, tensor| {
        if err.is_some() {
            return;
        }
        match Tensor::load_cavt(dir.join(format!("{name}.cavt"))) {
            Ok(loaded) => {
                if loaded.shape() != tensor.shape() {
                    err = Some(Error::Format(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        tensor.shape()
                    )));
                } else {
                    *tensor = loaded;
                }
            }
            Err(_) => {
                missing.insert(name.to_string());
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint at {} is missing tensors: {:?}",
            dir.display(),
            missing
        )));
    }
    Ok((state, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_state() -> ModelState {
        let arch = Architecture {
            dim: 16,
            enc_depth: 1,
            heads: 2,
            dec_depth: 1,
            dec_dim: 8,
            n_registers: 2,
            use_global_token: true,
            patch: 4,
            ln_eps: 1e-6,
        };
        let shapes = DataShape { mel_bins: 8, s_length: 16, frame_channels: 1, frame_h: 8, frame_w: 8 };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        ModelState::init(arch, shapes, &mut rng).unwrap()
    }

    #[test]
    fn save_load_round_trip_preserves_values_at_f32() {
        let state = toy_state();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path(), 7, 42).unwrap();
        let (loaded, meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.seed, 7);
        assert_eq!(meta.step, 42);
        assert_eq!(meta.arch, state.arch);
        let mut originals = Vec::new();
        state.for_each_param(&mut |name, t| originals.push((name.to_string(), t.clone())));
        let mut idx = 0;
        loaded.for_each_param(&mut |name, t| {
            let (orig_name, orig) = &originals[idx];
            assert_eq!(name, orig_name);
            assert_eq!(t.shape(), orig.shape());
            for (a, b) in t.data().iter().zip(orig.data()) {
                assert_eq!(*a, *b as f32 as f64, "{name}");
            }
            idx += 1;
        });
        assert_eq!(idx, originals.len());
    }

    #[test]
    fn second_save_is_byte_identical() {
        let state = toy_state();
        let dir1 = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir1.path(), 1, 10).unwrap();
        let (loaded, _) = load_checkpoint(dir1.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(&loaded, dir2.path(), 1, 10).unwrap();
        for entry in fs::read_dir(dir1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(dir1.path().join(&name)).unwrap();
            let b = fs::read(dir2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs");
        }
    }

    #[test]
    fn missing_tensor_is_reported() {
        let state = toy_state();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path(), 0, 0).unwrap();
        fs::remove_file(dir.path().join("joint.wq.cavt")).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("joint.wq"), "{err}");
    }
}
