//! Run configuration: one JSON document with validated defaults for every
//! field, covering the architecture, the synthetic data source, training
//! and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, DataShape, ModalitySelect};
use crate::downstream::ProbeSource;
use crate::objectives::TrainConfig;
use crate::synthetic::SyntheticConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Retrieve,
    Classify,
    Localize,
    Segment,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ProbeConfig {
    pub source: ProbeSource,
    pub modality: ModalitySelect,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            source: ProbeSource::Global,
            modality: ModalitySelect::Both,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out videos generated past the training index range.
    pub eval_videos: usize,
    pub recall_ks: Vec<usize>,
    /// Frames per video at evaluation time; `None` keeps the training count.
    pub eval_frames: Option<usize>,
    /// Cluster count for temporal segmentation; `None` uses events_per_video.
    pub segments: Option<usize>,
    pub boundary_tolerance: usize,
    pub segment_modality: ModalitySelect,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eval_videos: 64,
            recall_ks: vec![1, 5, 10],
            eval_frames: None,
            segments: None,
            boundary_tolerance: 1,
            segment_modality: ModalitySelect::Both,
            probe: ProbeConfig::default(),
        }
    }
}

/// Everything one run needs. Loadable from a single JSON document; absent
/// fields take their defaults.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub arch: Architecture,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: Option<u64>,
    pub task: Option<EvalTask>,
}

impl RunConfig {
    pub fn data_shape(&self) -> DataShape {
        DataShape {
            mel_bins: self.data.mel_bins,
            s_length: self.data.s_length,
            frame_channels: self.data.frame_channels,
            frame_h: self.data.frame_size,
            frame_w: self.data.frame_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.data.validate()?;
        self.data_shape().validate(self.arch.patch)?;
        self.train.validate()?;
        if self.eval.eval_videos < 2 {
            return Err(Error::Config(format!(
                "eval_videos must be at least 2, got {}",
                self.eval.eval_videos
            )));
        }
        if self.eval.recall_ks.is_empty() {
            return Err(Error::Config("recall_ks must not be empty".into()));
        }
        for &k in &self.eval.recall_ks {
            if k == 0 || k > self.eval.eval_videos {
                return Err(Error::Config(format!(
                    "recall k = {k} out of range for {} eval videos",
                    self.eval.eval_videos
                )));
            }
        }
        if let Some(f) = self.eval.eval_frames {
            if f == 0 {
                return Err(Error::Config("eval_frames must be positive".into()));
            }
        }
        if let Some(s) = self.eval.segments {
            let t = self.eval.eval_frames.unwrap_or(self.data.frames);
            if s == 0 || s > t {
                return Err(Error::Config(format!(
                    "segments = {s} out of range for {t} frames"
                )));
            }
        }
        if self.eval.probe.epochs == 0 || self.eval.probe.batch_size == 0 {
            return Err(Error::Config("probe epochs and batch_size must be positive".into()));
        }
        if self.eval.probe.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "probe learning_rate must be positive, got {}",
                self.eval.probe.learning_rate
            )));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
