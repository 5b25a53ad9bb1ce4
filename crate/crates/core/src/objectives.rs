//! Contrastive and masked-reconstruction objectives and the training step
//! that combines them.
//!
//! The contrastive loss operates on cosine similarities between the
//! normalized global tokens of the batch; every other batch element is a
//! negative. Reconstruction is mean squared error over the masked patches of
//! each modality, averaged over the batch. The total is
//! `lambda_c * L_c + lambda_r * L_r`.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignedPair;
use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::model::{bind_model, decode, encode, pooled_repr, ModelState};
use crate::optim::{Adam, OptimizerConfig};
use crate::tensor::Tensor;
use crate::tokenizer::{Modality, TokenBatch};

/// Which retrieval direction the contrastive softmax runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    V2a,
    A2v,
    Symmetric,
}

/// Normalization of the summed squared error of a sample's masked patches.
/// `PerElement` divides by patches × elements, keeping modalities with
/// different channel counts comparable; `PerPatch` divides by the patch
/// count only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconNorm {
    PerElement,
    PerPatch,
}

/// Contrastive loss over (N, dim) global token matrices, on the tape.
pub fn contrastive_loss_node(
    tape: &mut Tape,
    g_visual: NodeId,
    g_audio: NodeId,
    tau: f64,
    direction: Direction,
) -> Result<NodeId> {
    let (tv, ta) = (tape.value(g_visual), tape.value(g_audio));
    if tv.shape() != ta.shape() {
        return Err(Error::Shape {
            op: "contrastive_loss",
            detail: format!("{:?} vs {:?}", tv.shape(), ta.shape()),
        });
    }
    if tv.rows() < 2 {
        return Err(Error::Input(format!(
            "contrastive loss needs at least 2 pairs, got {}",
            tv.rows()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::Parameter {
            name: "tau",
            detail: format!("must be positive, got {tau}"),
        });
    }
    let nv = tape.l2_normalize_rows(g_visual)?;
    let na = tape.l2_normalize_rows(g_audio)?;
    let nat = tape.transpose(na)?;
    let sim = tape.matmul(nv, nat)?;
    let scaled = tape.scale(sim, 1.0 / tau);
    match direction {
        Direction::V2a => tape.diag_nll(scaled),
        Direction::A2v => {
            let t = tape.transpose(scaled)?;
            tape.diag_nll(t)
        }
        Direction::Symmetric => {
            let fwd = tape.diag_nll(scaled)?;
            let t = tape.transpose(scaled)?;
            let bwd = tape.diag_nll(t)?;
            let sum = tape.add(fwd, bwd)?;
            Ok(tape.scale(sum, 0.5))
        }
    }
}

/// Standalone evaluation of the contrastive loss.
pub fn contrastive_loss(
    g_visual: &Tensor,
    g_audio: &Tensor,
    tau: f64,
    direction: Direction,
) -> Result<f64> {
    let mut tape = Tape::new();
    let gv = tape.constant(g_visual.clone());
    let ga = tape.constant(g_audio.clone());
    let node = contrastive_loss_node(&mut tape, gv, ga, tau, direction)?;
    Ok(tape.scalar_value(node))
}

/// One sample's masked reconstruction loss on the tape.
pub fn recon_loss_node(
    tape: &mut Tape,
    predicted: NodeId,
    target: &Tensor,
    norm: ReconNorm,
) -> Result<NodeId> {
    let tp = tape.value(predicted);
    if tp.shape() != target.shape() {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            detail: format!("predicted {:?} vs target {:?}", tp.shape(), target.shape()),
        });
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(predicted, t)?;
    let per_element = tape.mean_sq(diff);
    Ok(match norm {
        ReconNorm::PerElement => per_element,
        ReconNorm::PerPatch => tape.scale(per_element, target.cols() as f64),
    })
}

/// One (prediction, target) pair per sample; `None` when nothing was masked.
pub type SampleRecon = Option<(Tensor, Tensor)>;

/// Batch reconstruction losses: per-modality means and their sum
/// `L_r = mean_i (L_a_i + L_v_i)`.
pub fn reconstruction_loss(
    audio: &[SampleRecon],
    visual: &[SampleRecon],
    norm: ReconNorm,
) -> Result<(f64, f64, f64)> {
    if audio.len() != visual.len() || audio.is_empty() {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            detail: format!("{} audio samples vs {} visual", audio.len(), visual.len()),
        });
    }
    let one = |sample: &SampleRecon| -> Result<f64> {
        match sample {
            None => Ok(0.0),
            Some((pred, target)) => {
                let mut tape = Tape::new();
                let p = tape.constant(pred.clone());
                let node = recon_loss_node(&mut tape, p, target, norm)?;
                Ok(tape.scalar_value(node))
            }
        }
    };
    let n = audio.len() as f64;
    let mut sum_a = 0.0;
    let mut sum_v = 0.0;
    for (a, v) in audio.iter().zip(visual) {
        sum_a += one(a)?;
        sum_v += one(v)?;
    }
    let mean_a = sum_a / n;
    let mean_v = sum_v / n;
    Ok((mean_a, mean_v, mean_a + mean_v))
}

/// All loss components of one step, with the weights that combined them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub contrastive: f64,
    pub recon_audio: f64,
    pub recon_visual: f64,
    pub recon: f64,
    pub total: f64,
    pub temperature: f64,
    pub lambda_contrastive: f64,
    pub lambda_reconstruction: f64,
    pub direction: Direction,
}

/// Combine loss components into the weighted total.
pub fn total_loss(
    contrastive: f64,
    recon_audio: f64,
    recon_visual: f64,
    tau: f64,
    direction: Direction,
    lambda_contrastive: f64,
    lambda_reconstruction: f64,
) -> Result<LossReport> {
    if lambda_contrastive < 0.0 || lambda_reconstruction < 0.0 {
        return Err(Error::Parameter {
            name: "loss_weights",
            detail: format!("must be non-negative, got ({lambda_contrastive}, {lambda_reconstruction})"),
        });
    }
    let recon = recon_audio + recon_visual;
    Ok(LossReport {
        contrastive,
        recon_audio,
        recon_visual,
        recon,
        total: lambda_contrastive * contrastive + lambda_reconstruction * recon,
        temperature: tau,
        lambda_contrastive,
        lambda_reconstruction,
        direction,
    })
}

/// Training hyperparameters for the self-supervised objective.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub mask_ratio_audio: f64,
    pub mask_ratio_visual: f64,
    pub tau: f64,
    pub lambda_contrastive: f64,
    pub lambda_reconstruction: f64,
    pub direction: Direction,
    pub recon_norm: ReconNorm,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask_ratio_audio: 0.75,
            mask_ratio_visual: 0.75,
            tau: 0.05,
            lambda_contrastive: 0.1,
            lambda_reconstruction: 1.0,
            direction: Direction::Symmetric,
            recon_norm: ReconNorm::PerElement,
            optimizer: OptimizerConfig::default(),
            epochs: 50,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("mask_ratio_audio", self.mask_ratio_audio),
            ("mask_ratio_visual", self.mask_ratio_visual),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {r}")));
            }
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.lambda_contrastive < 0.0 || self.lambda_reconstruction < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for the contrastive loss, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Forward + loss graph for one batch of already-masked (audio, visual)
/// token batches. Returns the scalar root, the loss values and the bound
/// parameter names. Shared by the training step and the gradient checker,
/// which needs the masking fixed so the loss is a pure function of the
/// parameters.
pub fn batch_loss(
    tape: &mut Tape,
    state: &ModelState,
    batches: &[(TokenBatch, TokenBatch)],
    cfg: &TrainConfig,
) -> Result<(NodeId, LossReport, Vec<(String, NodeId)>)> {
    if batches.len() < 2 {
        return Err(Error::Input(format!(
            "contrastive training needs a batch of at least 2, got {}",
            batches.len()
        )));
    }
    let nodes = bind_model(tape, state)?;
    let arch = &state.arch;
    let n = batches.len();
    let mut gv_parts = Vec::with_capacity(n);
    let mut ga_parts = Vec::with_capacity(n);
    let mut recon_sum: Option<NodeId> = None;
    let mut sum_recon_audio = 0.0;
    let mut sum_recon_visual = 0.0;

    for (batch_audio, batch_visual) in batches {
        let pair = encode(tape, &nodes, arch, batch_audio, batch_visual)?;
        let (gv, ga) = if arch.use_global_token {
            (pair.g_visual.expect("global token present"), pair.g_audio.expect("global token present"))
        } else {
            (
                pooled_repr(tape, &pair, Modality::Visual)?,
                pooled_repr(tape, &pair, Modality::Audio)?,
            )
        };
        gv_parts.push(gv);
        ga_parts.push(ga);

        let (pred_audio, pred_visual) = decode(tape, &nodes, arch, &pair, batch_audio, batch_visual)?;
        let mut sample_term: Option<NodeId> = None;
        if let (Some(pred), Some(target)) = (pred_audio, batch_audio.targets.as_ref()) {
            let l = recon_loss_node(tape, pred, target, cfg.recon_norm)?;
            sum_recon_audio += tape.scalar_value(l);
            sample_term = Some(l);
        }
        if let (Some(pred), Some(target)) = (pred_visual, batch_visual.targets.as_ref()) {
            let l = recon_loss_node(tape, pred, target, cfg.recon_norm)?;
            sum_recon_visual += tape.scalar_value(l);
            sample_term = match sample_term {
                Some(prev) => Some(tape.add(prev, l)?),
                None => Some(l),
            };
        }
        if let Some(term) = sample_term {
            recon_sum = match recon_sum {
                Some(acc) => Some(tape.add(acc, term)?),
                None => Some(term),
            };
        }
    }

    let g_visual = tape.concat(0, &gv_parts)?;
    let g_audio = tape.concat(0, &ga_parts)?;
    let contrastive = contrastive_loss_node(tape, g_visual, g_audio, cfg.tau, cfg.direction)?;

    let recon_mean = match recon_sum {
        Some(acc) => tape.scale(acc, 1.0 / n as f64),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let weighted_c = tape.scale(contrastive, cfg.lambda_contrastive);
    let weighted_r = tape.scale(recon_mean, cfg.lambda_reconstruction);
    let total = tape.add(weighted_c, weighted_r)?;

    let report = total_loss(
        tape.scalar_value(contrastive),
        sum_recon_audio / n as f64,
        sum_recon_visual / n as f64,
        cfg.tau,
        cfg.direction,
        cfg.lambda_contrastive,
        cfg.lambda_reconstruction,
    )?;
    Ok((total, report, nodes.names))
}

/// Mask both modalities of a sampled (frame, window) pair for training.
pub fn mask_sample(
    frame: &Tensor,
    window: &Tensor,
    patch: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(TokenBatch, TokenBatch)> {
    let batch_audio = TokenBatch::build(window, patch, cfg.mask_ratio_audio, Modality::Audio, rng)?;
    let batch_visual = TokenBatch::build(frame, patch, cfg.mask_ratio_visual, Modality::Visual, rng)?;
    Ok((batch_audio, batch_visual))
}

/// One optimization step on a batch of aligned pairs: sample a random frame
/// per video, mask both modalities, run the forward and both objectives,
/// backpropagate, and update every bound parameter.
pub fn train_step(
    state: &mut ModelState,
    pairs: &[&AlignedPair],
    cfg: &TrainConfig,
    adam: &mut Adam,
    lr: f64,
    rng: &mut ChaCha20Rng,
) -> Result<LossReport> {
    let mut batches = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (frame, window, _) = pair.sample_training_pair(rng);
        batches.push(mask_sample(frame, &window, state.arch.patch, cfg, rng)?);
    }

    let mut tape = Tape::new();
    let (total, report, names) = batch_loss(&mut tape, state, &batches, cfg)?;
    let grads = tape.backward(total)?;

    let mut by_name: std::collections::BTreeMap<String, Vec<f64>> = std::collections::BTreeMap::new();
    for (name, node) in &names {
        let g = match grads.get(*node) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; tape.value(*node).numel()],
        };
        by_name.insert(name.clone(), g);
    }

    let mut update_err: Option<Error> = None;
    state.for_each_param_mut(&mut |name, param| {
        if update_err.is_some() {
            return;
        }
        if let Some(g) = by_name.remove(name) {
            param.set_grad(Some(g));
            if let Err(e) = adam.update(name, param, lr) {
                update_err = Some(e);
            }
        }
    });
    if let Some(e) = update_err {
        return Err(e);
    }
    adam.advance();
    Ok(report)
}
