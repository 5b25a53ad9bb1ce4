//! Orchestration: pretraining runs, frozen-encoder evaluation for every
//! downstream task, and the whole-model gradient check.
//!
//! Seed streams: 0 initializes the model, 1 drives the training loop
//! (shuffling, frame sampling, masking), 2 the probe head, 3 the gradient
//! checker's random inputs. Stream separation keeps ablations comparable
//! under one seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{ProbeConfig, RunConfig};
use crate::downstream::{
    boundaries_of, boundary_recall, build_ranking, probe_features, recall_at_k, temporal_segment,
    AggregationStrategy, EmbeddingSequenceSet, ProbeSource, RetrievalDirection,
};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_grad, max_rel_error};
use crate::graph::Tape;
use crate::model::{
    bind_classifier, bind_model, classify, encode, localization_map, pooled_repr, Architecture,
    ClassifierHead, DataShape, EncodedPair, ModalitySelect, ModelState,
};
use crate::objectives::{batch_loss, mask_sample, train_step, LossReport, TrainConfig};
use crate::optim::{schedule_lr, Adam};
use crate::synthetic::Dataset;
use crate::tensor::Tensor;
use crate::tokenizer::{Modality, TokenBatch};

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ── Pretraining ─────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_contrastive: f64,
    pub mean_recon_audio: f64,
    pub mean_recon_visual: f64,
    pub mean_recon: f64,
}

pub struct PretrainOutcome {
    pub state: ModelState,
    pub epochs: Vec<EpochSummary>,
    pub log: Vec<TrainLogLine>,
}

/// Train a fresh model on the dataset. Deterministic for a given seed.
pub fn run_pretrain(cfg: &RunConfig, data: &Dataset, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let batch = cfg.train.batch_size;
    if data.len() < batch {
        return Err(Error::Input(format!(
            "dataset holds {} clips, batch size is {batch}",
            data.len()
        )));
    }
    let mut init_rng = stream_rng(seed, 0);
    let mut state = ModelState::init(cfg.arch.clone(), cfg.data_shape(), &mut init_rng)?;
    let mut train_rng = stream_rng(seed, 1);
    let mut adam = Adam::new(cfg.train.optimizer.clone());

    let batches_per_epoch = data.len() / batch;
    let total_steps = batches_per_epoch * cfg.train.epochs;
    let mut log = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut train_rng);
        let mut sums = [0.0f64; 5];
        for chunk in order.chunks(batch).take(batches_per_epoch) {
            let pairs: Vec<&crate::alignment::AlignedPair> =
                chunk.iter().map(|&i| &data.clips[i].pair).collect();
            let lr = schedule_lr(&cfg.train.optimizer, step, total_steps);
            let report = train_step(&mut state, &pairs, &cfg.train, &mut adam, lr, &mut train_rng)?;
            sums[0] += report.total;
            sums[1] += report.contrastive;
            sums[2] += report.recon_audio;
            sums[3] += report.recon_visual;
            sums[4] += report.recon;
            log.push(TrainLogLine { step, epoch, learning_rate: lr, seed, report });
            step += 1;
        }
        let n = batches_per_epoch as f64;
        epochs.push(EpochSummary {
            epoch,
            mean_total: sums[0] / n,
            mean_contrastive: sums[1] / n,
            mean_recon_audio: sums[2] / n,
            mean_recon_visual: sums[3] / n,
            mean_recon: sums[4] / n,
        });
    }
    Ok(PretrainOutcome { state, epochs, log })
}

/// Write checkpoint, per-step JSONL log and per-epoch summary under `dir`.
pub fn persist_pretrain(outcome: &PretrainOutcome, seed: u64, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let ckpt = dir.join("checkpoint");
    save_checkpoint(&outcome.state, &ckpt, seed, outcome.log.len())?;
    let mut log = fs::File::create(dir.join("train_log.jsonl"))?;
    for line in &outcome.log {
        serde_json::to_writer(&mut log, line).map_err(|e| Error::Format(e.to_string()))?;
        log.write_all(b"\n")?;
    }
    let epochs_json = serde_json::to_string_pretty(&outcome.epochs)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("epochs.json"), epochs_json)?;
    Ok(ckpt)
}

// ── Frozen-encoder sequence extraction ──────────────────────────────

/// Run an unmasked forward for one (frame, window) pair and hand the
/// encoded outputs to `extract`.
fn with_eval_forward<T>(
    state: &ModelState,
    frame: &Tensor,
    window: &Tensor,
    extract: impl FnOnce(&Tape, &EncodedPair) -> Result<T>,
) -> Result<T> {
    let batch_a = TokenBatch::unmasked(window, state.arch.patch, Modality::Audio)?;
    let batch_v = TokenBatch::unmasked(frame, state.arch.patch, Modality::Visual)?;
    let mut tape = Tape::new();
    let nodes = bind_model(&mut tape, state)?;
    let pair = encode(&mut tape, &nodes, &state.arch, &batch_a, &batch_v)?;
    extract(&tape, &pair)
}

fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let cols = rows[0].cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::from_vec(vec![rows.len(), cols], data)
}

/// Global-token (or pooled, without a global) sequences for every video of
/// the dataset, for retrieval.
pub fn extract_sequences(state: &ModelState, data: &Dataset, frames: Option<usize>) -> Result<EmbeddingSequenceSet> {
    let mut ids = Vec::with_capacity(data.len());
    let mut visual = Vec::with_capacity(data.len());
    let mut audio = Vec::with_capacity(data.len());
    for clip in &data.clips {
        let t_limit = frames.unwrap_or(clip.pair.num_frames());
        let mut g_v = Vec::with_capacity(t_limit);
        let mut g_a = Vec::with_capacity(t_limit);
        for (frame, window, t) in clip.pair.sample_all_pairs() {
            if t >= t_limit {
                break;
            }
            let (gv, ga) = with_eval_forward(state, frame, &window, |tape, pair| {
                if state.arch.use_global_token {
                    Ok((
                        tape.value(pair.g_visual.expect("global token present")).clone(),
                        tape.value(pair.g_audio.expect("global token present")).clone(),
                    ))
                } else {
                    // baseline path: pooled patch tokens stand in for globals
                    let mut t2 = Tape::new();
                    let hv = t2.constant(tape.value(pair.h_visual).clone());
                    let ha = t2.constant(tape.value(pair.h_audio).clone());
                    let shim = EncodedPair {
                        g_audio: None,
                        g_visual: None,
                        regs_audio: None,
                        regs_visual: None,
                        h_audio: ha,
                        h_visual: hv,
                        joint_audio: ha,
                        joint_visual: hv,
                        visual_fully_unmasked: true,
                    };
                    let pv = pooled_repr(&mut t2, &shim, Modality::Visual)?;
                    let pa = pooled_repr(&mut t2, &shim, Modality::Audio)?;
                    Ok((t2.value(pv).clone(), t2.value(pa).clone()))
                }
            })?;
            g_v.push(gv);
            g_a.push(ga);
        }
        ids.push(clip.id.clone());
        visual.push(stack_rows(&g_v)?);
        audio.push(stack_rows(&g_a)?);
    }
    EmbeddingSequenceSet::new(ids, visual, audio)
}

/// Per-timestep probe features for every video: (T, dim) per modality.
pub fn extract_probe_sequences(
    state: &ModelState,
    data: &Dataset,
    source: ProbeSource,
) -> Result<Vec<(Tensor, Tensor)>> {
    let mut out = Vec::with_capacity(data.len());
    for clip in &data.clips {
        let mut feats_a = Vec::new();
        let mut feats_v = Vec::new();
        for (frame, window, _) in clip.pair.sample_all_pairs() {
            let (fa, fv) = with_eval_forward(state, frame, &window, |tape, pair| {
                Ok((
                    probe_features(tape, pair, source, Modality::Audio)?,
                    probe_features(tape, pair, source, Modality::Visual)?,
                ))
            })?;
            feats_a.push(fa);
            feats_v.push(fv);
        }
        out.push((stack_rows(&feats_a)?, stack_rows(&feats_v)?));
    }
    Ok(out)
}

// ── Retrieval ───────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub videos: usize,
    pub timesteps: usize,
    /// direction -> strategy -> k -> recall
    pub recall: BTreeMap<String, BTreeMap<String, BTreeMap<u32, f64>>>,
}

impl RetrievalMetrics {
    pub fn get(&self, direction: RetrievalDirection, strategy: AggregationStrategy, k: u32) -> Option<f64> {
        let dir = match direction {
            RetrievalDirection::VisualToAudio => "v2a",
            RetrievalDirection::AudioToVisual => "a2v",
        };
        self.recall.get(dir)?.get(strategy.name())?.get(&k).copied()
    }
}

/// Recall@k for both directions and all four aggregation strategies.
pub fn run_retrieve(state: &ModelState, data: &Dataset, ks: &[usize], frames: Option<usize>) -> Result<RetrievalMetrics> {
    let set = extract_sequences(state, data, frames)?;
    let mut recall = BTreeMap::new();
    for (dir, dir_name) in [
        (RetrievalDirection::VisualToAudio, "v2a"),
        (RetrievalDirection::AudioToVisual, "a2v"),
    ] {
        let mut per_strategy = BTreeMap::new();
        for strategy in AggregationStrategy::ALL {
            let ranking = build_ranking(&set, dir, strategy)?;
            let mut per_k = BTreeMap::new();
            for &k in ks {
                per_k.insert(k as u32, recall_at_k(&ranking, k)?);
            }
            per_strategy.insert(strategy.name().to_string(), per_k);
        }
        recall.insert(dir_name.to_string(), per_strategy);
    }
    Ok(RetrievalMetrics { videos: set.len(), timesteps: set.timesteps(), recall })
}

// ── Linear probing ──────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeMetrics {
    /// "accuracy" for single-label data, "map" for multi-label.
    pub metric: String,
    pub value: f64,
    pub videos: usize,
    pub classes: usize,
    pub source: ProbeSource,
    pub modality: ModalitySelect,
}

fn probe_targets(data: &Dataset) -> (bool, Vec<Vec<usize>>) {
    let single = data.clips.iter().all(|c| c.labels.len() == 1);
    (single, data.clips.iter().map(|c| c.labels.clone()).collect())
}

/// Train the classification head on frozen encoder features and score it on
/// the held-out set. Single-label data uses cross-entropy and accuracy;
/// multi-label uses binary cross-entropy and mean average precision.
pub fn run_probe(
    state: &ModelState,
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeMetrics> {
    if train_data.is_empty() || eval_data.is_empty() {
        return Err(Error::Input("probe needs non-empty train and eval sets".into()));
    }
    let classes = train_data.num_classes.max(eval_data.num_classes);
    let train_seqs = extract_probe_sequences(state, train_data, cfg.source)?;
    let eval_seqs = extract_probe_sequences(state, eval_data, cfg.source)?;
    let feat_dim = train_seqs[0].0.cols();
    let width = match cfg.modality {
        ModalitySelect::Both => 2 * feat_dim,
        _ => feat_dim,
    };
    let (single_label, train_labels) = probe_targets(train_data);
    let (_, eval_labels) = probe_targets(eval_data);

    let mut rng = stream_rng(seed, 2);
    let mut head = ClassifierHead::init(width, classes, &mut rng);
    let mut adam = Adam::new(crate::optim::OptimizerConfig {
        learning_rate: cfg.learning_rate,
        warmup_frac: 0.0,
        ..Default::default()
    });

    let heads = state.arch.heads.min(4).max(1);
    let eps = state.arch.ln_eps;
    let forward_logits = |tape: &mut Tape,
                          head_nodes: &crate::model::ClassifierHeadNodes,
                          seqs: &(Tensor, Tensor)|
     -> Result<crate::graph::NodeId> {
        classify(tape, head_nodes, heads, eps, Some(&seqs.0), Some(&seqs.1), cfg.modality)
    };

    let batches_per_epoch = (train_seqs.len() + cfg.batch_size - 1) / cfg.batch_size;
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut names = Vec::new();
            let head_nodes = bind_classifier(&mut tape, &head, &mut names);
            let mut logit_rows = Vec::with_capacity(chunk.len());
            for &i in chunk {
                logit_rows.push(forward_logits(&mut tape, &head_nodes, &train_seqs[i])?);
            }
            let logits = tape.concat(0, &logit_rows)?;
            let loss = if single_label {
                let targets: Vec<usize> = chunk.iter().map(|&i| train_labels[i][0]).collect();
                tape.ce_rows(logits, targets)?
            } else {
                let mut hot = vec![0.0; chunk.len() * classes];
                for (row, &i) in chunk.iter().enumerate() {
                    for &l in &train_labels[i] {
                        hot[row * classes + l] = 1.0;
                    }
                }
                let target = tape.constant(Tensor::from_vec(vec![chunk.len(), classes], hot)?);
                tape.bce_logits(logits, target)?
            };
            let grads = tape.backward(loss)?;
            let lr = schedule_lr(&crate::optim::OptimizerConfig {
                learning_rate: cfg.learning_rate,
                warmup_frac: 0.0,
                ..Default::default()
            }, step, total_steps);
            let by_name: BTreeMap<&String, &Tensor> = names
                .iter()
                .filter_map(|(n, id)| grads.get(*id).map(|g| (n, g)))
                .collect();
            apply_head_update(&mut head, &by_name, &mut adam, lr)?;
            adam.advance();
            step += 1;
        }
    }

    // score the held-out set
    let mut tape = Tape::new();
    let mut names = Vec::new();
    let head_nodes = bind_classifier(&mut tape, &head, &mut names);
    let mut scores = Vec::with_capacity(eval_seqs.len());
    for seqs in &eval_seqs {
        let id = forward_logits(&mut tape, &head_nodes, seqs)?;
        scores.push(tape.value(id).data().to_vec());
    }

    let value = if single_label {
        let mut correct = 0usize;
        for (score, labels) in scores.iter().zip(&eval_labels) {
            let argmax = score
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if labels.contains(&argmax) {
                correct += 1;
            }
        }
        correct as f64 / scores.len() as f64
    } else {
        mean_average_precision(&scores, &eval_labels, classes)
    };

    Ok(ProbeMetrics {
        metric: if single_label { "accuracy".into() } else { "map".into() },
        value,
        videos: eval_seqs.len(),
        classes,
        source: cfg.source,
        modality: cfg.modality,
    })
}

fn apply_head_update(
    head: &mut ClassifierHead,
    grads: &BTreeMap<&String, &Tensor>,
    adam: &mut Adam,
    lr: f64,
) -> Result<()> {
    let mut err = None;
    let mut update = |name: String, param: &mut Tensor| {
        if err.is_some() {
            return;
        }
        if let Some(g) = grads.get(&name) {
            param.set_grad(Some(g.data().to_vec()));
            if let Err(e) = adam.update(&name, param, lr) {
                err = Some(e);
            }
        }
    };
    update("classifier.cls".to_string(), &mut head.cls);
    for (i, b) in head.blocks.iter_mut().enumerate() {
        let p = format!("classifier.{i}");
        update(format!("{p}.ln1.gain"), &mut b.norms.pre_attn.gain);
        update(format!("{p}.ln1.bias"), &mut b.norms.pre_attn.bias);
        update(format!("{p}.ln2.gain"), &mut b.norms.pre_mlp.gain);
        update(format!("{p}.ln2.bias"), &mut b.norms.pre_mlp.bias);
        update(format!("{p}.wq"), &mut b.core.wq);
        update(format!("{p}.bq"), &mut b.core.bq);
        update(format!("{p}.wk"), &mut b.core.wk);
        update(format!("{p}.bk"), &mut b.core.bk);
        update(format!("{p}.wv"), &mut b.core.wv);
        update(format!("{p}.bv"), &mut b.core.bv);
        update(format!("{p}.wo"), &mut b.core.wo);
        update(format!("{p}.bo"), &mut b.core.bo);
        update(format!("{p}.w_up"), &mut b.core.w_up);
        update(format!("{p}.b_up"), &mut b.core.b_up);
        update(format!("{p}.w_down"), &mut b.core.w_down);
        update(format!("{p}.b_down"), &mut b.core.b_down);
    }
    update("classifier.w_out".to_string(), &mut head.w_out);
    update("classifier.b_out".to_string(), &mut head.b_out);
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Macro-averaged AP: per class, rank videos by that class's score and
/// average precision at each relevant hit.
fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<usize>], classes: usize) -> f64 {
    let mut aps = Vec::new();
    for c in 0..classes {
        let relevant: Vec<bool> = labels.iter().map(|l| l.contains(&c)).collect();
        let positives = relevant.iter().filter(|&&r| r).count();
        if positives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b][c].partial_cmp(&scores[a][c]).unwrap().then(a.cmp(&b)));
        let mut hits = 0;
        let mut ap = 0.0;
        for (rank, &v) in order.iter().enumerate() {
            if relevant[v] {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        aps.push(ap / positives as f64);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

// ── Localization ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizeMetrics {
    pub maps: usize,
    pub value_min: f64,
    pub value_max: f64,
    pub map_height: usize,
    pub map_width: usize,
}

/// Emit one upsampled cosine localization map per (frame, window) pair.
/// With `out_dir` set, maps are dumped as CAVT tensors and PGM images.
pub fn run_localize(state: &ModelState, data: &Dataset, out_dir: Option<&Path>) -> Result<LocalizeMetrics> {
    let grid = state.shapes.visual_grid(state.arch.patch);
    let (out_h, out_w) = (state.shapes.frame_h, state.shapes.frame_w);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut maps = 0usize;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for clip in &data.clips {
        for (frame, window, t) in clip.pair.sample_all_pairs() {
            let (_, up) = with_eval_forward(state, frame, &window, |tape, pair| {
                localization_map(tape, pair, grid, out_h, out_w)
            })?;
            for &v in up.data() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if let Some(dir) = out_dir {
                let stem = format!("{}_t{t:02}", clip.id);
                up.save_cavt(dir.join(format!("{stem}.cavt")))?;
                write_pgm(&dir.join(format!("{stem}.pgm")), &up)?;
            }
            maps += 1;
        }
    }
    Ok(LocalizeMetrics { maps, value_min: lo, value_max: hi, map_height: out_h, map_width: out_w })
}

/// 8-bit binary PGM with cosine values mapped from [-1, 1] to [0, 255].
fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = (map.rows(), map.cols());
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in map.data() {
        let byte = (((v + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8;
        out.push(byte);
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Temporal segmentation ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub videos: usize,
    pub segments: usize,
    pub tolerance: usize,
    pub mean_boundary_recall: f64,
}

/// Cluster per-timestep features of every clip into `k` segments and score
/// predicted boundaries against the labelled event boundaries.
pub fn run_segment(
    state: &ModelState,
    data: &Dataset,
    k: usize,
    modality: ModalitySelect,
    tolerance: usize,
    seed: u64,
) -> Result<SegmentMetrics> {
    if data.is_empty() {
        return Err(Error::Input("segmentation needs a non-empty dataset".into()));
    }
    // pooled patch tokens stand in for globals on the baseline architecture
    let source = if state.arch.use_global_token {
        ProbeSource::Global
    } else {
        ProbeSource::PatchMean
    };
    let seqs = extract_probe_sequences(state, data, source)?;
    let mut total_recall = 0.0;
    for (clip, (seq_a, seq_v)) in data.clips.iter().zip(&seqs) {
        let features = match modality {
            ModalitySelect::Audio => seq_a.clone(),
            ModalitySelect::Visual => seq_v.clone(),
            ModalitySelect::Both => {
                let t = seq_a.rows();
                let (ca, cv) = (seq_a.cols(), seq_v.cols());
                let mut data = Vec::with_capacity(t * (ca + cv));
                for i in 0..t {
                    data.extend_from_slice(&seq_v.data()[i * cv..(i + 1) * cv]);
                    data.extend_from_slice(&seq_a.data()[i * ca..(i + 1) * ca]);
                }
                Tensor::from_vec(vec![t, ca + cv], data)?
            }
        };
        let labels = temporal_segment(&features, k, seed)?;
        let truth = boundaries_of(&clip.timestep_labels);
        let predicted = boundaries_of(&labels);
        total_recall += boundary_recall(&truth, &predicted, tolerance);
    }
    Ok(SegmentMetrics {
        videos: data.len(),
        segments: k,
        tolerance,
        mean_boundary_recall: total_recall / data.len() as f64,
    })
}

// ── Task dispatch ───────────────────────────────────────────────────

/// Metrics of one evaluation task, tagged for JSON output.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum EvalMetrics {
    Retrieve(RetrievalMetrics),
    Classify(ProbeMetrics),
    Localize(LocalizeMetrics),
    Segment(SegmentMetrics),
}

/// Run one evaluation task on a trained model. The checkpoint's
/// architecture and input geometry must match the config. `train_data` is
/// required for probing (the head trains on it); `map_dir` dumps
/// localization maps when set.
pub fn run_eval(
    cfg: &RunConfig,
    state: &ModelState,
    task: crate::config::EvalTask,
    data: &Dataset,
    train_data: Option<&Dataset>,
    seed: u64,
    map_dir: Option<&Path>,
) -> Result<EvalMetrics> {
    cfg.validate()?;
    if state.arch != cfg.arch {
        return Err(Error::Config(format!(
            "checkpoint architecture {:?} does not match configured {:?}",
            state.arch, cfg.arch
        )));
    }
    if state.shapes != cfg.data_shape() {
        return Err(Error::Config(format!(
            "checkpoint input geometry {:?} does not match configured {:?}",
            state.shapes,
            cfg.data_shape()
        )));
    }
    use crate::config::EvalTask;
    Ok(match task {
        EvalTask::Retrieve => EvalMetrics::Retrieve(run_retrieve(
            state,
            data,
            &cfg.eval.recall_ks,
            cfg.eval.eval_frames,
        )?),
        EvalTask::Classify => {
            let train = train_data.ok_or_else(|| {
                Error::Input("probing requires a training dataset for the head".into())
            })?;
            EvalMetrics::Classify(run_probe(state, train, data, &cfg.eval.probe, seed)?)
        }
        EvalTask::Localize => EvalMetrics::Localize(run_localize(state, data, map_dir)?),
        EvalTask::Segment => EvalMetrics::Segment(run_segment(
            state,
            data,
            cfg.eval.segments.unwrap_or(cfg.data.events_per_video),
            cfg.eval.segment_modality,
            cfg.eval.boundary_tolerance,
            seed,
        )?),
    })
}

// ── Whole-model gradient check ──────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub parameters: usize,
    pub groups: Vec<GroupReport>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// The gradient checker's enforced toy architecture.
pub fn gradcheck_architecture() -> (Architecture, DataShape) {
    (
        Architecture {
            dim: 16,
            enc_depth: 1,
            heads: 2,
            dec_depth: 1,
            dec_dim: 8,
            n_registers: 2,
            use_global_token: true,
            patch: 4,
            ln_eps: 1e-6,
        },
        DataShape { mel_bins: 8, s_length: 8, frame_channels: 1, frame_h: 8, frame_w: 8 },
    )
}

/// Check the reverse-mode gradient of the full training loss against central
/// finite differences, element by element, for every parameter group.
pub fn run_gradcheck(seed: u64, tolerance: f64, step: f64) -> Result<GradcheckReport> {
    gradcheck_with_tamper(seed, tolerance, step, None)
}

fn gradcheck_with_tamper(
    seed: u64,
    tolerance: f64,
    step: f64,
    tamper: Option<&dyn Fn(&str, &mut Tensor)>,
) -> Result<GradcheckReport> {
    let (arch, shapes) = gradcheck_architecture();
    let mut rng = stream_rng(seed, 3);
    let state = ModelState::init(arch, shapes.clone(), &mut rng)?;
    if state.num_params() >= 50_000 {
        return Err(Error::Config(format!(
            "gradient check requires a toy model under 50k parameters, got {}",
            state.num_params()
        )));
    }
    let cfg = TrainConfig {
        mask_ratio_audio: 0.5,
        mask_ratio_visual: 0.5,
        ..Default::default()
    };
    let mut batches = Vec::new();
    for _ in 0..2 {
        let window = Tensor::randn(vec![shapes.mel_bins, shapes.s_length], 1.0, &mut rng);
        let frame = Tensor::randn(
            vec![shapes.frame_channels, shapes.frame_h, shapes.frame_w],
            1.0,
            &mut rng,
        );
        batches.push(mask_sample(&frame, &window, state.arch.patch, &cfg, &mut rng)?);
    }

    let mut tape = Tape::new();
    let (total, _, names) = batch_loss(&mut tape, &state, &batches, &cfg)?;
    let grads = tape.backward(total)?;

    let loss_with = |name: &str, probe: &Tensor| -> Result<f64> {
        let mut st = state.clone();
        st.for_each_param_mut(&mut |n, p| {
            if n == name {
                *p = probe.clone();
            }
        });
        let mut t = Tape::new();
        let (root, _, _) = batch_loss(&mut t, &st, &batches, &cfg)?;
        Ok(t.scalar_value(root))
    };

    let mut groups = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    for (name, node) in &names {
        let value = tape.value(*node).clone();
        let mut analytic = match grads.get(*node) {
            Some(g) => g.clone(),
            None => Tensor::zeros(value.shape().to_vec()),
        };
        if let Some(t) = tamper {
            t(name, &mut analytic);
        }
        let numeric = finite_diff_grad(|probe| loss_with(name, probe), &value, step)?;
        let err = max_rel_error(&analytic, &numeric);
        worst = worst.max(err);
        groups.push(GroupReport {
            name: name.clone(),
            elements: value.numel(),
            max_rel_error: err,
            pass: err < tolerance,
        });
    }
    Ok(GradcheckReport {
        tolerance,
        step,
        parameters: state.num_params(),
        groups,
        max_rel_error: worst,
        pass: worst < tolerance,
    })
}
