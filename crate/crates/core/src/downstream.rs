//! Downstream evaluation: cross-modal retrieval over per-timestep global
//! tokens, recall metrics, sound-prompted segmentation scoring, probe
//! feature selection, and intra-video temporal segmentation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::model::EncodedPair;
use crate::tensor::Tensor;
use crate::tokenizer::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalDirection {
    #[serde(rename = "v2a")]
    VisualToAudio,
    #[serde(rename = "a2v")]
    AudioToVisual,
}

/// How a (T, T) token similarity matrix collapses to one pair score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    DiagMean,
    DiagMax,
    BlockMean,
    BlockMax,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 4] = [
        AggregationStrategy::DiagMean,
        AggregationStrategy::DiagMax,
        AggregationStrategy::BlockMean,
        AggregationStrategy::BlockMax,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::DiagMean => "diag_mean",
            AggregationStrategy::DiagMax => "diag_max",
            AggregationStrategy::BlockMean => "block_mean",
            AggregationStrategy::BlockMax => "block_max",
        }
    }
}

/// Per-video sequences of unit-normalized global tokens, one per timestep
/// and modality.
#[derive(Clone, Debug)]
pub struct EmbeddingSequenceSet {
    ids: Vec<String>,
    visual: Vec<Tensor>,
    audio: Vec<Tensor>,
    timesteps: usize,
}

impl EmbeddingSequenceSet {
    /// Rows are L2-normalized here, so the unit-norm invariant holds by
    /// construction; zero-norm rows are rejected.
    pub fn new(ids: Vec<String>, visual: Vec<Tensor>, audio: Vec<Tensor>) -> Result<Self> {
        if ids.is_empty() || ids.len() != visual.len() || ids.len() != audio.len() {
            return Err(Error::Input(format!(
                "inconsistent set sizes: {} ids, {} visual, {} audio",
                ids.len(),
                visual.len(),
                audio.len()
            )));
        }
        let timesteps = visual[0].rows();
        let norm_all = |seqs: Vec<Tensor>| -> Result<Vec<Tensor>> {
            seqs.into_iter()
                .map(|t| {
                    if !t.is_2d() || t.rows() != timesteps {
                        return Err(Error::Input(format!(
                            "every video needs {} timestep tokens, got shape {:?}",
                            timesteps,
                            t.shape()
                        )));
                    }
                    normalize_rows(&t)
                })
                .collect()
        };
        let visual = norm_all(visual)?;
        let audio = norm_all(audio)?;
        Ok(EmbeddingSequenceSet { ids, visual, audio, timesteps })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn visual(&self, i: usize) -> &Tensor {
        &self.visual[i]
    }

    pub fn audio(&self, i: usize) -> &Tensor {
        &self.audio[i]
    }
}

fn normalize_rows(t: &Tensor) -> Result<Tensor> {
    let (r, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = &t.data()[i * c..(i + 1) * c];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-30 {
            return Err(Error::Numeric(format!("zero-norm token at timestep {i}")));
        }
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::from_vec(vec![r, c], data)
}

/// Collapse the (T, T) similarity matrix between a query sequence and a
/// target sequence into one score.
pub fn pair_similarity(
    query: &Tensor,
    target: &Tensor,
    strategy: AggregationStrategy,
) -> Result<f64> {
    if query.shape() != target.shape() {
        return Err(Error::Input(format!(
            "sequence shapes differ: {:?} vs {:?}",
            query.shape(),
            target.shape()
        )));
    }
    let (t, d) = (query.rows(), query.cols());
    let cell = |i: usize, j: usize| -> f64 {
        let qa = &query.data()[i * d..(i + 1) * d];
        let tb = &target.data()[j * d..(j + 1) * d];
        qa.iter().zip(tb).map(|(a, b)| a * b).sum()
    };
    Ok(match strategy {
        AggregationStrategy::DiagMean => (0..t).map(|i| cell(i, i)).sum::<f64>() / t as f64,
        AggregationStrategy::DiagMax => {
            (0..t).map(|i| cell(i, i)).fold(f64::NEG_INFINITY, f64::max)
        }
        AggregationStrategy::BlockMean => {
            let mut sum = 0.0;
            for i in 0..t {
                for j in 0..t {
                    sum += cell(i, j);
                }
            }
            sum / (t * t) as f64
        }
        AggregationStrategy::BlockMax => {
            let mut best = f64::NEG_INFINITY;
            for i in 0..t {
                for j in 0..t {
                    best = best.max(cell(i, j));
                }
            }
            best
        }
    })
}

/// N×N score grid between every query and target video.
#[derive(Clone, Debug)]
pub struct RankingMatrix {
    scores: Tensor,
    ids: Vec<String>,
    pub direction: RetrievalDirection,
    pub strategy: AggregationStrategy,
}

impl RankingMatrix {
    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Target indices for one query, best first; ties break toward the
    /// lower target index.
    pub fn ranked_targets(&self, query: usize) -> Vec<usize> {
        let n = self.len();
        let row = &self.scores.data()[query * n..(query + 1) * n];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        order
    }
}

/// Score every query-target pair of the set under one direction/strategy.
pub fn build_ranking(
    set: &EmbeddingSequenceSet,
    direction: RetrievalDirection,
    strategy: AggregationStrategy,
) -> Result<RankingMatrix> {
    let n = set.len();
    if n < 2 {
        return Err(Error::Input(format!("ranking needs at least 2 videos, got {n}")));
    }
    let mut data = Vec::with_capacity(n * n);
    for q in 0..n {
        for t in 0..n {
            let (query, target) = match direction {
                RetrievalDirection::VisualToAudio => (set.visual(q), set.audio(t)),
                RetrievalDirection::AudioToVisual => (set.audio(q), set.visual(t)),
            };
            data.push(pair_similarity(query, target, strategy)?);
        }
    }
    Ok(RankingMatrix {
        scores: Tensor::from_vec(vec![n, n], data)?,
        ids: set.ids().to_vec(),
        direction,
        strategy,
    })
}

/// Fraction of queries whose true match ranks in the top k.
pub fn recall_at_k(ranking: &RankingMatrix, k: usize) -> Result<f64> {
    let n = ranking.len();
    if k == 0 || k > n {
        return Err(Error::Parameter {
            name: "k",
            detail: format!("must lie in [1, {n}], got {k}"),
        });
    }
    let mut hits = 0;
    for q in 0..n {
        let ranked = ranking.ranked_targets(q);
        if ranked[..k].iter().any(|&t| ranking.ids[t] == ranking.ids[q]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// How the prediction map binarizes for IoU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouThreshold {
    /// Per-image mean of the prediction map.
    MapMean,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub average_precision: f64,
    pub iou: f64,
}

/// Average precision over the pixel ranking plus IoU of the binarized map.
/// An empty ground-truth mask is an error the harness treats as "class
/// absent, skip".
pub fn segmentation_scores(
    pred: &Tensor,
    gt: &Tensor,
    threshold: IouThreshold,
) -> Result<SegmentationScore> {
    if pred.shape() != gt.shape() {
        return Err(Error::Input(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let positives: usize = gt.data().iter().filter(|&&v| v != 0.0).count();
    if positives == 0 {
        return Err(Error::Input("empty ground-truth mask (class absent)".into()));
    }

    // rank pixels by predicted score, ties broken by pixel index
    let n = pred.numel();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pred.data()[b].partial_cmp(&pred.data()[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &px) in order.iter().enumerate() {
        if gt.data()[px] != 0.0 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    ap /= positives as f64;

    let thr = match threshold {
        IouThreshold::MapMean => pred.data().iter().sum::<f64>() / n as f64,
        IouThreshold::Fixed(v) => v,
    };
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let pb = *p >= thr;
        let gb = *g != 0.0;
        if pb && gb {
            inter += 1;
        }
        if pb || gb {
            union += 1;
        }
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    Ok(SegmentationScore { average_precision: ap, iou })
}

/// Which token class to read a probe feature from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    Global,
    RegisterMean,
    PatchMean,
}

/// Pull a probe feature vector out of an encoded pair.
pub fn probe_features(
    tape: &Tape,
    pair: &EncodedPair,
    source: ProbeSource,
    modality: Modality,
) -> Result<Tensor> {
    let column_mean = |t: &Tensor| -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.data()[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Tensor::from_vec(vec![1, c], out).expect("validated extents")
    };
    match source {
        ProbeSource::Global => {
            let g = match modality {
                Modality::Audio => pair.g_audio,
                Modality::Visual => pair.g_visual,
            };
            let g = g.ok_or_else(|| {
                Error::Config("global probe source requires the global token".into())
            })?;
            Ok(tape.value(g).clone())
        }
        ProbeSource::RegisterMean => {
            let r = match modality {
                Modality::Audio => pair.regs_audio,
                Modality::Visual => pair.regs_visual,
            };
            let r = r.ok_or_else(|| {
                Error::Config("register probe source requires n_registers > 0".into())
            })?;
            Ok(column_mean(tape.value(r)))
        }
        ProbeSource::PatchMean => {
            let h = match modality {
                Modality::Audio => pair.h_audio,
                Modality::Visual => pair.h_visual,
            };
            Ok(column_mean(tape.value(h)))
        }
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-30 || nb < 1e-30 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Average-linkage agglomerative clustering under cosine distance, merging
/// while the closest pair of clusters sits within the threshold.
fn agglomerate(features: &Tensor, threshold: f64) -> Vec<Vec<usize>> {
    let (t, d) = (features.rows(), features.cols());
    let mut clusters: Vec<Vec<usize>> = (0..t).map(|i| vec![i]).collect();
    let dist = |a: usize, b: usize| {
        cosine_distance(
            &features.data()[a * d..(a + 1) * d],
            &features.data()[b * d..(b + 1) * d],
        )
    };
    loop {
        if clusters.len() == 1 {
            break;
        }
        let mut best = (0usize, 0usize, f64::INFINITY);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut sum = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        sum += dist(a, b);
                    }
                }
                let avg = sum / (clusters[i].len() * clusters[j].len()) as f64;
                if avg < best.2 {
                    best = (i, j, avg);
                }
            }
        }
        if best.2 > threshold {
            break;
        }
        let merged = clusters.remove(best.1);
        clusters[best.0].extend(merged);
    }
    clusters
}

fn labels_from_clusters(t: usize, clusters: &[Vec<usize>]) -> Vec<usize> {
    let mut raw = vec![0usize; t];
    for (c, members) in clusters.iter().enumerate() {
        for &m in members {
            raw[m] = c;
        }
    }
    renumber_by_first_occurrence(&raw)
}

fn renumber_by_first_occurrence(raw: &[usize]) -> Vec<usize> {
    let mut mapping: Vec<(usize, usize)> = Vec::new();
    let mut out = Vec::with_capacity(raw.len());
    for &label in raw {
        let next = mapping.len();
        let id = match mapping.iter().find(|(orig, _)| *orig == label) {
            Some((_, new)) => *new,
            None => {
                mapping.push((label, next));
                next
            }
        };
        out.push(id);
    }
    out
}

fn kmeans(features: &Tensor, k: usize, seed: u64) -> Vec<usize> {
    let (t, d) = (features.rows(), features.cols());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let row = |i: usize| &features.data()[i * d..(i + 1) * d];

    // unit-normalize so Euclidean k-means matches the cosine geometry
    let mut pts = vec![0.0; t * d];
    for i in 0..t {
        let r = row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
        for j in 0..d {
            pts[i * d + j] = r[j] / norm;
        }
    }
    let sqdist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![pts[rng.gen_range(0..t) * d..][..d].to_vec()];
    while centers.len() < k {
        let dists: Vec<f64> = (0..t)
            .map(|i| {
                centers
                    .iter()
                    .map(|c| sqdist(&pts[i * d..(i + 1) * d], c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..t)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = t - 1;
            for (i, &w) in dists.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(pts[next * d..(next + 1) * d].to_vec());
    }

    let mut assign = vec![0usize; t];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..t {
            let mut best = (0usize, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let dd = sqdist(&pts[i * d..(i + 1) * d], center);
                if dd < best.1 {
                    best = (c, dd);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..t).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..d {
                center[j] = members.iter().map(|&i| pts[i * d + j]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    renumber_by_first_occurrence(&assign)
}

/// Split `T` per-timestep feature vectors into exactly `k` contiguous-or-not
/// segments: agglomerative clustering with the distance threshold bisected
/// over [0, 2] until the cluster count hits `k`, falling back to seeded
/// k-means when bisection cannot land on `k`.
pub fn temporal_segment(features: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    if !features.is_2d() {
        return Err(Error::Input(format!(
            "features must be (T, dim), got {:?}",
            features.shape()
        )));
    }
    let t = features.rows();
    if k == 0 || k > t {
        return Err(Error::Parameter {
            name: "target_segments",
            detail: format!("must lie in [1, {t}], got {k}"),
        });
    }
    if k == 1 {
        return Ok(vec![0; t]);
    }
    let (mut lo, mut hi) = (0.0f64, 2.0f64);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        let clusters = agglomerate(features, mid);
        match clusters.len().cmp(&k) {
            std::cmp::Ordering::Equal => return Ok(labels_from_clusters(t, &clusters)),
            std::cmp::Ordering::Greater => lo = mid,
            std::cmp::Ordering::Less => hi = mid,
        }
    }
    Ok(kmeans(features, k, seed))
}

/// Timestep indices (1-based positions of the first frame of a new segment)
/// where the label sequence changes.
pub fn boundaries_of(labels: &[usize]) -> Vec<usize> {
    labels
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| (w[0] != w[1]).then_some(i + 1))
        .collect()
}

/// Fraction of true boundaries matched by a predicted boundary within the
/// given frame tolerance.
pub fn boundary_recall(true_bounds: &[usize], pred_bounds: &[usize], tolerance: usize) -> f64 {
    if true_bounds.is_empty() {
        return 1.0;
    }
    let hits = true_bounds
        .iter()
        .filter(|&&tb| {
            pred_bounds
                .iter()
                .any(|&pb| tb.abs_diff(pb) <= tolerance)
        })
        .count();
    hits as f64 / true_bounds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal_set(t: usize, dim: usize) -> Tensor {
        let mut data = vec![0.0; t * dim];
        for i in 0..t {
            data[i * dim + i] = 1.0;
        }
        Tensor::from_vec(vec![t, dim], data).unwrap()
    }

    #[test]
    fn identity_similarity_closed_forms() {
        let v = orthonormal_set(4, 8);
        assert!((pair_similarity(&v, &v, AggregationStrategy::DiagMean).unwrap() - 1.0).abs() < 1e-12);
        assert!((pair_similarity(&v, &v, AggregationStrategy::BlockMean).unwrap() - 0.25).abs() < 1e-12);
        assert!((pair_similarity(&v, &v, AggregationStrategy::DiagMax).unwrap() - 1.0).abs() < 1e-12);
        assert!((pair_similarity(&v, &v, AggregationStrategy::BlockMax).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diag_mean_matches_per_timestep_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let q = normalize_rows(&Tensor::randn(vec![5, 7], 1.0, &mut rng)).unwrap();
        let t = normalize_rows(&Tensor::randn(vec![5, 7], 1.0, &mut rng)).unwrap();
        let got = pair_similarity(&q, &t, AggregationStrategy::DiagMean).unwrap();
        let mut brute = 0.0;
        for i in 0..5 {
            let a = &q.data()[i * 7..(i + 1) * 7];
            let b = &t.data()[i * 7..(i + 1) * 7];
            brute += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        }
        brute /= 5.0;
        assert!((got - brute).abs() < 1e-12);
    }

    #[test]
    fn diagonal_focus_beats_block_mean_on_aligned_pairs() {
        for t in [2, 4, 16] {
            let v = orthonormal_set(t, t);
            let d = pair_similarity(&v, &v, AggregationStrategy::DiagMean).unwrap();
            let b = pair_similarity(&v, &v, AggregationStrategy::BlockMean).unwrap();
            assert!(d > b, "T={t}: diag {d} vs block {b}");
        }
    }

    #[test]
    fn mismatched_timesteps_are_rejected() {
        let a = orthonormal_set(3, 4);
        let b = orthonormal_set(4, 4);
        assert!(pair_similarity(&a, &b, AggregationStrategy::DiagMean).is_err());
    }

    fn toy_set(n: usize, t: usize, dim: usize, seed: u64) -> EmbeddingSequenceSet {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ids = (0..n).map(|i| format!("v{i}")).collect();
        let visual = (0..n).map(|_| Tensor::randn(vec![t, dim], 1.0, &mut rng)).collect();
        let audio = (0..n).map(|_| Tensor::randn(vec![t, dim], 1.0, &mut rng)).collect();
        EmbeddingSequenceSet::new(ids, visual, audio).unwrap()
    }

    #[test]
    fn perfectly_matched_pair_ranks_first() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ids = vec!["a".to_string(), "b".to_string()];
        let va = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let vb = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        // audio of "a" equals its visual; audio of "b" is unrelated
        let set = EmbeddingSequenceSet::new(
            ids,
            vec![va.clone(), vb.clone()],
            vec![va.clone(), Tensor::randn(vec![3, 6], 1.0, &mut rng)],
        )
        .unwrap();
        let r = build_ranking(&set, RetrievalDirection::VisualToAudio, AggregationStrategy::DiagMean).unwrap();
        assert_eq!(r.ranked_targets(0)[0], 0);
        assert!((recall_at_k(&r, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permuting_targets_relabels_columns_only() {
        let set = toy_set(4, 3, 6, 3);
        let r = build_ranking(&set, RetrievalDirection::VisualToAudio, AggregationStrategy::DiagMean).unwrap();
        // permute the videos and rebuild
        let perm = [2usize, 0, 3, 1];
        let ids: Vec<String> = perm.iter().map(|&i| set.ids()[i].clone()).collect();
        let vis: Vec<Tensor> = perm.iter().map(|&i| set.visual(i).clone()).collect();
        let aud: Vec<Tensor> = perm.iter().map(|&i| set.audio(i).clone()).collect();
        let permuted_set = EmbeddingSequenceSet::new(ids, vis, aud).unwrap();
        let rp = build_ranking(&permuted_set, RetrievalDirection::VisualToAudio, AggregationStrategy::DiagMean).unwrap();
        // ranked id lists are unchanged up to the relabeling
        for (new_q, &old_q) in perm.iter().enumerate() {
            let old_ids: Vec<&String> =
                r.ranked_targets(old_q).iter().map(|&t| &set.ids()[t]).collect();
            let new_ids: Vec<&String> =
                rp.ranked_targets(new_q).iter().map(|&t| &permuted_set.ids()[t]).collect();
            assert_eq!(old_ids, new_ids);
        }
    }

    #[test]
    fn hand_built_matrix_matches_sort_oracle() {
        let r = RankingMatrix {
            scores: Tensor::from_vec(
                vec![3, 3],
                vec![0.1, 0.9, 0.5, 0.3, 0.3, 0.2, 0.7, 0.6, 0.8],
            )
            .unwrap(),
            ids: vec!["a".into(), "b".into(), "c".into()],
            direction: RetrievalDirection::VisualToAudio,
            strategy: AggregationStrategy::DiagMean,
        };
        assert_eq!(r.ranked_targets(0), vec![1, 2, 0]);
        // tie between targets 0 and 1 breaks toward the lower index
        assert_eq!(r.ranked_targets(1), vec![0, 1, 2]);
        assert_eq!(r.ranked_targets(2), vec![2, 0, 1]);
    }

    #[test]
    fn adding_a_row_constant_keeps_the_ranking() {
        let set = toy_set(5, 2, 4, 4);
        let r = build_ranking(&set, RetrievalDirection::AudioToVisual, AggregationStrategy::BlockMean).unwrap();
        let before = r.ranked_targets(2);
        let mut shifted = r.clone();
        let n = shifted.len();
        for j in 0..n {
            shifted.scores.data_mut()[2 * n + j] += 5.0;
        }
        assert_eq!(before, shifted.ranked_targets(2));
    }

    #[test]
    fn recall_bounds_and_monotonicity() {
        let set = toy_set(6, 2, 4, 5);
        let r = build_ranking(&set, RetrievalDirection::VisualToAudio, AggregationStrategy::DiagMean).unwrap();
        assert!(recall_at_k(&r, 0).is_err());
        assert!(recall_at_k(&r, 7).is_err());
        assert!((recall_at_k(&r, 6).unwrap() - 1.0).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 1..=6 {
            let rk = recall_at_k(&r, k).unwrap();
            assert!(rk >= prev);
            prev = rk;
        }
    }

    #[test]
    fn random_scores_hit_chance_recall_at_one() {
        // E[R@1] for iid scores is 1/N; averaged over many trials it should
        // land within 3 sigma of that
        let n = 64;
        let trials = 1000;
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut total = 0.0;
        for _ in 0..trials {
            let scores = Tensor::randn(vec![n, n], 1.0, &mut rng);
            let r = RankingMatrix {
                scores,
                ids: (0..n).map(|i| format!("v{i}")).collect(),
                direction: RetrievalDirection::VisualToAudio,
                strategy: AggregationStrategy::DiagMean,
            };
            total += recall_at_k(&r, 1).unwrap();
        }
        let mean = total / trials as f64;
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / (n * trials) as f64).sqrt();
        assert!(
            (mean - p).abs() < 3.0 * sigma,
            "mean {mean} deviates from {p} by more than {}",
            3.0 * sigma
        );
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = Tensor::from_vec(vec![4, 4], (0..16).map(|i| f64::from(i % 3 == 0)).collect()).unwrap();
        let s = segmentation_scores(&gt, &gt, IouThreshold::MapMean).unwrap();
        assert!((s.average_precision - 1.0).abs() < 1e-12);
        assert!((s.iou - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complement_prediction_has_zero_iou() {
        let gt = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let pred = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = segmentation_scores(&pred, &gt, IouThreshold::Fixed(0.5)).unwrap();
        assert_eq!(s.iou, 0.0);
    }

    #[test]
    fn empty_ground_truth_is_rejected() {
        let gt = Tensor::zeros(vec![2, 2]);
        let pred = Tensor::full(vec![2, 2], 0.5);
        assert!(segmentation_scores(&pred, &gt, IouThreshold::MapMean).is_err());
    }

    #[test]
    fn random_prediction_on_half_mask_gives_half_ap() {
        let side = 16;
        let mut gt_data = vec![0.0; side * side];
        for (i, v) in gt_data.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = 1.0;
            }
        }
        let gt = Tensor::from_vec(vec![side, side], gt_data).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let trials = 200;
        let mut total = 0.0;
        for _ in 0..trials {
            let pred = Tensor::randn(vec![side, side], 1.0, &mut rng);
            total += segmentation_scores(&pred, &gt, IouThreshold::MapMean).unwrap().average_precision;
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean AP {mean}");
    }

    #[test]
    fn ap_is_invariant_to_monotone_transforms() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let pred = Tensor::randn(vec![8, 8], 1.0, &mut rng);
        let gt = Tensor::from_vec(
            vec![8, 8],
            (0..64).map(|i| f64::from(i % 5 == 0)).collect(),
        )
        .unwrap();
        let base = segmentation_scores(&pred, &gt, IouThreshold::MapMean).unwrap().average_precision;
        let squashed = pred.map(|v| (3.0 * v).tanh() * 10.0 + 2.0);
        let after = segmentation_scores(&squashed, &gt, IouThreshold::MapMean).unwrap().average_precision;
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn separable_blocks_recover_the_boundary() {
        let mut data = vec![0.0; 16 * 4];
        for i in 0..16 {
            if i < 8 {
                data[i * 4] = 1.0;
            } else {
                data[i * 4 + 1] = 1.0;
            }
        }
        let feats = Tensor::from_vec(vec![16, 4], data).unwrap();
        let labels = temporal_segment(&feats, 2, 0).unwrap();
        let mut want = vec![0usize; 8];
        want.extend(vec![1usize; 8]);
        assert_eq!(labels, want);
        assert_eq!(boundaries_of(&labels), vec![8]);
    }

    #[test]
    fn degenerate_cluster_counts() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let feats = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        assert_eq!(temporal_segment(&feats, 1, 0).unwrap(), vec![0; 6]);
        let singletons = temporal_segment(&feats, 6, 0).unwrap();
        assert_eq!(singletons, vec![0, 1, 2, 3, 4, 5]);
        assert!(temporal_segment(&feats, 7, 0).is_err());
        assert!(temporal_segment(&feats, 0, 0).is_err());
    }

    #[test]
    fn clustering_ignores_positive_scaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let feats = Tensor::randn(vec![10, 5], 1.0, &mut rng);
        let scaled = feats.map(|v| v * 42.0);
        for k in [2, 3, 5] {
            assert_eq!(
                temporal_segment(&feats, k, 3).unwrap(),
                temporal_segment(&scaled, k, 3).unwrap(),
                "k={k}"
            );
        }
    }


    #[test]
    fn probe_sources_select_the_right_tokens() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let regs = tape.constant(Tensor::from_vec(vec![2, 3], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap());
        let h = tape.constant(Tensor::from_vec(vec![4, 3], (0..12).map(|i| i as f64).collect()).unwrap());
        let pair = EncodedPair {
            g_audio: Some(g),
            g_visual: None,
            regs_audio: Some(regs),
            regs_visual: None,
            h_audio: h,
            h_visual: h,
            joint_audio: h,
            joint_visual: h,
            visual_fully_unmasked: true,
        };
        let got = probe_features(&tape, &pair, ProbeSource::Global, Modality::Audio).unwrap();
        assert_eq!(got.data(), &[1.0, 2.0, 3.0]);
        // identical registers collapse to that vector
        let rm = probe_features(&tape, &pair, ProbeSource::RegisterMean, Modality::Audio).unwrap();
        assert_eq!(rm.data(), &[0.5, 0.5, 0.5]);
        // patch mean equals the pooled representation
        let pm = probe_features(&tape, &pair, ProbeSource::PatchMean, Modality::Audio).unwrap();
        let mut t2 = Tape::new();
        let h2 = t2.constant(tape.value(h).clone());
        let pair2 = EncodedPair {
            g_audio: None,
            g_visual: None,
            regs_audio: None,
            regs_visual: None,
            h_audio: h2,
            h_visual: h2,
            joint_audio: h2,
            joint_visual: h2,
            visual_fully_unmasked: true,
        };
        let pooled = crate::model::pooled_repr(&mut t2, &pair2, Modality::Audio).unwrap();
        assert_eq!(pm.data(), t2.value(pooled).data());
    }

    #[test]
    fn register_probe_without_registers_is_a_config_error() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(vec![2, 3]));
        let pair = EncodedPair {
            g_audio: None,
            g_visual: None,
            regs_audio: None,
            regs_visual: None,
            h_audio: h,
            h_visual: h,
            joint_audio: h,
            joint_visual: h,
            visual_fully_unmasked: true,
        };
        assert!(matches!(
            probe_features(&tape, &pair, ProbeSource::RegisterMean, Modality::Audio),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            probe_features(&tape, &pair, ProbeSource::Global, Modality::Audio),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn boundary_recall_tolerance() {
        assert_eq!(boundary_recall(&[8], &[8], 0), 1.0);
        assert_eq!(boundary_recall(&[8], &[7], 1), 1.0);
        assert_eq!(boundary_recall(&[8], &[6], 1), 0.0);
        assert_eq!(boundary_recall(&[4, 12], &[5], 1), 0.5);
        assert_eq!(boundary_recall(&[], &[3], 1), 1.0);
    }
}
