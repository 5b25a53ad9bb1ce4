//! Patch extraction, unstructured random masking and token embedding.
//!
//! Inputs are patchified into non-overlapping p×p patches in raster order; a
//! fraction of patches is masked uniformly at random and the survivors are
//! embedded as `projection(patch) + positional + modality`. Positional codes
//! are fixed 2-d sin-cos tables over the full grid, so a token's code depends
//! only on its grid cell, never on the mask.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Visual,
}

/// Split an image (C,H,W) or spectrogram (H,W) into flattened p×p patches,
/// raster order, channel-major within each patch.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (channels, h, w) = match x.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::Shape {
                op: "patchify",
                detail: format!("expected 2-d or 3-d input, got {other:?}"),
            })
        }
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape {
            op: "patchify",
            detail: format!("dims {h}x{w} not divisible by patch size {patch}"),
        });
    }
    let (rows, cols) = (h / patch, w / patch);
    let plen = patch * patch * channels;
    let mut out = Vec::with_capacity(rows * cols * plen);
    for gr in 0..rows {
        for gc in 0..cols {
            for ch in 0..channels {
                for dy in 0..patch {
                    let y = gr * patch + dy;
                    let base = ch * h * w + y * w + gc * patch;
                    out.extend_from_slice(&x.data()[base..base + patch]);
                }
            }
        }
    }
    Tensor::from_vec(vec![rows * cols, plen], out)
}

/// Patch grid of an input under a patch size, without extracting anything.
pub fn grid_of(x: &Tensor, patch: usize) -> Result<(usize, usize)> {
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        [_, h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                op: "grid_of",
                detail: format!("expected 2-d or 3-d input, got {other:?}"),
            })
        }
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape {
            op: "grid_of",
            detail: format!("dims {h}x{w} not divisible by patch size {patch}"),
        });
    }
    Ok((h / patch, w / patch))
}

/// Choose `round(ratio*n)` masked positions uniformly at random without
/// replacement. Both returned index lists are ascending.
pub fn mask_random(
    n: usize,
    ratio: f64,
    rng: &mut ChaCha20Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Parameter {
            name: "mask_ratio",
            detail: format!("must lie in [0, 1), got {ratio}"),
        });
    }
    let num_masked = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut masked: Vec<usize> = order[..num_masked].to_vec();
    let mut kept: Vec<usize> = order[num_masked..].to_vec();
    masked.sort_unstable();
    kept.sort_unstable();
    Ok((kept, masked))
}

/// Fixed 2-d sin-cos positional table for a (rows, cols) grid, shape
/// (rows*cols, dim). Half the channels encode the row, half the column.
pub fn sincos_table(grid: (usize, usize), dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Parameter {
            name: "dim",
            detail: format!("positional table needs dim divisible by 4, got {dim}"),
        });
    }
    let (rows, cols) = grid;
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(rows * cols * dim);
    let axis = |pos: usize, out: &mut Vec<f64>| {
        for k in 0..quarter {
            let omega = 1.0 / 10_000f64.powf(k as f64 / quarter as f64);
            out.push((pos as f64 * omega).sin());
        }
        for k in 0..quarter {
            let omega = 1.0 / 10_000f64.powf(k as f64 / quarter as f64);
            out.push((pos as f64 * omega).cos());
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            axis(r, &mut data);
            axis(c, &mut data);
        }
    }
    Tensor::from_vec(vec![rows * cols, dim], data)
}

/// Unmasked patch tokens of one modality with the mask bookkeeping needed to
/// reconstruct: which grid positions survived, which were hidden, and the raw
/// patch vectors of the hidden set (the reconstruction targets).
#[derive(Clone, Debug)]
pub struct TokenBatch {
    /// Raw kept patches, (num_kept, patch_len); embedding happens on-tape.
    pub patches: Tensor,
    pub kept_indices: Vec<usize>,
    pub masked_indices: Vec<usize>,
    /// Raw patches at the masked positions, (num_masked, patch_len).
    pub targets: Option<Tensor>,
    pub modality: Modality,
    pub grid: (usize, usize),
}

impl TokenBatch {
    pub fn build(
        input: &Tensor,
        patch: usize,
        ratio: f64,
        modality: Modality,
        rng: &mut ChaCha20Rng,
    ) -> Result<TokenBatch> {
        let all = patchify(input, patch)?;
        let grid = grid_of(input, patch)?;
        let n = all.rows();
        let (kept_indices, masked_indices) = mask_random(n, ratio, rng)?;
        let plen = all.cols();
        let select = |idx: &[usize]| -> Option<Tensor> {
            if idx.is_empty() {
                return None;
            }
            let mut data = Vec::with_capacity(idx.len() * plen);
            for &i in idx {
                data.extend_from_slice(&all.data()[i * plen..(i + 1) * plen]);
            }
            Some(Tensor::from_vec(vec![idx.len(), plen], data).expect("validated extents"))
        };
        let patches = select(&kept_indices).ok_or_else(|| {
            Error::Input("masking left zero tokens; ratio too high for patch count".into())
        })?;
        let targets = select(&masked_indices);
        Ok(TokenBatch { patches, kept_indices, masked_indices, targets, modality, grid })
    }

    /// All patches kept; the evaluation-time forward pass.
    pub fn unmasked(input: &Tensor, patch: usize, modality: Modality) -> Result<TokenBatch> {
        let patches = patchify(input, patch)?;
        let grid = grid_of(input, patch)?;
        let n = patches.rows();
        Ok(TokenBatch {
            patches,
            kept_indices: (0..n).collect(),
            masked_indices: Vec::new(),
            targets: None,
            modality,
            grid,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn num_kept(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn num_masked(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patches.cols()
    }
}

/// Embed kept patches on the tape: linear projection plus the positional
/// rows of the kept grid cells plus a learned modality vector.
pub fn embed(
    tape: &mut Tape,
    batch: &TokenBatch,
    proj_w: NodeId,
    proj_b: NodeId,
    modality_vec: NodeId,
    pos_table: NodeId,
) -> Result<NodeId> {
    if tape.value(pos_table).rows() != batch.num_patches() {
        return Err(Error::Shape {
            op: "embed",
            detail: format!(
                "positional table has {} rows, grid {:?} needs {}",
                tape.value(pos_table).rows(),
                batch.grid,
                batch.num_patches()
            ),
        });
    }
    let raw = tape.constant(batch.patches.clone());
    let projected = tape.linear(raw, proj_w, proj_b)?;
    let pos = tape.gather_rows(pos_table, batch.kept_indices.clone())?;
    let with_pos = tape.add(projected, pos)?;
    tape.add_bias(with_pos, modality_vec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_spectrogram_yields_208_patches() {
        let spec = Tensor::zeros(vec![128, 416]);
        let p = patchify(&spec, 16).unwrap();
        assert_eq!(p.shape(), &[208, 256]);
    }

    #[test]
    fn default_frame_yields_196_patches() {
        let img = Tensor::zeros(vec![3, 224, 224]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[196, 768]);
    }

    #[test]
    fn single_patch_input_is_identity() {
        let x = Tensor::from_vec(vec![16, 16], (0..256).map(|i| i as f64).collect()).unwrap();
        let p = patchify(&x, 16).unwrap();
        assert_eq!(p.shape(), &[1, 256]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn non_divisible_dims_error() {
        let x = Tensor::zeros(vec![30, 40]);
        assert!(matches!(patchify(&x, 16), Err(Error::Shape { .. })));
    }

    #[test]
    fn raster_order_and_channel_layout() {
        // 1x4x4 input with patch 2: patch 0 is the top-left 2x2 block
        let x = Tensor::from_vec(vec![1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap();
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn mask_counts_match_rounding() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for (n, ratio, expect_masked) in [
            (208, 0.75, 156),
            (196, 0.75, 147),
            (208, 0.6, 125),
            (208, 0.9, 187),
            (196, 0.6, 118),
            (196, 0.9, 176),
        ] {
            let (kept, masked) = mask_random(n, ratio, &mut rng).unwrap();
            assert_eq!(masked.len(), expect_masked, "n={n} ratio={ratio}");
            assert_eq!(kept.len(), n - expect_masked);
        }
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let (kept, masked) = mask_random(196, 0.0, &mut rng).unwrap();
        assert_eq!(kept, (0..196).collect::<Vec<_>>());
        assert!(masked.is_empty());
    }

    #[test]
    fn ratio_bounds_are_enforced() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(mask_random(10, 1.0, &mut rng).is_err());
        assert!(mask_random(10, -0.1, &mut rng).is_err());
    }

    #[test]
    fn masking_is_deterministic_per_seed() {
        let a = mask_random(208, 0.75, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let b = mask_random(208, 0.75, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kept_and_masked_partition_the_grid() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for n in [5, 52, 208] {
            for ratio in [0.0, 0.3, 0.6, 0.75, 0.9] {
                let (kept, masked) = mask_random(n, ratio, &mut rng).unwrap();
                let mut union: Vec<usize> = kept.iter().chain(masked.iter()).copied().collect();
                union.sort_unstable();
                assert_eq!(union, (0..n).collect::<Vec<_>>());
                assert!(kept.windows(2).all(|w| w[0] < w[1]));
                assert!(masked.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn positional_codes_are_distinct_across_cells() {
        let table = sincos_table((8, 26), 64).unwrap();
        assert_eq!(table.rows(), 208);
        for a in 0..table.rows() {
            for b in a + 1..table.rows() {
                let ra = &table.data()[a * 64..(a + 1) * 64];
                let rb = &table.data()[b * 64..(b + 1) * 64];
                assert_ne!(ra, rb, "cells {a} and {b} share a positional code");
            }
        }
    }

    #[test]
    fn targets_are_bit_exact_patch_copies() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let input = Tensor::randn(vec![1, 32, 32], 1.0, &mut rng);
        let all = patchify(&input, 16).unwrap();
        let batch = TokenBatch::build(&input, 16, 0.5, Modality::Visual, &mut rng).unwrap();
        let targets = batch.targets.as_ref().unwrap();
        for (k, &idx) in batch.masked_indices.iter().enumerate() {
            let want = &all.data()[idx * 256..(idx + 1) * 256];
            let got = &targets.data()[k * 256..(k + 1) * 256];
            assert_eq!(want, got);
        }
    }

    #[test]
    fn embed_reduces_to_pos_plus_modality_on_zero_patches() {
        let input = Tensor::zeros(vec![1, 32, 32]);
        let batch = TokenBatch::unmasked(&input, 16, Modality::Audio).unwrap();
        let dim = 16;
        let mut tape = Tape::new();
        let w = tape.var(Tensor::full(vec![256, dim], 0.37));
        let b = tape.var(Tensor::zeros(vec![1, dim]));
        let m = tape.var(Tensor::row((0..dim).map(|i| i as f64).collect()));
        let table = sincos_table(batch.grid, dim).unwrap();
        let pos = tape.constant(table.clone());
        let out = embed(&mut tape, &batch, w, b, m, pos).unwrap();
        let got = tape.value(out);
        for r in 0..batch.num_kept() {
            for c in 0..dim {
                let want = table.at2(r, c) + c as f64;
                assert!((got.at2(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positional_code_ignores_masking() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let input = Tensor::randn(vec![1, 32, 32], 1.0, &mut rng);
        let masked = TokenBatch::build(&input, 16, 0.5, Modality::Visual, &mut rng).unwrap();
        let full = TokenBatch::unmasked(&input, 16, Modality::Visual).unwrap();
        let dim = 16;
        let run = |batch: &TokenBatch| {
            let mut tape = Tape::new();
            // zero projection so only pos + modality remain
            let w = tape.var(Tensor::zeros(vec![256, dim]));
            let b = tape.var(Tensor::zeros(vec![1, dim]));
            let m = tape.var(Tensor::full(vec![1, dim], 0.5));
            let table = tape.constant(sincos_table(batch.grid, dim).unwrap());
            let out = embed(&mut tape, batch, w, b, m, table).unwrap();
            tape.value(out).clone()
        };
        let got_masked = run(&masked);
        let got_full = run(&full);
        for (row, &grid_idx) in masked.kept_indices.iter().enumerate() {
            for c in 0..dim {
                assert_eq!(got_masked.at2(row, c), got_full.at2(grid_idx, c));
            }
        }
    }
}
