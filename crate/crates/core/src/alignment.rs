//! Temporal alignment of video frames with spectrogram windows.
//!
//! Frame `i` of `T` maps to the spectrogram column `floor(i*S/T)`; a window
//! of `s_length` columns is centered there and clamped into `[0, S]` so that
//! every window keeps its full width.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column window `[start, end)` of a spectrogram.
pub type Window = (usize, usize);

/// Compute the aligned spectrogram window for frame `i` of `frames`.
pub fn align_window(i: usize, frames: usize, spec_len: usize, s_length: usize) -> Result<Window> {
    if s_length > spec_len {
        return Err(Error::Config(format!(
            "audio segment longer than clip: s_length {s_length} > spectrogram length {spec_len}"
        )));
    }
    if i >= frames {
        return Err(Error::Input(format!("frame index {i} out of range for {frames} frames")));
    }
    let center = i * spec_len / frames;
    let half = s_length / 2;
    let raw_start = center as i64 - half as i64;
    let max_start = (spec_len - s_length) as i64;
    let start = raw_start.clamp(0, max_start) as usize;
    Ok((start, start + s_length))
}

/// One video's frames paired with its full spectrogram and the per-frame
/// window table.
#[derive(Clone, Debug)]
pub struct AlignedPair {
    frames: Vec<Tensor>,
    spectrogram: Tensor,
    windows: Vec<Window>,
    s_length: usize,
}

impl AlignedPair {
    /// Validates shapes and computes the window for every frame. `patch`
    /// is the patch size the tokenizer will use; the window width must
    /// split into non-overlapping patches.
    pub fn new(
        frames: Vec<Tensor>,
        spectrogram: Tensor,
        s_length: usize,
        patch: usize,
    ) -> Result<AlignedPair> {
        if frames.is_empty() {
            return Err(Error::Input("a pair needs at least one frame".into()));
        }
        if !spectrogram.is_2d() {
            return Err(Error::Shape {
                op: "aligned_pair",
                detail: format!("spectrogram must be 2-d, got {:?}", spectrogram.shape()),
            });
        }
        if s_length % patch != 0 {
            return Err(Error::Config(format!(
                "s_length {s_length} not divisible by patch size {patch}"
            )));
        }
        let spec_len = spectrogram.cols();
        let t = frames.len();
        let shape0 = frames[0].shape().to_vec();
        for f in &frames {
            if f.shape() != shape0 {
                return Err(Error::Shape {
                    op: "aligned_pair",
                    detail: format!("frame shapes differ: {:?} vs {:?}", f.shape(), shape0),
                });
            }
        }
        let windows = (0..t)
            .map(|i| align_window(i, t, spec_len, s_length))
            .collect::<Result<Vec<_>>>()?;
        Ok(AlignedPair { frames, spectrogram, windows, s_length })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> &Tensor {
        &self.frames[t]
    }

    pub fn spectrogram(&self) -> &Tensor {
        &self.spectrogram
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn s_length(&self) -> usize {
        self.s_length
    }

    /// Copy of the spectrogram columns `[start, end)` for frame `t`,
    /// shaped (mel_bins, s_length).
    pub fn window_tensor(&self, t: usize) -> Tensor {
        let (start, end) = self.windows[t];
        let bins = self.spectrogram.rows();
        let cols = self.spectrogram.cols();
        let width = end - start;
        let mut data = Vec::with_capacity(bins * width);
        for b in 0..bins {
            data.extend_from_slice(&self.spectrogram.data()[b * cols + start..b * cols + end]);
        }
        Tensor::from_vec(vec![bins, width], data).expect("window extents validated")
    }

    /// Uniformly random (frame, window, t) sample for a training step.
    pub fn sample_training_pair(&self, rng: &mut ChaCha20Rng) -> (&Tensor, Tensor, usize) {
        let t = rng.gen_range(0..self.frames.len());
        (&self.frames[t], self.window_tensor(t), t)
    }

    /// All (frame, window, t) in temporal order; the evaluation-time sampling.
    pub fn sample_all_pairs(&self) -> Vec<(&Tensor, Tensor, usize)> {
        (0..self.frames.len())
            .map(|t| (&self.frames[t], self.window_tensor(t), t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn window_formulas_match_hand_evaluation() {
        // center 512 -> (304, 720)
        assert_eq!(align_window(8, 16, 1024, 416).unwrap(), (304, 720));
        // raw start -208 clamps to 0
        assert_eq!(align_window(0, 16, 1024, 416).unwrap(), (0, 416));
        // raw (752, 1168) clamps to (608, 1024)
        assert_eq!(align_window(15, 16, 1024, 416).unwrap(), (608, 1024));
    }

    #[test]
    fn overlong_segment_is_rejected() {
        let err = align_window(0, 16, 300, 416).unwrap_err();
        assert!(err.to_string().contains("audio segment longer than clip"));
    }

    #[test]
    fn windows_keep_width_and_bounds() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let t = rng.gen_range(1..64usize);
            let s_length = rng.gen_range(1..512usize);
            let s = rng.gen_range(s_length..=s_length + 4096);
            let i = rng.gen_range(0..t);
            let (start, end) = align_window(i, t, s, s_length).unwrap();
            assert_eq!(end - start, s_length);
            assert!(end <= s);
            // center preservation when the raw window fits
            let center = i * s / t;
            let raw_start = center as i64 - (s_length / 2) as i64;
            if raw_start >= 0 && raw_start + s_length as i64 <= s as i64 {
                assert_eq!(center - start, s_length / 2);
            }
        }
    }

    #[test]
    fn start_is_monotone_in_frame_index() {
        for (t, s, sl) in [(16, 1024, 416), (10, 700, 128), (7, 333, 96)] {
            let mut last = 0;
            for i in 0..t {
                let (start, _) = align_window(i, t, s, sl).unwrap();
                assert!(start >= last);
                last = start;
            }
        }
    }

    fn toy_pair(t: usize, bins: usize, s: usize, s_length: usize) -> AlignedPair {
        let frames = (0..t).map(|i| Tensor::full(vec![1, 4, 4], i as f64)).collect();
        let spec = Tensor::from_vec(
            vec![bins, s],
            (0..bins * s).map(|i| (i % s) as f64).collect(),
        )
        .unwrap();
        AlignedPair::new(frames, spec, s_length, 4).unwrap()
    }

    #[test]
    fn window_tensor_matches_columns() {
        let pair = toy_pair(4, 3, 64, 16);
        let (start, end) = pair.windows()[2];
        let w = pair.window_tensor(2);
        assert_eq!(w.shape(), &[3, 16]);
        for b in 0..3 {
            for (k, col) in (start..end).enumerate() {
                assert_eq!(w.at2(b, k), col as f64);
            }
        }
    }

    #[test]
    fn single_frame_always_samples_zero() {
        let pair = toy_pair(1, 2, 32, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..10 {
            let (_, _, t) = pair.sample_training_pair(&mut rng);
            assert_eq!(t, 0);
        }
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let pair = toy_pair(16, 2, 128, 32);
        let draw = |seed| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            (0..50).map(|_| pair.sample_training_pair(&mut rng).2).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn sampling_is_uniform_by_chi_squared() {
        let t = 16;
        let pair = toy_pair(t, 2, 128, 32);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 10_000;
        let mut counts = vec![0usize; t];
        for _ in 0..n {
            counts[pair.sample_training_pair(&mut rng).2] += 1;
        }
        let expected = n as f64 / t as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi2 0.99 quantile at 15 degrees of freedom
        assert!(stat < 30.5779, "chi-squared statistic {stat} too large");
    }

    #[test]
    fn all_pairs_cover_every_frame_in_order() {
        for t in [10, 16] {
            let pair = toy_pair(t, 2, 256, 32);
            let all = pair.sample_all_pairs();
            assert_eq!(all.len(), t);
            let mut last_start = 0;
            for (idx, (frame, window, ti)) in all.iter().enumerate() {
                assert_eq!(*ti, idx);
                assert_eq!(frame.data()[0], idx as f64);
                assert_eq!(window.shape(), &[2, 32]);
                let (start, _) = pair.windows()[idx];
                assert!(start >= last_start);
                last_start = start;
            }
        }
    }
}
