//! Patch masks in input space and their embedding-space counterparts.
//!
//! Convention throughout: 0 = masked, 1 = retained, for both the input mask
//! and the embedding mask.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, SampleShape};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("patch {patch_h}x{patch_w} does not tile a {height}x{width} sample")]
    NotTiling {
        patch_h: usize,
        patch_w: usize,
        height: usize,
        width: usize,
    },
    #[error("masking ratio {0} outside [0, 1)")]
    BadRatio(f64),
    #[error("token layout has {tokens} tokens but the grid has {patches} patches")]
    LayoutMismatch { tokens: usize, patches: usize },
    #[error("patch index {0} out of range")]
    PatchOutOfRange(usize),
    #[error("mask length {got} does not match sample length {expected}")]
    LengthMismatch { got: usize, expected: usize },
}

/// Partition of a sample into non-overlapping rectangular patches; every
/// patch spans all channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub shape: SampleShape,
    pub patch_h: usize,
    pub patch_w: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(shape: SampleShape, patch_h: usize, patch_w: usize) -> Result<Self, MaskError> {
        if patch_h == 0 || patch_w == 0 || shape.height % patch_h != 0 || shape.width % patch_w != 0 {
            return Err(MaskError::NotTiling {
                patch_h,
                patch_w,
                height: shape.height,
                width: shape.width,
            });
        }
        Ok(Self {
            shape,
            patch_h,
            patch_w,
            rows: shape.height / patch_h,
            cols: shape.width / patch_w,
        })
    }

    /// Number of patches `P`.
    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Elements per patch (`C * ph * pw`).
    pub fn patch_dim(&self) -> usize {
        self.shape.channels * self.patch_h * self.patch_w
    }

    /// Flat input indices owned by `patch`, in `(c, y, x)` order.
    pub fn patch_elements(&self, patch: usize) -> Vec<usize> {
        let (pr, pc) = (patch / self.cols, patch % self.cols);
        let (h, w) = (self.shape.height, self.shape.width);
        let mut out = Vec::with_capacity(self.patch_dim());
        for c in 0..self.shape.channels {
            for dy in 0..self.patch_h {
                for dx in 0..self.patch_w {
                    let y = pr * self.patch_h + dy;
                    let x = pc * self.patch_w + dx;
                    out.push(c * h * w + y * w + x);
                }
            }
        }
        out
    }

    /// Rearranges a flat sample into `P` rows of `patch_dim` values.
    pub fn patchify(&self, values: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(values.len());
        for p in 0..self.patches() {
            out.extend(self.patch_elements(p).into_iter().map(|i| values[i]));
        }
        out
    }
}

/// Number of patches masked at ratio `ratio`: `round(ratio * P)`, half up.
pub fn masked_count(patches: usize, ratio: f64) -> usize {
    (ratio * patches as f64 + 0.5).floor() as usize
}

/// A uniformly random set of `round(ratio * P)` patches, sorted.
pub fn random_mask(grid: &PatchGrid, ratio: f64, seed: u64) -> Result<Vec<usize>, MaskError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(MaskError::BadRatio(ratio));
    }
    let p = grid.patches();
    let k = masked_count(p, ratio).min(p);
    let mut rng = seed::rng(seed);
    let mut set = index::sample(&mut rng, p, k).into_vec();
    set.sort_unstable();
    Ok(set)
}

/// How a provider lays out its flat embedding: `tokens` contiguous blocks of
/// `dim` components, token `i` belonging to patch `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub tokens: usize,
    pub dim: usize,
}

impl TokenLayout {
    pub fn n(&self) -> usize {
        self.tokens * self.dim
    }
}

/// Embedding mask for a set of masked patches.
pub fn lift_to_embedding(masked: &[usize], patches: usize, layout: TokenLayout) -> Result<Vec<u8>, MaskError> {
    if layout.tokens != patches {
        return Err(MaskError::LayoutMismatch {
            tokens: layout.tokens,
            patches,
        });
    }
    let mut t_hat = vec![1u8; layout.n()];
    for &p in masked {
        if p >= patches {
            return Err(MaskError::PatchOutOfRange(p));
        }
        t_hat[p * layout.dim..(p + 1) * layout.dim].fill(0);
    }
    Ok(t_hat)
}

/// Input mask `t` for a set of masked patches.
pub fn input_mask(grid: &PatchGrid, masked: &[usize]) -> Result<Vec<u8>, MaskError> {
    let mut t = vec![1u8; grid.shape.numel()];
    for &p in masked {
        if p >= grid.patches() {
            return Err(MaskError::PatchOutOfRange(p));
        }
        for i in grid.patch_elements(p) {
            t[i] = 0;
        }
    }
    Ok(t)
}

/// `x ⊙ t`.
pub fn apply_input_mask(x: &Sample, t: &[u8]) -> Result<Sample, MaskError> {
    if t.len() != x.values.len() {
        return Err(MaskError::LengthMismatch {
            got: t.len(),
            expected: x.values.len(),
        });
    }
    let values = x
        .values
        .iter()
        .zip(t)
        .map(|(&v, &keep)| if keep == 1 { v } else { 0.0 })
        .collect();
    Ok(Sample {
        shape: x.shape,
        values,
    })
}

/// An input mask together with its embedding mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub masked_patches: Vec<usize>,
    pub ratio: f64,
    pub input: Vec<u8>,
    /// `None` for vector-mode providers, where no embedding mask exists.
    pub embedding: Option<Vec<u8>>,
}

impl MaskPair {
    pub fn new(
        grid: &PatchGrid,
        ratio: f64,
        masked_patches: Vec<usize>,
        layout: Option<TokenLayout>,
    ) -> Result<Self, MaskError> {
        let input = input_mask(grid, &masked_patches)?;
        let embedding = layout
            .map(|l| lift_to_embedding(&masked_patches, grid.patches(), l))
            .transpose()?;
        Ok(Self {
            masked_patches,
            ratio,
            input,
            embedding,
        })
    }

    pub fn random(grid: &PatchGrid, ratio: f64, seed: u64, layout: Option<TokenLayout>) -> Result<Self, MaskError> {
        let masked = random_mask(grid, ratio, seed)?;
        Self::new(grid, ratio, masked, layout)
    }

    /// `1 - t̂` as floats over `n` components; all ones in vector mode.
    pub fn loss_weights(&self, n: usize) -> Vec<f64> {
        match &self.embedding {
            Some(t_hat) => t_hat.iter().map(|&k| f64::from(1 - k)).collect(),
            None => vec![1.0; n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid16() -> PatchGrid {
        PatchGrid::new(SampleShape::new(1, 16, 16), 4, 4).unwrap()
    }

    #[test]
    fn default_ratio_masks_twelve_of_sixteen() {
        assert_eq!(random_mask(&grid16(), 0.75, 1).unwrap().len(), 12);
    }

    #[test]
    fn ablation_ratios_round_half_up() {
        let counts: Vec<usize> = [0.30, 0.45, 0.60, 0.90]
            .iter()
            .map(|&r| random_mask(&grid16(), r, 0).unwrap().len())
            .collect();
        assert_eq!(counts, vec![5, 7, 10, 14]);
        assert_eq!(masked_count(4, 0.625), 3); // 2.5 rounds up
    }

    #[test]
    fn zero_ratio_retains_everything() {
        let pair = MaskPair::random(&grid16(), 0.0, 3, None).unwrap();
        assert!(pair.masked_patches.is_empty());
        assert!(pair.input.iter().all(|&v| v == 1));
    }

    #[test]
    fn ratio_one_rejected() {
        assert_eq!(random_mask(&grid16(), 1.0, 0), Err(MaskError::BadRatio(1.0)));
        assert!(random_mask(&grid16(), -0.1, 0).is_err());
    }

    #[test]
    fn lift_block_structure() {
        let layout = TokenLayout { tokens: 4, dim: 2 };
        assert_eq!(lift_to_embedding(&[], 4, layout).unwrap(), vec![1; 8]);
        assert_eq!(
            lift_to_embedding(&[1], 4, layout).unwrap(),
            vec![1, 1, 0, 0, 1, 1, 1, 1]
        );
        assert!(matches!(
            lift_to_embedding(&[0], 5, layout),
            Err(MaskError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn input_masking_cases() {
        let grid = grid16();
        let x = Sample {
            shape: grid.shape,
            values: (0..256).map(|i| 1.0 + i as f64).collect(),
        };
        let ones = vec![1u8; 256];
        assert_eq!(apply_input_mask(&x, &ones).unwrap(), x);
        let zeros = vec![0u8; 256];
        assert!(apply_input_mask(&x, &zeros).unwrap().values.iter().all(|&v| v == 0.0));
        let t = input_mask(&grid, &[5]).unwrap();
        let y = apply_input_mask(&x, &t).unwrap();
        assert_eq!(y.values.iter().filter(|&&v| v == 0.0).count(), 16);
        assert!(apply_input_mask(&x, &ones[..10]).is_err());
    }

    #[test]
    fn patchify_groups_patch_elements() {
        let grid = PatchGrid::new(SampleShape::new(1, 4, 4), 2, 2).unwrap();
        let v: Vec<f64> = (0..16).map(f64::from).collect();
        let p = grid.patchify(&v);
        assert_eq!(&p[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[12..], &[10.0, 11.0, 14.0, 15.0]);
        assert!(PatchGrid::new(SampleShape::new(1, 5, 4), 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn mask_invariants(ratio in 0.0f64..0.99, seed in any::<u64>(), dim in 1usize..6) {
            let grid = grid16();
            let layout = TokenLayout { tokens: 16, dim };
            let pair = MaskPair::random(&grid, ratio, seed, Some(layout)).unwrap();
            let k = pair.masked_patches.len();
            prop_assert_eq!(k, masked_count(16, ratio));
            let t_hat = pair.embedding.as_ref().unwrap();
            prop_assert_eq!(t_hat.iter().filter(|&&v| v == 0).count(), dim * k);
            prop_assert_eq!(pair.input.iter().filter(|&&v| v == 0).count(), 16 * k);
            // deterministic in (grid, ratio, seed)
            prop_assert_eq!(&MaskPair::random(&grid, ratio, seed, Some(layout)).unwrap(), &pair);
            // masked patches are exactly those whose input elements are zeroed
            for p in 0..16 {
                let zeroed = grid.patch_elements(p).iter().all(|&i| pair.input[i] == 0);
                prop_assert_eq!(zeroed, pair.masked_patches.contains(&p));
            }
        }
    }
}
