//! Random patch masks and the gather/scatter between full and visible token
//! sets.

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{TokenBatch, TokenSequence};
use crate::rng::Rng;

/// Boolean mask over patch indices; `true` marks a hidden patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    flags: Vec<bool>,
}

/// Number of patches left visible: `floor(n·(1 − ratio))`.
///
/// A tolerance of 1e-9 absorbs representation error in `1 − ratio`
/// (`10·(1 − 0.7)` is `2.9999…` in binary).
pub fn keep_count(n_patches: usize, ratio: f64) -> usize {
    ((n_patches as f64 * (1.0 - ratio)) + 1e-9).floor().max(0.0) as usize
}

impl PatchMask {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    /// Mask with every patch visible.
    pub fn none(n_patches: usize) -> Self {
        Self {
            flags: vec![false; n_patches],
        }
    }

    /// Mask hiding exactly the listed patches.
    pub fn from_masked(n_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n_patches];
        for &i in masked {
            if i >= n_patches || std::mem::replace(&mut flags[i], true) {
                return Err(Error::Shape(format!("masked index {i} out of range or repeated")));
            }
        }
        Ok(Self { flags })
    }

    pub fn n_patches(&self) -> usize {
        self.flags.len()
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn visible_count(&self) -> usize {
        self.n_patches() - self.masked_count()
    }

    /// Fraction of patches hidden.
    pub fn ratio(&self) -> f64 {
        self.masked_count() as f64 / self.n_patches().max(1) as f64
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.n_patches()).filter(|&i| !self.flags[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.n_patches()).filter(|&i| self.flags[i]).collect()
    }
}

/// Draw a mask uniformly among all masks with `keep_count(n, ratio)` visible
/// patches: shuffle the indices and keep the first ones visible.
pub fn sample_mask(n_patches: usize, ratio: f64, rng: &mut Rng) -> Result<PatchMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let keep = keep_count(n_patches, ratio);
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(rng);
    let mut flags = vec![true; n_patches];
    for &i in &order[..keep] {
        flags[i] = false;
    }
    Ok(PatchMask { flags })
}

/// The visible rows of a full-length sequence, in ascending patch order, with
/// their patch indices kept as position ids.
pub fn gather_visible(tokens: &TokenSequence, mask: &PatchMask) -> Result<TokenSequence> {
    if tokens.len() != mask.n_patches() {
        return Err(Error::Shape(format!(
            "{} tokens for a mask over {} patches",
            tokens.len(),
            mask.n_patches()
        )));
    }
    let mut rows: Vec<usize> = (0..tokens.len()).filter(|&r| !mask.is_masked(tokens.position_ids[r])).collect();
    rows.sort_by_key(|&r| tokens.position_ids[r]);
    Ok(TokenSequence {
        tokens: tokens.tokens.select(Axis(0), &rows),
        position_ids: rows.iter().map(|&r| tokens.position_ids[r]).collect(),
    })
}

/// Rebuild a full-length array: visible rows go back to their patch index,
/// masked rows become `mask_token`.
pub fn scatter_with_mask_tokens(
    visible: &TokenSequence,
    mask: &PatchMask,
    mask_token: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    if visible.len() != mask.visible_count() {
        return Err(Error::Shape(format!(
            "{} visible tokens for a mask with {} visible patches",
            visible.len(),
            mask.visible_count()
        )));
    }
    if mask_token.len() != visible.dim() {
        return Err(Error::Dimension {
            expected: visible.dim(),
            actual: mask_token.len(),
            context: "mask token width".into(),
        });
    }
    let mut out = Array2::zeros((mask.n_patches(), visible.dim()));
    for i in mask.masked_indices() {
        out.row_mut(i).assign(&mask_token);
    }
    for (row, &id) in visible.tokens.rows().into_iter().zip(&visible.position_ids) {
        if id >= mask.n_patches() || mask.is_masked(id) {
            return Err(Error::Shape(format!("visible token claims masked or invalid patch {id}")));
        }
        out.row_mut(id).assign(&row);
    }
    Ok(out)
}

/// Visible rows of every sequence in a full-length batch. All masks must
/// keep the same number of patches.
pub fn gather_visible_batch(full: &TokenBatch, masks: &[PatchMask]) -> Result<TokenBatch> {
    let n = full.seq_len;
    if masks.len() != full.batch_size() {
        return Err(Error::Shape(format!("{} masks for {} sequences", masks.len(), full.batch_size())));
    }
    let keep = masks.first().map_or(0, PatchMask::visible_count);
    let mut rows = Vec::with_capacity(keep * masks.len());
    let mut ids = Vec::with_capacity(rows.capacity());
    for (s, m) in masks.iter().enumerate() {
        if m.n_patches() != n || m.visible_count() != keep {
            return Err(Error::Shape("masks in a batch must agree in size and visible count".into()));
        }
        for i in m.visible_indices() {
            rows.push(s * n + i);
            ids.push(full.position_ids[s * n + i]);
        }
    }
    Ok(TokenBatch {
        rows: full.rows.select(Axis(0), &rows),
        position_ids: ids,
        seq_len: keep,
    })
}
