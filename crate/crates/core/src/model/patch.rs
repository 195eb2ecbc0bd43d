use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Token features for one image together with the patch index each row came
/// from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub position_ids: Vec<usize>,
}

impl TokenSequence {
    /// Tokens numbered 0..n in row order.
    pub fn full(tokens: Array2<f64>) -> Self {
        let n = tokens.nrows();
        Self {
            tokens,
            position_ids: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Checks position ids are unique, in range, and match the row count.
    pub fn validate(&self, n_patches: usize) -> Result<()> {
        if self.position_ids.len() != self.tokens.nrows() {
            return Err(Error::Shape(format!(
                "{} position ids for {} tokens",
                self.position_ids.len(),
                self.tokens.nrows()
            )));
        }
        let mut seen = vec![false; n_patches];
        for &id in &self.position_ids {
            if id >= n_patches || std::mem::replace(&mut seen[id], true) {
                return Err(Error::Shape(format!("position id {id} out of range or repeated")));
            }
        }
        Ok(())
    }
}

/// Cut an `H×W×C` image into non-overlapping `p×p` patches in row-major patch
/// order. Each patch flattens as (row, column, channel).
pub fn patchify(image: ArrayView3<'_, f64>, patch_size: usize) -> Result<TokenSequence> {
    let (h, w, c) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "image {h}×{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gr, gc) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut out = Array2::zeros((gr * gc, dim));
    for pr in 0..gr {
        for pc in 0..gc {
            let patch = image.slice(s![
                pr * patch_size..(pr + 1) * patch_size,
                pc * patch_size..(pc + 1) * patch_size,
                ..
            ]);
            let mut row = out.row_mut(pr * gc + pc);
            for (dst, &v) in row.iter_mut().zip(patch.iter()) {
                *dst = v;
            }
        }
    }
    Ok(TokenSequence::full(out))
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    tokens: ArrayView2<'_, f64>,
    grid: (usize, usize),
    patch_size: usize,
    channels: usize,
) -> Result<Array3<f64>> {
    let (gr, gc) = grid;
    let dim = patch_size * patch_size * channels;
    if tokens.dim() != (gr * gc, dim) {
        return Err(Error::Shape(format!(
            "tokens {:?} do not fit a {gr}×{gc} grid of {dim}-dim patches",
            tokens.dim()
        )));
    }
    let mut image = Array3::zeros((gr * patch_size, gc * patch_size, channels));
    for pr in 0..gr {
        for pc in 0..gc {
            let mut patch = image.slice_mut(s![
                pr * patch_size..(pr + 1) * patch_size,
                pc * patch_size..(pc + 1) * patch_size,
                ..
            ]);
            for (dst, &v) in patch.iter_mut().zip(tokens.row(pr * gc + pc).iter()) {
                *dst = v;
            }
        }
    }
    Ok(image)
}

pub const PATCH_NORM_EPS: f64 = 1e-6;

/// Standardize every row to zero mean and unit variance.
pub fn normalize_patches(tokens: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = tokens.to_owned();
    let d = tokens.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + PATCH_NORM_EPS).sqrt();
        row.mapv_inplace(|x| (x - mean) * inv);
    }
    out
}

/// Fixed 2-D sine-cosine position table of shape `[rows·cols, dim]`.
///
/// The first half of each row encodes the column coordinate, the second half
/// the row coordinate; each half is `[sin(pos·ω), cos(pos·ω)]` with
/// `ω_i = 10000^(-i/(dim/4))`.
pub fn sincos_position_table(grid: (usize, usize), dim: usize) -> Array2<f64> {
    assert!(dim % 4 == 0, "position table width must be a multiple of 4");
    let (rows, cols) = grid;
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Array2::zeros((rows * cols, dim));
    for r in 0..rows {
        for c in 0..cols {
            let mut row = table.row_mut(r * cols + c);
            for (half, pos) in [(0usize, c as f64), (1, r as f64)] {
                let base = half * 2 * quarter;
                for (i, w) in omega.iter().enumerate() {
                    row[base + i] = (pos * w).sin();
                    row[base + quarter + i] = (pos * w).cos();
                }
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(h: usize, w: usize, c: usize) -> Array3<f64> {
        Array::from_shape_fn((h, w, c), |(i, j, k)| (i * 1000 + j * 10 + k) as f64)
    }

    #[test]
    fn base_image_gives_196_tokens_of_768() {
        let t = patchify(Array3::zeros((224, 224, 3)).view(), 16).unwrap();
        assert_eq!(t.tokens.dim(), (196, 768));
    }

    #[test]
    fn small_image_gives_16_tokens() {
        let t = patchify(Array3::zeros((32, 32, 3)).view(), 8).unwrap();
        assert_eq!(t.len(), 16);
        assert_eq!(t.position_ids, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn round_trip_is_exact() {
        let img = ramp(16, 24, 3);
        let t = patchify(img.view(), 8).unwrap();
        let back = unpatchify(t.tokens.view(), (2, 3), 8, 3).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn patch_order_is_row_major() {
        let img = ramp(4, 4, 1);
        let t = patchify(img.view(), 2).unwrap();
        // Patch 1 is the top-right 2×2 block.
        assert_eq!(t.tokens.row(1).to_vec(), vec![20.0, 30.0, 1020.0, 1030.0]);
    }

    #[test]
    fn non_divisible_is_rejected() {
        assert!(patchify(Array3::zeros((30, 32, 3)).view(), 8).is_err());
    }

    #[test]
    fn normalized_rows_are_standard() {
        let img = ramp(8, 8, 3);
        let t = patchify(img.view(), 4).unwrap();
        let n = normalize_patches(t.tokens.view());
        for row in n.rows() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|x| (x - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn position_table_rows_are_distinct() {
        let t = sincos_position_table((4, 4), 16);
        for i in 0..16 {
            for j in (i + 1)..16 {
                let d: f64 = (&t.row(i) - &t.row(j)).mapv(f64::abs).sum();
                assert!(d > 1e-6);
            }
        }
        // Origin encodes sin(0)=0, cos(0)=1.
        assert_eq!(t[[0, 0]], 0.0);
        assert_eq!(t[[0, 4]], 1.0);
    }
}
