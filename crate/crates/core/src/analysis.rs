//! Property analysis: attention distance, singular-value spectra,
//! spectral object localization with CorLoc, and the spread of accuracies.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode, patchify, AttentionRecord, ModelConfig, TokenBatch};
use crate::params::ParameterStore;

/// Pixel centre of patch `i` on a row-major grid.
fn centre(i: usize, cols: usize, patch_size: f64) -> (f64, f64) {
    let (r, c) = (i / cols, i % cols);
    ((c as f64 + 0.5) * patch_size, (r as f64 + 0.5) * patch_size)
}

/// Attention-weighted mean distance between query and key patch centres for
/// one attention map over all patches of a `grid`.
pub fn attention_distance(attn: ArrayView2<'_, f64>, grid: (usize, usize), patch_size: f64) -> Result<f64> {
    let n = grid.0 * grid.1;
    if attn.dim() != (n, n) {
        return Err(Error::Shape(format!("attention map {:?} for a {}×{} grid", attn.dim(), grid.0, grid.1)));
    }
    let mut total = 0.0;
    for (i, row) in attn.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Numeric(format!("attention row {i} sums to {sum}")));
        }
        let (xi, yi) = centre(i, grid.1, patch_size);
        for (j, &a) in row.iter().enumerate() {
            let (xj, yj) = centre(j, grid.1, patch_size);
            total += a * ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt();
        }
    }
    Ok(total / n as f64)
}

/// Mean attention distance, `[layer][head]`, in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDistanceReport {
    pub distances: Vec<Vec<f64>>,
}

/// Per-layer, per-head attention distance of one image.
pub fn avg_attention_distance(
    record: &AttentionRecord,
    grid: (usize, usize),
    patch_size: usize,
) -> Result<AttentionDistanceReport> {
    let distances = record
        .layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|a| attention_distance(a.view(), grid, patch_size as f64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionDistanceReport { distances })
}

/// Attention distance averaged over several images.
pub fn mean_attention_distance(
    records: &[AttentionRecord],
    grid: (usize, usize),
    patch_size: usize,
) -> Result<AttentionDistanceReport> {
    let first = records.first().ok_or_else(|| Error::Data("no attention records".into()))?;
    let mut acc = avg_attention_distance(first, grid, patch_size)?;
    for r in &records[1..] {
        let next = avg_attention_distance(r, grid, patch_size)?;
        for (a, b) in acc.distances.iter_mut().flatten().zip(next.distances.iter().flatten()) {
            *a += b;
        }
    }
    for v in acc.distances.iter_mut().flatten() {
        *v /= records.len() as f64;
    }
    Ok(acc)
}

/// Singular values of `features`, largest first.
pub fn singular_values(features: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if features.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite features".into()));
    }
    let (n, d) = features.dim();
    let m = DMatrix::from_fn(n, d, |i, j| features[[i, j]]);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Share of the singular-value mass held by the `k` largest values.
pub fn topk_singular_percentage(features: ArrayView2<'_, f64>, k: usize) -> Result<f64> {
    let (n, d) = features.dim();
    if k == 0 || k > n.min(d) {
        return Err(Error::Config(format!("k = {k} outside 1..={}", n.min(d))));
    }
    let s = singular_values(features)?;
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("all-zero feature matrix".into()));
    }
    Ok(s[..k].iter().sum::<f64>() / total)
}

/// Top-k percentages, `[layer][k − 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdSpectrumReport {
    pub percentages: Vec<Vec<f64>>,
}

/// Patch-token features after every block for each image:
/// `result[image][layer]` is `[n_patches, embed_dim]`.
pub fn block_features(
    params: &ParameterStore,
    cfg: &ModelConfig,
    images: &[ArrayView3<'_, f64>],
) -> Result<Vec<Vec<Array2<f64>>>> {
    images
        .iter()
        .map(|im| {
            let t = patchify(*im, cfg.patch_size)?;
            let batch = TokenBatch {
                seq_len: t.len(),
                rows: t.tokens,
                position_ids: t.position_ids,
            };
            (1..=cfg.depth)
                .map(|k| Ok(encode(params, cfg, &batch, None, Some(k), None)?.features))
                .collect()
        })
        .collect()
}

/// Mean top-k percentage per layer, for k = 1..=`max_k`, over images.
pub fn svd_spectrum(per_image: &[Vec<Array2<f64>>], max_k: usize) -> Result<SvdSpectrumReport> {
    let layers = per_image.first().map_or(0, Vec::len);
    if layers == 0 {
        return Err(Error::Data("no features".into()));
    }
    let mut percentages = vec![vec![0.0; max_k]; layers];
    for image in per_image {
        for (l, f) in image.iter().enumerate() {
            let s = singular_values(f.view())?;
            let total: f64 = s.iter().sum();
            if total == 0.0 {
                return Err(Error::Degenerate(format!("layer {l} features are all zero")));
            }
            let mut run = 0.0;
            for k in 0..max_k {
                run += s.get(k).copied().unwrap_or(0.0);
                percentages[l][k] += run / total / per_image.len() as f64;
            }
        }
    }
    Ok(SvdSpectrumReport { percentages })
}

/// Axis-aligned box in pixels, `max` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Data(format!("empty box ({x_min}, {y_min}, {x_max}, {y_max})")));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = w * h;
        inter / (self.area() + other.area() - inter)
    }
}

fn components(mask: &[bool], rows: usize, cols: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / cols, i % cols);
            let mut push = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                push(i - cols);
            }
            if r + 1 < rows {
                push(i + cols);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < cols {
                push(i + 1);
            }
        }
        out.push(comp);
    }
    out
}

fn border_count(cells: impl Iterator<Item = usize>, rows: usize, cols: usize) -> usize {
    cells
        .filter(|&i| {
            let (r, c) = (i / cols, i % cols);
            r == 0 || c == 0 || r + 1 == rows || c + 1 == cols
        })
        .count()
}

/// The foreground side of a split of the patches: the smaller side, or on a
/// tie the side touching fewer border cells.
pub fn foreground_sign(positive: &[bool], grid: (usize, usize)) -> Vec<bool> {
    let negative: Vec<bool> = positive.iter().map(|&p| !p).collect();
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    let pick_positive = match np.cmp(&nn) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let bp = border_count((0..positive.len()).filter(|&i| positive[i]), grid.0, grid.1);
            let bn = border_count((0..positive.len()).filter(|&i| negative[i]), grid.0, grid.1);
            bp <= bn
        }
    };
    if pick_positive {
        positive.to_vec()
    } else {
        negative
    }
}

/// Locate the salient object from last-block patch features.
///
/// The features are mean-centred, split by the sign of the first left
/// singular vector, the foreground side is chosen by [`foreground_sign`],
/// and the box tightly encloses its largest 4-connected component.
pub fn unsup_localize(features: ArrayView2<'_, f64>, grid: (usize, usize), patch_size: usize) -> Result<BoundingBox> {
    let (n, d) = features.dim();
    if n != grid.0 * grid.1 {
        return Err(Error::Shape(format!("{n} feature rows for a {}×{} grid", grid.0, grid.1)));
    }
    let mean = features.mean_axis(Axis(0)).ok_or_else(|| Error::Data("no patches".into()))?;
    let centred = &features - &mean;
    let scale = features.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let spread = centred.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if spread <= 1e-12 * (1.0 + scale) {
        return Err(Error::Degenerate("patch features are identical; nothing to separate".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| centred[[i, j]]);
    let svd = m.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numeric("SVD did not return singular vectors".into()))?;
    let top = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let positive: Vec<bool> = (0..n).map(|i| u[(i, top)] > 0.0).collect();
    let fg = foreground_sign(&positive, grid);
    let comps = components(&fg, grid.0, grid.1);
    let largest = comps
        .iter()
        .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b[0].cmp(&a[0])))
        .ok_or_else(|| Error::Degenerate("no foreground patches".into()))?;
    let rows = largest.iter().map(|&i| i / grid.1);
    let cols = largest.iter().map(|&i| i % grid.1);
    let (r0, r1) = (rows.clone().min().unwrap(), rows.max().unwrap());
    let (c0, c1) = (cols.clone().min().unwrap(), cols.max().unwrap());
    let p = patch_size as f64;
    BoundingBox::new(c0 as f64 * p, r0 as f64 * p, (c1 + 1) as f64 * p, (r1 + 1) as f64 * p)
}

/// Fraction of images whose predicted box has IoU > 0.5 with some
/// ground-truth box.
pub fn corloc(predicted: &[BoundingBox], ground_truth: &[Vec<BoundingBox>]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != ground_truth.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} images",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let mut hits = 0;
    for (p, gts) in predicted.iter().zip(ground_truth) {
        if gts.is_empty() {
            return Err(Error::Data("image without ground-truth boxes".into()));
        }
        if gts.iter().any(|g| p.iou(g) > 0.5) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predicted.len() as f64)
}

/// Population standard deviation.
pub fn performance_std(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Data(format!("need at least two values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::Rng as _;

    use crate::rng::stream;

    fn double_loop_distance(rows: usize, cols: usize, p: f64) -> f64 {
        let n = rows * cols;
        let mut total = 0.0;
        for qr in 0..rows {
            for qc in 0..cols {
                for kr in 0..rows {
                    for kc in 0..cols {
                        let dx = (qc as f64 - kc as f64) * p;
                        let dy = (qr as f64 - kr as f64) * p;
                        total += (dx * dx + dy * dy).sqrt() / n as f64;
                    }
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn attention_distance_oracles() {
        let eye = Array2::<f64>::eye(4);
        assert_eq!(attention_distance(eye.view(), (2, 2), 1.0).unwrap(), 0.0);
        let uniform = Array2::from_elem((4, 4), 0.25);
        let want = (2.0 + 2f64.sqrt()) / 4.0;
        assert!((attention_distance(uniform.view(), (2, 2), 1.0).unwrap() - want).abs() < 1e-9);
        for (r, c, p) in [(3, 5, 8.0), (4, 4, 16.0), (1, 6, 2.0)] {
            let n = r * c;
            let u = Array2::from_elem((n, n), 1.0 / n as f64);
            let got = attention_distance(u.view(), (r, c), p).unwrap();
            assert!((got - double_loop_distance(r, c, p)).abs() < 1e-9);
        }
        let bad = Array2::from_elem((4, 4), 0.3);
        assert!(attention_distance(bad.view(), (2, 2), 1.0).is_err());
    }

    #[test]
    fn attention_distance_permutation_invariance() {
        let mut r = stream(3, &[]);
        let mut a = Array2::from_shape_fn((6, 6), |_| r.gen_range(0.0..1.0));
        for mut row in a.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let base = attention_distance(a.view(), (2, 3), 4.0).unwrap();
        // Mirror the grid left-right: centres permute with the indices.
        let perm = [2, 1, 0, 5, 4, 3];
        let b = Array2::from_shape_fn((6, 6), |(i, j)| a[[perm[i], perm[j]]]);
        assert!((attention_distance(b.view(), (2, 3), 4.0).unwrap() - base).abs() < 1e-12);
    }

    /// Singular values via the eigenvalues of the Gram matrix, by cyclic Jacobi.
    fn gram_singular_values(a: &Array2<f64>) -> Vec<f64> {
        let mut g = a.t().dot(a);
        let n = g.nrows();
        for _ in 0..100 {
            for p in 0..n {
                for q in p + 1..n {
                    if g[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (g[[q, q]] - g[[p, p]]) / (2.0 * g[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                    for k in 0..n {
                        let (gkp, gkq) = (g[[k, p]], g[[k, q]]);
                        g[[k, p]] = c * gkp - s * gkq;
                        g[[k, q]] = s * gkp + c * gkq;
                    }
                    for k in 0..n {
                        let (gpk, gqk) = (g[[p, k]], g[[q, k]]);
                        g[[p, k]] = c * gpk - s * gqk;
                        g[[q, k]] = s * gpk + c * gqk;
                    }
                }
            }
        }
        let mut s: Vec<f64> = (0..n).map(|i| g[[i, i]].max(0.0).sqrt()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    #[test]
    fn singular_percentage_oracles() {
        let u = Array1::from(vec![1.0, -2.0, 0.5]);
        let v = Array1::from(vec![0.3, 0.1, 2.0, -1.0]);
        let rank1 = Array2::from_shape_fn((3, 4), |(i, j)| u[i] * v[j]);
        for k in 1..=3 {
            assert!((topk_singular_percentage(rank1.view(), k).unwrap() - 1.0).abs() < 1e-12);
        }
        for n in [2, 5, 7] {
            let eye = Array2::<f64>::eye(n);
            assert!((topk_singular_percentage(eye.view(), 1).unwrap() - 1.0 / n as f64).abs() < 1e-12);
        }
        let mut r = stream(8, &[]);
        let a = Array2::from_shape_fn((6, 4), |_| r.gen_range(-1.0..1.0));
        let oracle = gram_singular_values(&a);
        let got = singular_values(a.view()).unwrap();
        for (x, y) in got.iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-8);
        }
        for k in 1..=4 {
            let want = oracle[..k].iter().sum::<f64>() / oracle.iter().sum::<f64>();
            assert!((topk_singular_percentage(a.view(), k).unwrap() - want).abs() < 1e-8);
        }
        assert!(topk_singular_percentage(Array2::zeros((3, 3)).view(), 1).is_err());
        assert!(topk_singular_percentage(a.view(), 5).is_err());
    }

    #[test]
    fn singular_percentage_rotation_invariance() {
        let mut r = stream(9, &[]);
        let a = Array2::from_shape_fn((6, 4), |_| r.gen_range(-1.0..1.0));
        let (c, s) = (0.6f64, 0.8f64);
        let mut rot = Array2::<f64>::eye(4);
        rot[[0, 0]] = c;
        rot[[0, 1]] = -s;
        rot[[1, 0]] = s;
        rot[[1, 1]] = c;
        let b = a.dot(&rot);
        for k in 1..=4 {
            let x = topk_singular_percentage(a.view(), k).unwrap();
            let y = topk_singular_percentage(b.view(), k).unwrap();
            assert!((x - y).abs() < 1e-8);
        }
    }

    fn planted(blocks: &[(usize, usize, usize, usize)], grid: usize) -> Array2<f64> {
        let v = [1.0, 2.0, -1.0];
        let w = [0.5, -0.5, 0.0];
        Array2::from_shape_fn((grid * grid, 3), |(i, d)| {
            let (r, c) = (i / grid, i % grid);
            let inside = blocks.iter().any(|&(r0, c0, h, wd)| r >= r0 && r < r0 + h && c >= c0 && c < c0 + wd);
            if inside {
                v[d]
            } else {
                w[d]
            }
        })
    }

    #[test]
    fn planted_block_is_localized_exactly() {
        let f = planted(&[(2, 3, 2, 3)], 8);
        let bbox = unsup_localize(f.view(), (8, 8), 16).unwrap();
        let want = BoundingBox::new(48.0, 32.0, 96.0, 64.0).unwrap();
        assert_eq!(bbox, want);
        assert_eq!(bbox.iou(&want), 1.0);
        let shifted = &f + 7.5;
        assert_eq!(unsup_localize(shifted.view(), (8, 8), 16).unwrap(), want);
    }

    #[test]
    fn largest_component_wins() {
        let f = planted(&[(1, 1, 2, 2), (5, 5, 1, 2)], 8);
        let bbox = unsup_localize(f.view(), (8, 8), 1).unwrap();
        assert_eq!(bbox, BoundingBox::new(1.0, 1.0, 3.0, 3.0).unwrap());
    }

    #[test]
    fn identical_features_are_degenerate() {
        let f = Array2::from_elem((16, 3), 0.7);
        assert!(matches!(unsup_localize(f.view(), (4, 4), 8), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sign_tie_prefers_interior() {
        // Left half vs right half: equal sizes and equal border counts, so
        // the positive side is kept.
        let positive: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        assert_eq!(foreground_sign(&positive, (4, 4)), positive);
        // A ring of 12 against a 4-cell centre: the centre is smaller.
        let ring: Vec<bool> = (0..16).map(|i| [5, 6, 9, 10].contains(&i)).map(|c| !c).collect();
        let fg = foreground_sign(&ring, (4, 4));
        assert_eq!(fg.iter().filter(|&&x| x).count(), 4);
    }

    #[test]
    fn corloc_examples() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
        let c = BoundingBox::new(0.0, 0.0, 10.0, 8.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((a.iou(&c) - 0.8).abs() < 1e-12);
        assert_eq!(corloc(&[a, a], &[vec![a], vec![a]]).unwrap(), 1.0);
        assert_eq!(corloc(&[a], &[vec![b]]).unwrap(), 0.0);
        assert_eq!(corloc(&[a, a], &[vec![b, c], vec![b]]).unwrap(), 0.5);
        assert!(corloc(&[], &[]).is_err());
        assert!(corloc(&[a], &[vec![]]).is_err());
    }

    #[test]
    fn performance_std_examples() {
        let s0 = performance_std(&[81.8, 83.2, 81.1, 83.6, 77.3]).unwrap();
        assert!((s0 - 2.24).abs() <= 0.01);
        let s1 = performance_std(&[83.6, 84.2, 83.5, 84.3, 83.4]).unwrap();
        assert!((s1 - 0.37).abs() <= 0.01);
        assert_eq!(performance_std(&[4.0, 4.0, 4.0]).unwrap(), 0.0);
        assert_eq!(performance_std(&[0.0, 2.0]).unwrap(), 1.0);
        assert!(performance_std(&[1.0]).is_err());
    }
}
