//! The masked distillation objective: compare student predictions with the
//! teacher's patch targets at the selected positions.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::model::TargetKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SmoothL1,
    NegCosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    MaskedOnly,
    All,
}

/// Loss metric, positions and teacher target of a distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub loss: LossKind,
    pub smooth_l1_beta: f64,
    pub loss_positions: LossPositions,
    pub target: TargetKind,
    /// Pass block targets through the teacher's final LayerNorm.
    pub target_ln: bool,
    pub mask_ratio: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::SmoothL1,
            smooth_l1_beta: 1.0,
            loss_positions: LossPositions::MaskedOnly,
            target: TargetKind::Last,
            target_ln: false,
            mask_ratio: 0.75,
        }
    }
}

impl DistillConfig {
    /// The data-richer-teacher variant: negative cosine, LN'd targets,
    /// 40% masking.
    pub fn cosine_recipe() -> Self {
        Self {
            loss: LossKind::NegCosine,
            target_ln: true,
            mask_ratio: 0.4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config(format!("smooth_l1_beta {} must be positive", self.smooth_l1_beta)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        Ok(())
    }
}

fn same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn smooth_l1_term(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

fn smooth_l1_slope(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Mean Smooth-L1 over all elements.
pub fn smooth_l1(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, beta: f64) -> Result<f64> {
    same_shape(pred, target)?;
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smooth_l1 beta {beta} must be positive")));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty input".into()));
    }
    let total: f64 = Zip::from(&pred)
        .and(&target)
        .fold(0.0, |acc, &p, &t| acc + smooth_l1_term(p - t, beta));
    Ok(total / pred.len() as f64)
}

/// Mean over rows of `−cos(p, t)`.
pub fn neg_cosine(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape(pred, target)?;
    if pred.nrows() == 0 {
        return Err(Error::Shape("empty input".into()));
    }
    let mut total = 0.0;
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        let (np, nt) = (p.dot(&p).sqrt(), t.dot(&t).sqrt());
        if np == 0.0 || nt == 0.0 {
            return Err(Error::Numeric("zero-norm row in cosine loss".into()));
        }
        total -= p.dot(&t) / (np * nt);
    }
    Ok(total / pred.nrows() as f64)
}

/// Loss value and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Distillation loss over a batch of full-length predictions and targets.
///
/// Rows are selected by `cfg.loss_positions` (masked rows of every sequence,
/// or all rows); the loss is the element mean (Smooth-L1) or row mean
/// (negative cosine) over the selection. The target is treated as a
/// constant.
pub fn mkd_loss_batch(
    prediction: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    masks: &[PatchMask],
    cfg: &DistillConfig,
) -> Result<LossOutput> {
    same_shape(prediction, target)?;
    let n_rows = prediction.nrows();
    let selected: Vec<usize> = match cfg.loss_positions {
        LossPositions::All => (0..n_rows).collect(),
        LossPositions::MaskedOnly => {
            let total: usize = masks.iter().map(PatchMask::n_patches).sum();
            if total != n_rows {
                return Err(Error::Shape(format!("masks cover {total} rows, prediction has {n_rows}")));
            }
            let mut rows = Vec::new();
            let mut offset = 0;
            for m in masks {
                rows.extend(m.masked_indices().into_iter().map(|i| offset + i));
                offset += m.n_patches();
            }
            rows
        }
    };
    if selected.is_empty() {
        return Err(Error::Shape("no rows selected for the loss (nothing masked?)".into()));
    }
    let dim = prediction.ncols();
    let mut grad = Array2::zeros(prediction.raw_dim());
    let mut value = 0.0;
    match cfg.loss {
        LossKind::SmoothL1 => {
            let beta = cfg.smooth_l1_beta;
            if !(beta > 0.0) {
                return Err(Error::Config(format!("smooth_l1 beta {beta} must be positive")));
            }
            let scale = 1.0 / (selected.len() * dim) as f64;
            for &r in &selected {
                for c in 0..dim {
                    let d = prediction[[r, c]] - target[[r, c]];
                    value += smooth_l1_term(d, beta);
                    grad[[r, c]] = smooth_l1_slope(d, beta) * scale;
                }
            }
            value *= scale;
        }
        LossKind::NegCosine => {
            let scale = 1.0 / selected.len() as f64;
            for &r in &selected {
                let (p, t) = (prediction.row(r), target.row(r));
                let (np, nt) = (p.dot(&p).sqrt(), t.dot(&t).sqrt());
                if np == 0.0 || nt == 0.0 {
                    return Err(Error::Numeric("zero-norm row in cosine loss".into()));
                }
                let cos = p.dot(&t) / (np * nt);
                value -= cos;
                let mut g = grad.row_mut(r);
                Zip::from(&mut g).and(&p).and(&t).for_each(|g, &pi, &ti| {
                    *g = -scale * (ti / (np * nt) - cos * pi / (np * np));
                });
            }
            value *= scale;
        }
    }
    Ok(LossOutput { value, grad })
}

/// Distillation loss for one image.
pub fn mkd_loss(
    student_pred: ArrayView2<'_, f64>,
    teacher_target: ArrayView2<'_, f64>,
    mask: &PatchMask,
    cfg: &DistillConfig,
) -> Result<f64> {
    Ok(mkd_loss_batch(student_pred, teacher_target, std::slice::from_ref(mask), cfg)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn smooth_l1_examples() {
        let t = array![[0.0]];
        assert_eq!(smooth_l1(array![[0.5]].view(), t.view(), 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(array![[2.0]].view(), t.view(), 1.0).unwrap(), 1.5);
        let x = array![[1.0, -2.0], [0.3, 4.0]];
        assert_eq!(smooth_l1(x.view(), x.view(), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn smooth_l1_is_c1_at_beta() {
        let beta = 0.7;
        let f = |d: f64| smooth_l1_term(d, beta);
        let h = 1e-7;
        // Values meet and the one-sided slopes agree at |d| = beta.
        assert!((f(beta - 1e-12) - f(beta + 1e-12)).abs() < 1e-10);
        let left = (f(beta) - f(beta - h)) / h;
        let right = (f(beta + h) - f(beta)) / h;
        assert!((left - right).abs() < 1e-5, "{left} vs {right}");
        assert!((left - 1.0).abs() < 1e-5);
    }

    #[test]
    fn neg_cosine_examples() {
        let p = array![[1.0, 2.0, -1.0]];
        assert!((neg_cosine(p.view(), p.view()).unwrap() + 1.0).abs() < 1e-15);
        assert!((neg_cosine(p.view(), (-&p).view()).unwrap() - 1.0).abs() < 1e-15);
        let q = array![[2.0, -1.0, 0.0]];
        assert_eq!(neg_cosine(p.view(), q.view()).unwrap(), 0.0);
        assert!(neg_cosine(array![[0.0, 0.0, 0.0]].view(), p.view()).is_err());
    }

    #[test]
    fn neg_cosine_ignores_positive_row_scale() {
        let p = array![[0.3, -1.0, 2.0], [1.0, 1.0, 0.5]];
        let t = array![[1.0, 0.0, 1.0], [-0.2, 0.4, 2.0]];
        let base = neg_cosine(p.view(), t.view()).unwrap();
        for a in [0.01, 3.0, 1e4] {
            assert!((neg_cosine((&p * a).view(), t.view()).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_only_ignores_visible_rows() {
        let target = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut pred = target.clone();
        pred[[0, 0]] = 100.0;
        pred[[2, 1]] = -7.0;
        let mask = PatchMask::from_masked(3, &[1]).unwrap();
        let cfg = DistillConfig::default();
        assert_eq!(mkd_loss(pred.view(), target.view(), &mask, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn two_patch_toy_gives_one_half() {
        // One of two patches masked, unit error everywhere, beta 1: 0.5·1²/1.
        let pred = array![[1.0, 1.0], [1.0, 1.0]];
        let target = array![[0.0, 0.0], [0.0, 0.0]];
        let mask = PatchMask::from_masked(2, &[0]).unwrap();
        let v = mkd_loss(pred.view(), target.view(), &mask, &DistillConfig::default()).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn all_positions_with_identical_arrays_is_zero() {
        let x = array![[1.0, -1.0], [0.5, 2.0]];
        let cfg = DistillConfig {
            loss_positions: LossPositions::All,
            ..Default::default()
        };
        assert_eq!(mkd_loss(x.view(), x.view(), &PatchMask::none(2), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn empty_selection_is_an_error() {
        let x = array![[1.0], [2.0]];
        assert!(mkd_loss(x.view(), x.view(), &PatchMask::none(2), &DistillConfig::default()).is_err());
    }

    #[test]
    fn batch_gradients_match_difference_quotients() {
        let pred = array![[0.3, -1.5, 0.2], [2.0, 0.1, -0.4], [0.7, 0.7, 1.9], [-1.0, 0.25, 0.0]];
        let target = array![[0.0, 0.5, 0.1], [1.0, -0.3, 0.2], [-0.6, 0.4, 0.3], [0.5, 0.5, 0.5]];
        let masks = vec![
            PatchMask::from_masked(2, &[1]).unwrap(),
            PatchMask::from_masked(2, &[0, 1]).unwrap(),
        ];
        for loss in [LossKind::SmoothL1, LossKind::NegCosine] {
            let cfg = DistillConfig { loss, smooth_l1_beta: 0.8, ..Default::default() };
            let out = mkd_loss_batch(pred.view(), target.view(), &masks, &cfg).unwrap();
            for r in 0..4 {
                for c in 0..3 {
                    let h = 1e-6;
                    let mut p = pred.clone();
                    p[[r, c]] += h;
                    let up = mkd_loss_batch(p.view(), target.view(), &masks, &cfg).unwrap().value;
                    p[[r, c]] -= 2.0 * h;
                    let down = mkd_loss_batch(p.view(), target.view(), &masks, &cfg).unwrap().value;
                    let fd = (up - down) / (2.0 * h);
                    assert!((fd - out.grad[[r, c]]).abs() < 1e-8, "{loss:?} [{r},{c}]");
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn losses_respect_their_lower_bounds(vals in proptest::collection::vec(-5.0f64..5.0, 12)) {
                let p = Array2::from_shape_vec((2, 6), vals[..].to_vec()).unwrap();
                let t = p.mapv(|x| (x * 1.7).sin() + 0.1);
                prop_assert!(smooth_l1(p.view(), t.view(), 1.0).unwrap() >= 0.0);
                if let Ok(v) = neg_cosine(p.view(), t.view()) {
                    prop_assert!(v >= -1.0 - 1e-12);
                }
            }
        }
    }
}
