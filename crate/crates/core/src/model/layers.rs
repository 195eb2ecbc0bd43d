//! Row-batched building blocks with hand-written backward passes.
//!
//! Token matrices stack the sequences of a batch vertically: `[batch·n, dim]`.
//! Everything here except attention is row-wise and ignores the batch split.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub const LN_EPS: f64 = 1e-6;

pub fn linear(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Gradients of `y = x·w + b` given `dy`: returns `(dx, dw, db)`.
pub fn linear_backward(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    dy: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(&dy);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm(
    x: ArrayView2<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let i = *inv;
        row.mapv_inplace(|v| (v - mean) * i);
    }
    let y = &xhat * &gamma + &beta;
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: ArrayView2<'_, f64>,
    cache: &NormCache,
    gamma: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = inv * (gi - mean_g - xi * mean_gx));
    }
    (dx, dgamma, dbeta)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Scaled dot-product attention over each length-`seq_len` segment.
///
/// `qkv` is `[batch·n, 3·dim]` laid out as `[q | k | v]`, each split into
/// `heads` contiguous column groups. Returns the concatenated head outputs
/// `[batch·n, dim]` and the attention probabilities, indexed
/// `segment·heads + head`.
pub fn attention(qkv: ArrayView2<'_, f64>, seq_len: usize, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let dim = qkv.ncols() / 3;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let segments = qkv.nrows() / seq_len;
    let mut ctx = Array2::zeros((qkv.nrows(), dim));
    let mut probs = Vec::with_capacity(segments * heads);
    for seg in 0..segments {
        let rows = seg * seq_len..(seg + 1) * seq_len;
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let q = qkv.slice(s![rows.clone(), cols.clone()]);
            let k = qkv.slice(s![rows.clone(), dim + cols.start..dim + cols.end]);
            let v = qkv.slice(s![rows.clone(), 2 * dim + cols.start..2 * dim + cols.end]);
            let mut a = q.dot(&k.t());
            a.mapv_inplace(|x| x * scale);
            softmax_rows(&mut a);
            ctx.slice_mut(s![rows.clone(), cols]).assign(&a.dot(&v));
            probs.push(a);
        }
    }
    (ctx, probs)
}

pub fn attention_backward(
    dctx: ArrayView2<'_, f64>,
    qkv: ArrayView2<'_, f64>,
    probs: &[Array2<f64>],
    seq_len: usize,
    heads: usize,
) -> Array2<f64> {
    let dim = qkv.ncols() / 3;
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let segments = qkv.nrows() / seq_len;
    let mut dqkv = Array2::zeros(qkv.raw_dim());
    for seg in 0..segments {
        let rows = seg * seq_len..(seg + 1) * seq_len;
        for h in 0..heads {
            let a = &probs[seg * heads + h];
            let (c0, c1) = (h * hd, (h + 1) * hd);
            let q = qkv.slice(s![rows.clone(), c0..c1]);
            let k = qkv.slice(s![rows.clone(), dim + c0..dim + c1]);
            let v = qkv.slice(s![rows.clone(), 2 * dim + c0..2 * dim + c1]);
            let d_out = dctx.slice(s![rows.clone(), c0..c1]);

            let dv = a.t().dot(&d_out);
            let da = d_out.dot(&v.t());
            let mut ds = &da * a;
            for (mut row, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let total = row.sum();
                Zip::from(&mut row).and(&arow).for_each(|x, &p| *x -= p * total);
            }
            ds.mapv_inplace(|x| x * scale);
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), c0..c1]).assign(&dq);
            dqkv.slice_mut(s![rows.clone(), dim + c0..dim + c1]).assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * dim + c0..2 * dim + c1]).assign(&dv);
        }
    }
    dqkv
}
