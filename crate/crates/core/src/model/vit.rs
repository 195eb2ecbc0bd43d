//! Encoder, decoder and projection head of the Vision Transformer, with
//! caches for the backward pass.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use super::config::ModelConfig;
use super::layers::{self, NormCache};
use super::patch::sincos_position_table;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::Rng;

/// Stacked token rows for a batch of equal-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    /// `[batch·seq_len, dim]`.
    pub rows: Array2<f64>,
    /// Patch index of every row.
    pub position_ids: Vec<usize>,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        if self.seq_len == 0 {
            0
        } else {
            self.rows.nrows() / self.seq_len
        }
    }

    fn check(&self, dim: usize, n_patches: usize) -> Result<()> {
        if self.rows.ncols() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: self.rows.ncols(),
                context: "token width".into(),
            });
        }
        if self.seq_len == 0 || self.rows.nrows() % self.seq_len != 0 || self.position_ids.len() != self.rows.nrows() {
            return Err(Error::Shape(format!(
                "{} rows / {} ids do not split into sequences of {}",
                self.rows.nrows(),
                self.position_ids.len(),
                self.seq_len
            )));
        }
        if self.seq_len > n_patches || self.position_ids.iter().any(|&id| id >= n_patches) {
            return Err(Error::Shape(format!("position ids exceed {n_patches} patches")));
        }
        Ok(())
    }
}

/// Attention probabilities of one image: `layers[l][h]` is `[n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Array2<f64>>>,
}

impl AttentionRecord {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }
}

/// Per-sequence residual-branch multipliers of one block: `0` for a dropped
/// branch, `1/(1-p)` for a kept one.
#[derive(Clone, Debug)]
pub struct BranchScales {
    pub attn: Vec<f64>,
    pub mlp: Vec<f64>,
}

impl BranchScales {
    fn ones(n: usize) -> Self {
        Self {
            attn: vec![1.0; n],
            mlp: vec![1.0; n],
        }
    }

    fn sample(n: usize, rate: f64, rng: &mut Rng) -> Self {
        if rate <= 0.0 {
            return Self::ones(n);
        }
        let keep = 1.0 - rate;
        let mut draw = || {
            (0..n)
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect::<Vec<_>>()
        };
        let attn = draw();
        let mlp = draw();
        Self { attn, mlp }
    }
}

fn scale_segments(x: &mut Array2<f64>, seq_len: usize, scales: &[f64]) {
    for (seg, &s) in scales.iter().enumerate() {
        if s != 1.0 {
            x.slice_mut(ndarray::s![seg * seq_len..(seg + 1) * seq_len, ..])
                .mapv_inplace(|v| v * s);
        }
    }
}

struct Names {
    norm1_w: String,
    norm1_b: String,
    qkv_w: String,
    qkv_b: String,
    proj_w: String,
    proj_b: String,
    norm2_w: String,
    norm2_b: String,
    fc1_w: String,
    fc1_b: String,
    fc2_w: String,
    fc2_b: String,
}

impl Names {
    fn block(prefix: &str, i: usize) -> Self {
        let p = format!("{prefix}.blocks.{i}");
        Self {
            norm1_w: format!("{p}.norm1.weight"),
            norm1_b: format!("{p}.norm1.bias"),
            qkv_w: format!("{p}.attn.qkv.weight"),
            qkv_b: format!("{p}.attn.qkv.bias"),
            proj_w: format!("{p}.attn.proj.weight"),
            proj_b: format!("{p}.attn.proj.bias"),
            norm2_w: format!("{p}.norm2.weight"),
            norm2_b: format!("{p}.norm2.bias"),
            fc1_w: format!("{p}.mlp.fc1.weight"),
            fc1_b: format!("{p}.mlp.fc1.bias"),
            fc2_w: format!("{p}.mlp.fc2.weight"),
            fc2_b: format!("{p}.mlp.fc2.bias"),
        }
    }
}

/// Names of every parameter in one transformer block, with shapes.
pub(crate) fn block_shapes(prefix: &str, i: usize, dim: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
    let n = Names::block(prefix, i);
    vec![
        (n.norm1_w, vec![dim]),
        (n.norm1_b, vec![dim]),
        (n.qkv_w, vec![dim, 3 * dim]),
        (n.qkv_b, vec![3 * dim]),
        (n.proj_w, vec![dim, dim]),
        (n.proj_b, vec![dim]),
        (n.norm2_w, vec![dim]),
        (n.norm2_b, vec![dim]),
        (n.fc1_w, vec![dim, hidden]),
        (n.fc1_b, vec![hidden]),
        (n.fc2_w, vec![hidden, dim]),
        (n.fc2_b, vec![dim]),
    ]
}

struct BlockCache {
    names: Names,
    h1: Array2<f64>,
    n1: NormCache,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    h2: Array2<f64>,
    n2: NormCache,
    u: Array2<f64>,
    g: Array2<f64>,
    scales: BranchScales,
}

fn block_forward(
    params: &ParameterStore,
    names: Names,
    x: Array2<f64>,
    seq_len: usize,
    heads: usize,
    scales: BranchScales,
) -> Result<(Array2<f64>, BlockCache)> {
    let (h1, n1) = layers::layer_norm(x.view(), params.vector(&names.norm1_w)?, params.vector(&names.norm1_b)?);
    let qkv = layers::linear(h1.view(), params.matrix(&names.qkv_w)?, params.vector(&names.qkv_b)?);
    let (ctx, probs) = layers::attention(qkv.view(), seq_len, heads);
    let mut a = layers::linear(ctx.view(), params.matrix(&names.proj_w)?, params.vector(&names.proj_b)?);
    scale_segments(&mut a, seq_len, &scales.attn);
    let x1 = &x + &a;
    let (h2, n2) = layers::layer_norm(x1.view(), params.vector(&names.norm2_w)?, params.vector(&names.norm2_b)?);
    let u = layers::linear(h2.view(), params.matrix(&names.fc1_w)?, params.vector(&names.fc1_b)?);
    let g = u.mapv(layers::gelu);
    let mut m = layers::linear(g.view(), params.matrix(&names.fc2_w)?, params.vector(&names.fc2_b)?);
    scale_segments(&mut m, seq_len, &scales.mlp);
    let y = x1 + m;
    Ok((
        y,
        BlockCache {
            names,
            h1,
            n1,
            qkv,
            probs,
            ctx,
            h2,
            n2,
            u,
            g,
            scales,
        },
    ))
}

fn block_backward(
    params: &ParameterStore,
    c: &BlockCache,
    dy: Array2<f64>,
    seq_len: usize,
    heads: usize,
    grads: &mut ParameterStore,
) -> Result<Array2<f64>> {
    let n = &c.names;
    let mut dm = dy.clone();
    scale_segments(&mut dm, seq_len, &c.scales.mlp);
    let (dg, dw2, db2) = layers::linear_backward(c.g.view(), params.matrix(&n.fc2_w)?, dm.view());
    grads.accumulate(&n.fc2_w, dw2);
    grads.accumulate(&n.fc2_b, db2);
    let mut du = dg;
    ndarray::Zip::from(&mut du)
        .and(&c.u)
        .for_each(|d, &u| *d *= layers::gelu_grad(u));
    let (dh2, dw1, db1) = layers::linear_backward(c.h2.view(), params.matrix(&n.fc1_w)?, du.view());
    grads.accumulate(&n.fc1_w, dw1);
    grads.accumulate(&n.fc1_b, db1);
    let (dx1_ln, dgam2, dbet2) = layers::layer_norm_backward(dh2.view(), &c.n2, params.vector(&n.norm2_w)?);
    grads.accumulate(&n.norm2_w, dgam2);
    grads.accumulate(&n.norm2_b, dbet2);
    let dx1 = dy + dx1_ln;

    let mut da = dx1.clone();
    scale_segments(&mut da, seq_len, &c.scales.attn);
    let (dctx, dwp, dbp) = layers::linear_backward(c.ctx.view(), params.matrix(&n.proj_w)?, da.view());
    grads.accumulate(&n.proj_w, dwp);
    grads.accumulate(&n.proj_b, dbp);
    let dqkv = layers::attention_backward(dctx.view(), c.qkv.view(), &c.probs, seq_len, heads);
    let (dh1, dwq, dbq) = layers::linear_backward(c.h1.view(), params.matrix(&n.qkv_w)?, dqkv.view());
    grads.accumulate(&n.qkv_w, dwq);
    grads.accumulate(&n.qkv_b, dbq);
    let (dx_ln, dgam1, dbet1) = layers::layer_norm_backward(dh1.view(), &c.n1, params.vector(&n.norm1_w)?);
    grads.accumulate(&n.norm1_w, dgam1);
    grads.accumulate(&n.norm1_b, dbet1);
    Ok(dx1 + dx_ln)
}

/// Which rows of the encoder input are replaced by the learned mask token
/// (only for students without a decoder).
pub type RowMask<'a> = Option<&'a [bool]>;

/// Saved activations of an encoder pass.
pub struct EncoderCache {
    patches: Array2<f64>,
    replaced: Option<Vec<bool>>,
    seq_len: usize,
    blocks: Vec<BlockCache>,
}

/// Output of an encoder pass.
pub struct EncoderPass {
    /// Output of the last block that was run (before the final norm).
    pub features: Array2<f64>,
    pub cache: EncoderCache,
}

impl EncoderPass {
    /// Attention probabilities regrouped per image.
    pub fn attention_records(&self, heads: usize) -> Vec<AttentionRecord> {
        let n_seq = self.features.nrows() / self.cache.seq_len;
        (0..n_seq)
            .map(|seg| AttentionRecord {
                layers: self
                    .cache
                    .blocks
                    .iter()
                    .map(|b| b.probs[seg * heads..(seg + 1) * heads].to_vec())
                    .collect(),
            })
            .collect()
    }
}

/// Run the encoder on a batch of raw pixel patches.
///
/// `blocks` limits how many transformer blocks run (`None` runs all).
/// Stochastic depth is active only when `rng` is given.
pub fn encode(
    params: &ParameterStore,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    replaced: RowMask<'_>,
    blocks: Option<usize>,
    mut rng: Option<&mut Rng>,
) -> Result<EncoderPass> {
    batch.check(cfg.patch_dim(), cfg.n_patches())?;
    let depth = blocks.unwrap_or(cfg.depth);
    if depth > cfg.depth {
        return Err(Error::Config(format!("block {depth} requested from a {}-block encoder", cfg.depth)));
    }
    let mut x = layers::linear(
        batch.rows.view(),
        params.matrix("encoder.patch_embed.weight")?,
        params.vector("encoder.patch_embed.bias")?,
    );
    if let Some(flags) = replaced {
        if flags.len() != x.nrows() {
            return Err(Error::Shape("mask-token row flags do not match batch".into()));
        }
        let token = params.vector("encoder.mask_token")?;
        for (mut row, _) in x.rows_mut().into_iter().zip(flags).filter(|(_, &f)| f) {
            row.assign(&token);
        }
    }
    let pos = sincos_position_table(cfg.grid(), cfg.embed_dim);
    for (mut row, &id) in x.rows_mut().into_iter().zip(&batch.position_ids) {
        row += &pos.row(id);
    }

    let n_seq = batch.batch_size();
    let mut caches = Vec::with_capacity(depth);
    for i in 0..depth {
        let scales = match rng.as_deref_mut() {
            Some(r) => BranchScales::sample(n_seq, cfg.drop_path_at(i), r),
            None => BranchScales::ones(n_seq),
        };
        let (y, c) = block_forward(params, Names::block("encoder", i), x, batch.seq_len, cfg.num_heads, scales)?;
        x = y;
        caches.push(c);
    }
    Ok(EncoderPass {
        features: x,
        cache: EncoderCache {
            patches: batch.rows.clone(),
            replaced: replaced.map(<[bool]>::to_vec),
            seq_len: batch.seq_len,
            blocks: caches,
        },
    })
}

/// Back-propagate `dfeatures` through the encoder, accumulating into `grads`.
pub fn encode_backward(
    params: &ParameterStore,
    cfg: &ModelConfig,
    cache: &EncoderCache,
    dfeatures: Array2<f64>,
    grads: &mut ParameterStore,
) -> Result<()> {
    let mut dx = dfeatures;
    for c in cache.blocks.iter().rev() {
        dx = block_backward(params, c, dx, cache.seq_len, cfg.num_heads, grads)?;
    }
    if let Some(flags) = &cache.replaced {
        let mut dtoken = ndarray::Array1::zeros(cfg.embed_dim);
        for (mut row, _) in dx.rows_mut().into_iter().zip(flags).filter(|(_, &f)| f) {
            dtoken += &row;
            row.fill(0.0);
        }
        grads.accumulate("encoder.mask_token", dtoken);
    }
    let (_, dw, db) = layers::linear_backward(
        cache.patches.view(),
        params.matrix("encoder.patch_embed.weight")?,
        dx.view(),
    );
    grads.accumulate("encoder.patch_embed.weight", dw);
    grads.accumulate("encoder.patch_embed.bias", db);
    Ok(())
}

/// Final encoder LayerNorm.
pub fn encoder_norm(params: &ParameterStore, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, NormCache)> {
    Ok(layers::layer_norm(
        x,
        params.vector("encoder.norm.weight")?,
        params.vector("encoder.norm.bias")?,
    ))
}

/// Saved activations of a decoder pass.
pub struct DecoderCache {
    visible: Array2<f64>,
    visible_rows: Vec<usize>,
    masked_rows: Vec<usize>,
    blocks: Vec<BlockCache>,
    norm: NormCache,
}

/// Expand encoder features of the visible patches to the full patch set,
/// filling masked positions with the decoder mask token, and decode.
///
/// `visible` rows carry their original patch indices; their order within a
/// sequence does not matter. Returns normalized decoder features
/// `[batch·n_patches, decoder_dim]` in patch order.
pub fn decode(params: &ParameterStore, cfg: &ModelConfig, visible: &TokenBatch) -> Result<(Array2<f64>, DecoderCache)> {
    if !cfg.use_decoder {
        return Err(Error::Config("model has no decoder".into()));
    }
    visible.check(cfg.embed_dim, cfg.n_patches())?;
    let n = cfg.n_patches();
    let n_seq = visible.batch_size();
    let e = layers::linear(
        visible.rows.view(),
        params.matrix("decoder.embed.weight")?,
        params.vector("decoder.embed.bias")?,
    );
    let token = params.vector("decoder.mask_token")?;
    let mut z = Array2::zeros((n_seq * n, cfg.decoder_dim));
    let mut filled = vec![false; n_seq * n];
    let mut visible_rows = Vec::with_capacity(visible.rows.nrows());
    for (r, &id) in visible.position_ids.iter().enumerate() {
        let dst = (r / visible.seq_len) * n + id;
        if std::mem::replace(&mut filled[dst], true) {
            return Err(Error::Shape(format!("patch {id} appears twice in one sequence")));
        }
        z.row_mut(dst).assign(&e.row(r));
        visible_rows.push(dst);
    }
    let masked_rows: Vec<usize> = (0..n_seq * n).filter(|&r| !filled[r]).collect();
    for &r in &masked_rows {
        z.row_mut(r).assign(&token);
    }
    let pos = sincos_position_table(cfg.grid(), cfg.decoder_dim);
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        row += &pos.row(i % n);
    }
    let mut blocks = Vec::with_capacity(cfg.decoder_depth);
    for i in 0..cfg.decoder_depth {
        let (y, c) = block_forward(
            params,
            Names::block("decoder", i),
            z,
            n,
            cfg.decoder_heads,
            BranchScales::ones(n_seq),
        )?;
        z = y;
        blocks.push(c);
    }
    let (out, norm) = layers::layer_norm(
        z.view(),
        params.vector("decoder.norm.weight")?,
        params.vector("decoder.norm.bias")?,
    );
    Ok((
        out,
        DecoderCache {
            visible: visible.rows.clone(),
            visible_rows,
            masked_rows,
            blocks,
            norm,
        },
    ))
}

/// Returns the gradient with respect to the visible encoder features.
pub fn decode_backward(
    params: &ParameterStore,
    cfg: &ModelConfig,
    cache: &DecoderCache,
    dout: Array2<f64>,
    grads: &mut ParameterStore,
) -> Result<Array2<f64>> {
    let (mut dz, dg, db) = layers::layer_norm_backward(dout.view(), &cache.norm, params.vector("decoder.norm.weight")?);
    grads.accumulate("decoder.norm.weight", dg);
    grads.accumulate("decoder.norm.bias", db);
    let n = cfg.n_patches();
    for c in cache.blocks.iter().rev() {
        dz = block_backward(params, c, dz, n, cfg.decoder_heads, grads)?;
    }
    let mut dtoken = ndarray::Array1::zeros(cfg.decoder_dim);
    for &r in &cache.masked_rows {
        dtoken += &dz.row(r);
    }
    grads.accumulate("decoder.mask_token", dtoken);
    let de = dz.select(Axis(0), &cache.visible_rows);
    let (dvis, dw, dbias) = layers::linear_backward(cache.visible.view(), params.matrix("decoder.embed.weight")?, de.view());
    grads.accumulate("decoder.embed.weight", dw);
    grads.accumulate("decoder.embed.bias", dbias);
    Ok(dvis)
}

/// Linear map onto the teacher's embedding width.
pub fn project(params: &ParameterStore, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let w = params.matrix("head.weight")?;
    if features.ncols() != w.nrows() {
        return Err(Error::Dimension {
            expected: w.nrows(),
            actual: features.ncols(),
            context: "projection head input".into(),
        });
    }
    Ok(layers::linear(features, w, params.vector("head.bias")?))
}
