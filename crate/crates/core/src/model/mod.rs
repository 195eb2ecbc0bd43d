//! Vision Transformer: patch embedding, attention blocks with recordable
//! attention maps, stochastic depth, the student's lightweight decoder and
//! the projection head onto the teacher's width.

mod config;
mod init;
pub mod layers;
mod patch;
mod vit;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, ArrayView3};

pub use config::ModelConfig;
pub use init::{init_model, parameter_shapes, xavier_bound};
pub use patch::{normalize_patches, patchify, sincos_position_table, unpatchify, TokenSequence};
pub use vit::{
    decode, decode_backward, encode, encode_backward, encoder_norm, project, AttentionRecord, BranchScales,
    DecoderCache, EncoderCache, EncoderPass, TokenBatch,
};

use crate::error::{Error, Result};
use crate::masking::{gather_visible_batch, PatchMask};
use crate::params::ParameterStore;
use crate::rng::Rng;

/// What the teacher produces for each patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Raw pixels of the patch, standardized per patch when `normalized`.
    Pixel { normalized: bool },
    /// Output of encoder block `k`; `0` is the patch embedding plus position.
    Block(usize),
    /// Output of the last encoder block.
    Last,
}

impl TargetKind {
    /// Concrete block index for an encoder of the given depth.
    pub fn resolve(self, depth: usize) -> Self {
        match self {
            TargetKind::Last => TargetKind::Block(depth),
            other => other,
        }
    }

    /// Width of the target for a teacher of shape `teacher`.
    pub fn width(self, teacher: &ModelConfig) -> usize {
        match self {
            TargetKind::Pixel { .. } => teacher.patch_dim(),
            _ => teacher.embed_dim,
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetKind::Pixel { normalized: true } => f.write_str("pixel"),
            TargetKind::Pixel { normalized: false } => f.write_str("raw_pixel"),
            TargetKind::Block(k) => write!(f, "block_{k}"),
            TargetKind::Last => f.write_str("last"),
        }
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(TargetKind::Pixel { normalized: true }),
            "raw_pixel" => Ok(TargetKind::Pixel { normalized: false }),
            "last" => Ok(TargetKind::Last),
            _ => s
                .strip_prefix("block_")
                .and_then(|k| k.parse().ok())
                .map(TargetKind::Block)
                .ok_or_else(|| Error::Config(format!("unknown target `{s}` (pixel, raw_pixel, last, block_<k>)"))),
        }
    }
}

impl serde::Serialize for TargetKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for TargetKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Encode one image's tokens (raw pixel patches, possibly a visible subset).
///
/// Returns last-block features with the input's position ids, plus attention
/// maps when `record_attention` is set. Stochastic depth runs only when
/// `training` is set, drawing from `rng`.
pub fn forward_encoder(
    params: &ParameterStore,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
    record_attention: bool,
    training: bool,
    rng: &mut Rng,
) -> Result<(TokenSequence, Option<AttentionRecord>)> {
    tokens.validate(cfg.n_patches())?;
    let batch = TokenBatch {
        rows: tokens.tokens.clone(),
        position_ids: tokens.position_ids.clone(),
        seq_len: tokens.len(),
    };
    let pass = encode(params, cfg, &batch, None, None, training.then_some(rng))?;
    let record = record_attention.then(|| pass.attention_records(cfg.num_heads).remove(0));
    Ok((
        TokenSequence {
            tokens: pass.features,
            position_ids: tokens.position_ids.clone(),
        },
        record,
    ))
}

/// Decode one image's visible encoder features to the full patch set.
pub fn forward_decoder(
    params: &ParameterStore,
    cfg: &ModelConfig,
    visible_features: &TokenSequence,
    mask: &PatchMask,
) -> Result<Array2<f64>> {
    if visible_features.len() != mask.visible_count() || mask.n_patches() != cfg.n_patches() {
        return Err(Error::Shape(format!(
            "{} visible features for a mask with {} of {} patches visible",
            visible_features.len(),
            mask.visible_count(),
            mask.n_patches()
        )));
    }
    if visible_features.position_ids.iter().any(|&i| i >= mask.n_patches() || mask.is_masked(i)) {
        return Err(Error::Shape("visible features reference masked patches".into()));
    }
    let batch = TokenBatch {
        rows: visible_features.tokens.clone(),
        position_ids: visible_features.position_ids.clone(),
        seq_len: visible_features.len(),
    };
    Ok(decode(params, cfg, &batch)?.0)
}

/// Apply the projection head.
pub fn project_to_teacher_dim(params: &ParameterStore, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    project(params, features)
}

/// Teacher targets for a batch of intact images (all patches, patch order).
/// The teacher always runs without stochastic depth.
pub fn teacher_targets(
    params: &ParameterStore,
    cfg: &ModelConfig,
    full: &TokenBatch,
    target: TargetKind,
    apply_final_ln: bool,
) -> Result<Array2<f64>> {
    match target.resolve(cfg.depth) {
        TargetKind::Pixel { normalized } => {
            if full.rows.ncols() != cfg.patch_dim() {
                return Err(Error::Dimension {
                    expected: cfg.patch_dim(),
                    actual: full.rows.ncols(),
                    context: "pixel patches".into(),
                });
            }
            Ok(if normalized {
                normalize_patches(full.rows.view())
            } else {
                full.rows.clone()
            })
        }
        TargetKind::Block(k) => {
            if k > cfg.depth {
                return Err(Error::Config(format!("target block {k} exceeds teacher depth {}", cfg.depth)));
            }
            let pass = encode(params, cfg, full, None, Some(k), None)?;
            Ok(if apply_final_ln {
                encoder_norm(params, pass.features.view())?.0
            } else {
                pass.features
            })
        }
        TargetKind::Last => unreachable!("resolved above"),
    }
}

/// Teacher targets for one intact `H×W×C` image.
pub fn forward_teacher(
    params: &ParameterStore,
    cfg: &ModelConfig,
    image: ArrayView3<'_, f64>,
    target: TargetKind,
    apply_final_ln: bool,
) -> Result<Array2<f64>> {
    let tokens = patchify(image, cfg.patch_size)?;
    let batch = TokenBatch {
        seq_len: tokens.len(),
        rows: tokens.tokens,
        position_ids: tokens.position_ids,
    };
    teacher_targets(params, cfg, &batch, target, apply_final_ln)
}

enum StudentCache {
    Asymmetric {
        encoder: EncoderCache,
        norm: layers::NormCache,
        visible: TokenBatch,
        decoder: DecoderCache,
        head_input: Array2<f64>,
    },
    Symmetric {
        encoder: EncoderCache,
        norm: layers::NormCache,
        head_input: Array2<f64>,
    },
}

/// A student forward pass over a batch, kept for back-propagation.
pub struct StudentPass {
    /// `[batch·n_patches, projection_dim]` in patch order.
    pub prediction: Array2<f64>,
    cache: StudentCache,
}

impl StudentPass {
    /// Normalized encoder features at the visible positions (students with a
    /// decoder only).
    pub fn visible_features(&self) -> Option<&TokenBatch> {
        match &self.cache {
            StudentCache::Asymmetric { visible, .. } => Some(visible),
            StudentCache::Symmetric { .. } => None,
        }
    }
}

/// Run the student on a batch of full-length pixel patches under `masks`.
///
/// With a decoder, only visible patches enter the encoder and the decoder
/// restores full length. Without one, masked patches are replaced by the
/// encoder's mask token before the first block.
pub fn student_forward(
    params: &ParameterStore,
    cfg: &ModelConfig,
    full: &TokenBatch,
    masks: &[PatchMask],
    rng: Option<&mut Rng>,
) -> Result<StudentPass> {
    if cfg.use_decoder {
        let visible = gather_visible_batch(full, masks)?;
        let enc = encode(params, cfg, &visible, None, None, rng)?;
        let (f, norm) = encoder_norm(params, enc.features.view())?;
        let vis_features = TokenBatch {
            rows: f,
            position_ids: visible.position_ids.clone(),
            seq_len: visible.seq_len,
        };
        let (head_input, decoder) = decode(params, cfg, &vis_features)?;
        let prediction = project(params, head_input.view())?;
        Ok(StudentPass {
            prediction,
            cache: StudentCache::Asymmetric {
                encoder: enc.cache,
                norm,
                visible: vis_features,
                decoder,
                head_input,
            },
        })
    } else {
        if masks.len() != full.batch_size() {
            return Err(Error::Shape(format!("{} masks for {} sequences", masks.len(), full.batch_size())));
        }
        let flags: Vec<bool> = masks.iter().flat_map(|m| m.flags().iter().copied()).collect();
        let enc = encode(params, cfg, full, Some(&flags), None, rng)?;
        let (head_input, norm) = encoder_norm(params, enc.features.view())?;
        let prediction = project(params, head_input.view())?;
        Ok(StudentPass {
            prediction,
            cache: StudentCache::Symmetric {
                encoder: enc.cache,
                norm,
                head_input,
            },
        })
    }
}

/// Gradients of every student parameter given `dprediction`.
pub fn student_backward(
    params: &ParameterStore,
    cfg: &ModelConfig,
    pass: &StudentPass,
    dprediction: Array2<f64>,
) -> Result<ParameterStore> {
    let mut grads = ParameterStore::new();
    let head_input = match &pass.cache {
        StudentCache::Asymmetric { head_input, .. } | StudentCache::Symmetric { head_input, .. } => head_input,
    };
    let (dhead, dw, db) = layers::linear_backward(head_input.view(), params.matrix("head.weight")?, dprediction.view());
    grads.accumulate("head.weight", dw);
    grads.accumulate("head.bias", db);
    let (encoder, norm, dnormed) = match &pass.cache {
        StudentCache::Asymmetric { encoder, norm, decoder, .. } => {
            (encoder, norm, decode_backward(params, cfg, decoder, dhead, &mut grads)?)
        }
        StudentCache::Symmetric { encoder, norm, .. } => (encoder, norm, dhead),
    };
    let (dfeat, dg, db) = layers::layer_norm_backward(dnormed.view(), norm, params.vector("encoder.norm.weight")?);
    grads.accumulate("encoder.norm.weight", dg);
    grads.accumulate("encoder.norm.bias", db);
    encode_backward(params, cfg, encoder, dfeat, &mut grads)?;
    Ok(grads)
}
