//! AdamW, the warmup + cosine schedule, and the per-stage training loop.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, AugmentConfig, Batch, DatasetManifest};
use crate::error::{Error, Result};
use crate::masking::{sample_mask, PatchMask};
use crate::model::{patchify, student_backward, student_forward, ModelConfig, TokenBatch};
use crate::objective::{mkd_loss_batch, DistillConfig};
use crate::params::ParameterStore;
use crate::pipeline::{momentum_coefficient, MomentumPolicy, Observer, PipelineState};
use crate::rng::{self, domain};

/// Optimizer and schedule settings.
///
/// `total_epochs` and `steps_per_epoch` describe the run the schedule spans;
/// the pipeline fills them in per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Learning rate per 256 images.
    pub base_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    /// Clip the global gradient norm to this value.
    pub clip_grad: Option<f64>,
    /// Also decay biases, norm gains and mask tokens (parameters with fewer
    /// than two dimensions).
    pub decay_vectors: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1.5e-4,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
            warmup_epochs: 5,
            total_epochs: 100,
            steps_per_epoch: 1,
            clip_grad: None,
            decay_vectors: false,
        }
    }
}

impl OptimConfig {
    /// The full-scale pre-training recipe: batch 4096, 40 warmup epochs.
    pub fn full_scale(total_epochs: usize) -> Self {
        Self {
            batch_size: 4096,
            warmup_epochs: 40,
            total_epochs,
            steps_per_epoch: 1_281_167 / 4096,
            ..Self::default()
        }
    }

    pub fn peak_lr(&self) -> f64 {
        scale_lr(self.base_lr, self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!("betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2)));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("base_lr and weight_decay must be ≥ 0, eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if let Some(c) = self.clip_grad {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_grad {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Linear batch-size scaling of a per-256 learning rate.
pub fn scale_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Learning rate at a (possibly fractional) step.
///
/// Linear from 0 to the peak over the warmup steps, then a half cosine that
/// reaches exactly 0 at the last step `T − 1`.
pub fn lr_at_fractional(step: f64, cfg: &OptimConfig) -> f64 {
    let peak = cfg.peak_lr();
    let warmup = cfg.warmup_steps() as f64;
    if step < warmup {
        return peak * step / warmup;
    }
    let span = cfg.total_steps() as f64 - warmup - 1.0;
    if span <= 0.0 {
        return peak;
    }
    let t = ((step - warmup) / span).min(1.0);
    peak * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
}

pub fn lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    lr_at_fractional(step as f64, cfg)
}

/// Learning-rate multiplier of layer `layer_index` out of `num_layers`
/// (embedding 0, head `num_layers`).
pub fn layer_decay_factor(layer_index: usize, num_layers: usize, decay: f64) -> f64 {
    decay.powi((num_layers - layer_index.min(num_layers)) as i32)
}

/// Layer index of an encoder parameter for layer-wise decay: the embedding
/// is 0, block `i` is `i + 1`, everything after the last block is
/// `depth + 1`.
pub fn layer_index(name: &str, depth: usize) -> usize {
    if name.starts_with("encoder.patch_embed") || name == "encoder.mask_token" {
        0
    } else if let Some(rest) = name.strip_prefix("encoder.blocks.") {
        rest.split('.').next().and_then(|i| i.parse::<usize>().ok()).map_or(depth + 1, |i| i + 1)
    } else {
        depth + 1
    }
}

/// First and second moments of every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParameterStore,
    pub v: ParameterStore,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore) -> Self {
        let mut m = params.zeros_like();
        m.meta = Default::default();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Global L2 norm of a gradient store.
pub fn grad_norm(grads: &ParameterStore) -> f64 {
    grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// One AdamW update of every parameter in `params`.
///
/// Parameters absent from `grads` get a zero gradient.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &ParameterStore,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    adamw_step_scaled(params, grads, state, lr, cfg, &|_| 1.0)
}

/// [`adamw_step`] with a per-parameter learning-rate multiplier.
pub fn adamw_step_scaled(
    params: &mut ParameterStore,
    grads: &ParameterStore,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &OptimConfig,
    lr_scale: &dyn Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !params.contains(name) {
            return Err(Error::Shape(format!("gradient for unknown parameter `{name}`")));
        }
        if let Some(x) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {x} in `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let p = params.get_mut(&name)?;
        let decay = if cfg.decay_vectors || p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        let step = lr * lr_scale(&name);
        let m = state.m.get_mut(&name)?;
        let v = state.v.get_mut(&name)?;
        if m.shape() != p.shape() {
            return Err(Error::Shape(format!("optimizer state for `{name}` has the wrong shape")));
        }
        match grads.get(&name).ok() {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                Zip::from(&mut *p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= step * (update + decay * *p);
                });
            }
            None => {
                Zip::from(&mut *p).and(&mut *m).and(&mut *v).for_each(|p, m, v| {
                    *m *= b1;
                    *v *= b2;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p -= step * (update + decay * *p);
                });
            }
        }
    }
    Ok(())
}

/// Everything a stage needs besides the mutable pipeline state.
#[derive(Clone, Debug)]
pub struct TrainContext<'a> {
    pub data: &'a DatasetManifest,
    pub augment: &'a AugmentConfig,
    pub optim: &'a OptimConfig,
    pub distill: &'a DistillConfig,
    pub momentum: MomentumPolicy,
}

impl TrainContext<'_> {
    pub fn steps_per_epoch(&self) -> usize {
        self.data.len() / self.optim.batch_size.max(1)
    }

    /// The optimizer config with the schedule spanning `epochs` epochs.
    pub fn stage_optim(&self, epochs: usize) -> OptimConfig {
        OptimConfig {
            total_epochs: epochs,
            steps_per_epoch: self.steps_per_epoch(),
            warmup_epochs: self.optim.warmup_epochs.min(epochs),
            ..self.optim.clone()
        }
    }
}

/// One optimizer step, recorded for observers.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    /// Step within the stage.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub momentum: f64,
}

/// Stack a batch of images into full-length patch tokens.
pub fn batch_tokens(images: &[crate::data::Image], patch_size: usize) -> Result<TokenBatch> {
    let seqs = images.iter().map(|im| patchify(im.view(), patch_size)).collect::<Result<Vec<_>>>()?;
    let seq_len = seqs.first().map_or(0, |s| s.len());
    let views: Vec<_> = seqs.iter().map(|s| s.tokens.view()).collect();
    let rows = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(TokenBatch {
        rows,
        position_ids: seqs.iter().flat_map(|s| s.position_ids.iter().copied()).collect(),
        seq_len,
    })
}

/// Masks for one batch, drawn from the stream of that batch.
pub fn batch_masks(n: usize, n_patches: usize, ratio: f64, seed: u64) -> Result<Vec<PatchMask>> {
    let mut r = rng::stream(seed, &[domain::MASK]);
    (0..n).map(|_| sample_mask(n_patches, ratio, &mut r)).collect()
}

/// Distillation loss and student gradients for one batch; no update.
pub fn batch_loss_and_grads(
    state: &PipelineState,
    distill: &DistillConfig,
    batch: &Batch,
    batch_seed: u64,
) -> Result<(f64, ParameterStore)> {
    let cfg = &state.student_config;
    let full = batch_tokens(&batch.images, cfg.patch_size)?;
    let masks = batch_masks(batch.images.len(), cfg.n_patches(), distill.mask_ratio, batch_seed)?;
    let target = state.teacher.targets(&batch.indices, &full, distill)?;
    if target.ncols() != cfg.projection_dim {
        return Err(Error::Dimension {
            expected: cfg.projection_dim,
            actual: target.ncols(),
            context: "teacher target width vs student projection_dim".into(),
        });
    }
    let mut dp = rng::stream(batch_seed, &[domain::DROP_PATH]);
    let pass = student_forward(&state.student, cfg, &full, &masks, Some(&mut dp))?;
    let loss = mkd_loss_batch(pass.prediction.view(), target.view(), &masks, distill)?;
    if !loss.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", loss.value)));
    }
    let grads = student_backward(&state.student, cfg, &pass, loss.grad)?;
    Ok((loss.value, grads))
}

/// Train the current stage from `state.epoch_in_stage` to its last epoch.
///
/// Each step samples masks, computes teacher targets on the intact batch,
/// runs the student on the visible patches, and applies AdamW followed by
/// the momentum update of the teacher. Randomness is keyed by
/// (stage seed, epoch, batch), so resuming at an epoch boundary replays the
/// original run exactly. Returns the mean loss of each epoch run.
pub fn train_stage(
    state: &mut PipelineState,
    ctx: &TrainContext<'_>,
    observer: &mut dyn Observer,
) -> Result<Vec<f64>> {
    let stage = state.stage_index;
    let epochs = state.current_stage_epochs()?;
    let optim = ctx.stage_optim(epochs);
    optim.validate()?;
    ctx.distill.validate()?;
    let spe = ctx.steps_per_epoch();
    let total = optim.total_steps();
    let stage_seed = state.stage_seed();
    let mut trace = Vec::new();
    while state.epoch_in_stage < epochs {
        let epoch = state.epoch_in_stage;
        let epoch_seed = rng::derive_seed(stage_seed, &[epoch as u64]);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (b, batch) in make_batches(ctx.data, optim.batch_size, ctx.augment, epoch_seed)?.enumerate() {
            let step = epoch * spe + b;
            let batch_seed = rng::derive_seed(epoch_seed, &[b as u64]);
            let (loss, mut grads) = batch_loss_and_grads(state, ctx.distill, &batch, batch_seed)
                .map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("{msg} (stage {stage}, epoch {epoch}, batch {b})"))
                    }
                    other => other,
                })?;
            if let Some(c) = optim.clip_grad {
                clip_grad_norm(&mut grads, c);
            }
            let lr = lr_at(step, &optim);
            adamw_step(&mut state.student, &grads, &mut state.optimizer, lr, &optim)?;
            let m = momentum_coefficient(ctx.momentum, step + 1, total, false);
            if m < 1.0 {
                state.teacher.follow(&state.student, m)?;
            }
            sum += loss;
            count += 1;
            observer.on_step(
                state,
                &StepRecord {
                    stage,
                    epoch,
                    step,
                    lr,
                    loss,
                    momentum: m,
                },
            )?;
        }
        let mean = sum / count.max(1) as f64;
        trace.push(mean);
        state.epoch_in_stage += 1;
        observer.on_epoch(state, mean)?;
    }
    Ok(trace)
}

/// Student config check shared by the pipeline: the projection must match
/// the target width the teacher produces.
pub fn check_target_width(student: &ModelConfig, width: usize) -> Result<()> {
    if student.projection_dim != width {
        return Err(Error::Dimension {
            expected: width,
            actual: student.projection_dim,
            context: "student projection_dim vs teacher target width".into(),
        });
    }
    Ok(())
}
