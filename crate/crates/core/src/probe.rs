//! Downstream evaluation: linear probing on mean-pooled patch features and
//! end-to-end fine-tuning with layer-wise learning-rate decay.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{eval_transform, AugmentConfig, DatasetManifest, Image, Normalization};
use crate::error::{Error, Result};
use crate::model::{encode, encode_backward, patchify, ModelConfig};
use crate::params::ParameterStore;
use crate::pipeline::encoder_weights;
use crate::rng::{self, domain};
use crate::trainer::{
    adamw_step, adamw_step_scaled, batch_tokens, layer_decay_factor, layer_index, lr_at, OptimConfig, OptimizerState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Train a linear head on frozen features.
    LinearProbe,
    /// Train the encoder and the head together.
    Finetune,
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeMode::LinearProbe => "linear_probe",
            ProbeMode::Finetune => "finetune",
        })
    }
}

impl FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_probe" => Ok(ProbeMode::LinearProbe),
            "finetune" => Ok(ProbeMode::Finetune),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}` (linear_probe | finetune)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    /// Learning rate per 256 images.
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub label_smoothing: f64,
    pub normalize: Normalization,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::LinearProbe,
            epochs: 60,
            base_lr: 1e-2,
            batch_size: 256,
            warmup_epochs: 5,
            weight_decay: 0.0,
            layer_decay: 0.75,
            label_smoothing: 0.0,
            normalize: Normalization::half(),
        }
    }
}

impl ProbeConfig {
    /// Fine-tuning defaults: smaller rate, weight decay, label smoothing.
    pub fn finetune() -> Self {
        Self {
            mode: ProbeMode::Finetune,
            epochs: 20,
            base_lr: 1e-3,
            batch_size: 64,
            warmup_epochs: 2,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!("layer_decay {} outside (0, 1]", self.layer_decay)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.base_lr > 0.0) {
            return Err(Error::Config("probe needs positive epochs, batch size and learning rate".into()));
        }
        Ok(())
    }

    fn optim(&self, steps_per_epoch: usize) -> OptimConfig {
        OptimConfig {
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            beta2: 0.999,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs.min(self.epochs),
            total_epochs: self.epochs,
            steps_per_epoch,
            ..OptimConfig::default()
        }
    }
}

/// Mean over patch tokens of the last block's output for one image.
pub fn pooled_features(params: &ParameterStore, cfg: &ModelConfig, image: ArrayView3<'_, f64>) -> Result<Array1<f64>> {
    let tokens = patchify(image, cfg.patch_size)?;
    let batch = crate::model::TokenBatch {
        seq_len: tokens.len(),
        rows: tokens.tokens,
        position_ids: tokens.position_ids,
    };
    let pass = encode(params, cfg, &batch, None, None, None)?;
    Ok(pass.features.mean_axis(Axis(0)).expect("at least one patch"))
}

/// Pooled features of many preprocessed images, `[images, embed_dim]`.
pub fn pooled_features_batch(params: &ParameterStore, cfg: &ModelConfig, images: &[Image]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.len(), cfg.embed_dim));
    let n = cfg.n_patches();
    for (c, chunk) in images.chunks(128).enumerate() {
        let batch = batch_tokens(chunk, cfg.patch_size)?;
        let pass = encode(params, cfg, &batch, None, None, None)?;
        for k in 0..chunk.len() {
            let pooled = pass.features.slice(s![k * n..(k + 1) * n, ..]).mean_axis(Axis(0)).unwrap();
            out.row_mut(c * 128 + k).assign(&pooled);
        }
    }
    Ok(out)
}

fn eval_images(manifest: &DatasetManifest, cfg: &ModelConfig, normalize: &Normalization) -> Vec<Image> {
    let aug = AugmentConfig::identity(cfg.image_size, normalize.clone());
    manifest.records.iter().map(|r| eval_transform(r.image.view(), &aug)).collect()
}

/// Pooled features of every record after the evaluation transform.
pub fn extract_features(
    params: &ParameterStore,
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    normalize: &Normalization,
) -> Result<Array2<f64>> {
    pooled_features_batch(params, cfg, &eval_images(manifest, cfg, normalize))
}

/// Mean cross-entropy against label-smoothed targets, and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize], smoothing: f64) -> Result<(f64, Array2<f64>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let mut grad = Array2::zeros((n, classes));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let y = labels[i];
        if y >= classes {
            return Err(Error::Data(format!("label {y} outside {classes} classes")));
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        for (c, &z) in row.iter().enumerate() {
            let q = smoothing / classes as f64 + if c == y { 1.0 - smoothing } else { 0.0 };
            loss -= q * (z - lse);
            grad[[i, c]] = ((z - lse).exp() - q) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// A linear classifier on standardized pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    /// `[embed_dim, classes]`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ProbeHead {
    pub fn zeros(mean: Array1<f64>, std: Array1<f64>, classes: usize) -> Self {
        Self {
            weight: Array2::zeros((mean.len(), classes)),
            bias: Array1::zeros(classes),
            mean,
            std,
        }
    }

    /// Per-dimension statistics of `features`; the standard deviation has a
    /// small floor so constant dimensions stay finite.
    pub fn standardizer(features: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
        let mean = features.mean_axis(Axis(0)).expect("non-empty features");
        let var = features.var_axis(Axis(0), 0.0);
        (mean, var.mapv(|v| (v + 1e-6).sqrt()))
    }

    pub fn standardize(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        (&features - &self.mean) / &self.std
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        self.standardize(features).dot(&self.weight) + &self.bias
    }

    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Vec<usize> {
        self.logits(features).rows().into_iter().map(argmax).collect()
    }

    fn store(&self) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("probe.weight", self.weight.clone().into_dyn());
        s.insert("probe.bias", self.bias.clone().into_dyn());
        s
    }

    fn load(&mut self, s: &ParameterStore) -> Result<()> {
        self.weight.assign(&s.matrix("probe.weight")?);
        self.bias.assign(&s.vector("probe.bias")?);
        Ok(())
    }
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of predictions equal to the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data("accuracy needs equally many, non-zero predictions and labels".into()));
    }
    Ok(predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Train a zero-initialized linear head on fixed features with AdamW.
pub fn fit_linear_head(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeHead> {
    cfg.validate()?;
    let n = features.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::Data(format!("{} labels for {n} feature rows", labels.len())));
    }
    let (mean, std) = ProbeHead::standardizer(features);
    let mut head = ProbeHead::zeros(mean, std, classes);
    let x = head.standardize(features);
    let bs = cfg.batch_size.min(n);
    let optim = cfg.optim(n / bs);
    let mut params = head.store();
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(seed, &[domain::PROBE, epoch as u64]));
        for (b, idx) in order.chunks_exact(bs).enumerate() {
            let xb = x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let w = params.matrix("probe.weight")?;
            let logits = xb.dot(&w) + &params.vector("probe.bias")?;
            let (loss, dlogits) = cross_entropy(logits.view(), &yb, cfg.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite probe loss at epoch {epoch}")));
            }
            let mut grads = ParameterStore::new();
            grads.insert("probe.weight", xb.t().dot(&dlogits).into_dyn());
            grads.insert("probe.bias", dlogits.sum_axis(Axis(0)).into_dyn());
            let lr = lr_at(epoch * optim.steps_per_epoch + b, &optim);
            adamw_step(&mut params, &grads, &mut state, lr, &optim)?;
        }
    }
    head.load(&params)?;
    Ok(head)
}

/// Output of [`train_probe`].
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub head: ProbeHead,
    /// Encoder weights used by `head`: unchanged for a linear probe,
    /// updated by fine-tuning.
    pub encoder: ParameterStore,
    pub train_accuracy: f64,
}

/// Train a classifier on top of the encoder in `params`.
pub fn train_probe(
    params: &ParameterStore,
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    probe.validate()?;
    let labels = manifest.labels()?;
    if manifest.class_count == 0 {
        return Err(Error::Data("dataset has no classes".into()));
    }
    let encoder = encoder_weights(params);
    let images = eval_images(manifest, cfg, &probe.normalize);
    let features = pooled_features_batch(&encoder, cfg, &images)?;
    match probe.mode {
        ProbeMode::LinearProbe => {
            let head = fit_linear_head(features.view(), &labels, manifest.class_count, probe, seed)?;
            let train_accuracy = accuracy(&head.predict(features.view()), &labels)?;
            Ok(ProbeResult {
                head,
                encoder,
                train_accuracy,
            })
        }
        ProbeMode::Finetune => finetune(encoder, cfg, &images, &labels, manifest.class_count, features, probe, seed),
    }
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    encoder: ParameterStore,
    cfg: &ModelConfig,
    images: &[Image],
    labels: &[usize],
    classes: usize,
    initial_features: Array2<f64>,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let n = images.len();
    let (mean, std) = ProbeHead::standardizer(initial_features.view());
    let mut head = ProbeHead::zeros(mean, std, classes);
    let mut params = encoder;
    for (name, t) in head.store().iter() {
        params.insert(name, t.clone());
    }
    let bs = probe.batch_size.min(n);
    let optim = probe.optim(n / bs);
    let mut state = OptimizerState::new(&params);
    let num_layers = cfg.depth + 1;
    let scale = |name: &str| {
        if name.starts_with("probe.") {
            1.0
        } else {
            layer_decay_factor(layer_index(name, cfg.depth), num_layers, probe.layer_decay)
        }
    };
    let n_patches = cfg.n_patches();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..probe.epochs {
        let epoch_seed = rng::derive_seed(seed, &[domain::PROBE, epoch as u64]);
        order.shuffle(&mut rng::stream(epoch_seed, &[]));
        for (b, idx) in order.chunks_exact(bs).enumerate() {
            let mut r = rng::stream(epoch_seed, &[b as u64 + 1]);
            let batch_images: Vec<Image> = idx
                .iter()
                .map(|&i| {
                    if r.gen::<bool>() {
                        images[i].slice(s![.., ..;-1, ..]).to_owned()
                    } else {
                        images[i].clone()
                    }
                })
                .collect();
            let tokens = batch_tokens(&batch_images, cfg.patch_size)?;
            let pass = encode(&params, cfg, &tokens, None, None, Some(&mut r))?;
            let pooled = Array2::from_shape_fn((idx.len(), cfg.embed_dim), |(k, d)| {
                pass.features.slice(s![k * n_patches..(k + 1) * n_patches, d]).sum() / n_patches as f64
            });
            let x = head.standardize(pooled.view());
            let w = params.matrix("probe.weight")?.to_owned();
            let logits = x.dot(&w) + &params.vector("probe.bias")?;
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, dlogits) = cross_entropy(logits.view(), &yb, probe.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss at epoch {epoch}")));
            }
            let mut grads = ParameterStore::new();
            grads.insert("probe.weight", x.t().dot(&dlogits).into_dyn());
            grads.insert("probe.bias", dlogits.sum_axis(Axis(0)).into_dyn());
            let dpooled = dlogits.dot(&w.t()) / &head.std;
            let mut dfeat = Array2::zeros(pass.features.raw_dim());
            for k in 0..idx.len() {
                let g = dpooled.row(k).mapv(|v| v / n_patches as f64);
                for mut row in dfeat.slice_mut(s![k * n_patches..(k + 1) * n_patches, ..]).rows_mut() {
                    row.assign(&g);
                }
            }
            encode_backward(&params, cfg, &pass.cache, dfeat, &mut grads)?;
            let lr = lr_at(epoch * optim.steps_per_epoch + b, &optim);
            adamw_step_scaled(&mut params, &grads, &mut state, lr, &optim, &scale)?;
        }
    }
    head.load(&params)?;
    params.remove("probe.weight");
    params.remove("probe.bias");
    let features = pooled_features_batch(&params, cfg, images)?;
    let train_accuracy = accuracy(&head.predict(features.view()), labels)?;
    Ok(ProbeResult {
        head,
        encoder: params,
        train_accuracy,
    })
}

/// Top-1 accuracy of `head` over a labeled split.
pub fn evaluate_accuracy(
    head: &ProbeHead,
    params: &ParameterStore,
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    normalize: &Normalization,
) -> Result<f64> {
    if manifest.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let labels = manifest.labels()?;
    let features = extract_features(params, cfg, manifest, normalize)?;
    accuracy(&head.predict(features.view()), &labels)
}
