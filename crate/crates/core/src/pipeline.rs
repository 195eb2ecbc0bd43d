//! The bootstrapped-teacher state machine: stages, breakpoints, teacher
//! updates and the multi-stage driver.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_model, teacher_targets, ModelConfig, TargetKind, TokenBatch};
use crate::objective::DistillConfig;
use crate::params::ParameterStore;
use crate::rng::{derive_seed, domain};
use crate::trainer::{check_target_width, train_stage, OptimizerState, StepRecord, TrainContext};

/// How the teacher tracks the student between breakpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumPolicy {
    /// Frozen within a stage, replaced by the student at each breakpoint.
    Vanilla,
    /// EMA with a fixed coefficient every step.
    Constant(f64),
    /// EMA whose coefficient rises from `a` to `b` along a half cosine.
    Cosine(f64, f64),
}

impl MomentumPolicy {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match *self {
            MomentumPolicy::Vanilla => Ok(()),
            MomentumPolicy::Constant(m) if unit(m) => Ok(()),
            MomentumPolicy::Cosine(a, b) if unit(a) && unit(b) && a <= b => Ok(()),
            other => Err(Error::Config(format!("invalid momentum policy {other}"))),
        }
    }
}

impl fmt::Display for MomentumPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentumPolicy::Vanilla => write!(f, "vanilla"),
            MomentumPolicy::Constant(m) => write!(f, "constant:{m}"),
            MomentumPolicy::Cosine(a, b) => write!(f, "cosine:{a}:{b}"),
        }
    }
}

impl FromStr for MomentumPolicy {
    type Err = Error;

    /// `vanilla`, `constant:<m>` or `cosine:<a>:<b>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse momentum policy `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let policy = match parts.as_slice() {
            ["vanilla"] => MomentumPolicy::Vanilla,
            ["constant", m] => MomentumPolicy::Constant(num(m)?),
            ["cosine", a, b] => MomentumPolicy::Cosine(num(a)?, num(b)?),
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Teacher momentum at `step` of `total_steps`.
pub fn momentum_coefficient(policy: MomentumPolicy, step: usize, total_steps: usize, at_breakpoint: bool) -> f64 {
    match policy {
        MomentumPolicy::Vanilla => {
            if at_breakpoint {
                0.0
            } else {
                1.0
            }
        }
        MomentumPolicy::Constant(m) => m,
        MomentumPolicy::Cosine(a, b) => {
            let t = if total_steps == 0 { 1.0 } else { step as f64 / total_steps as f64 };
            b - (b - a) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
        }
    }
}

/// `m·teacher + (1 − m)·student` for every teacher parameter.
pub fn update_teacher(teacher: &ParameterStore, student: &ParameterStore, m: f64) -> Result<ParameterStore> {
    let mut out = teacher.clone();
    if m == 1.0 {
        for (name, t) in teacher.iter() {
            same_shape(name, t.shape(), student.get(name)?.shape())?;
        }
        return Ok(out);
    }
    for (name, t) in out.iter_mut() {
        let s = student.get(name)?;
        same_shape(name, t.shape(), s.shape())?;
        ndarray::Zip::from(t).and(s).for_each(|t, &s| *t = m * *t + (1.0 - m) * s);
    }
    Ok(out)
}

fn same_shape(name: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("`{name}`: teacher shape {a:?}, student shape {b:?}")));
    }
    Ok(())
}

/// The encoder weights of a model store: everything a teacher needs.
pub fn encoder_weights(store: &ParameterStore) -> ParameterStore {
    let mut enc = store.with_prefix("encoder.");
    enc.remove("encoder.mask_token");
    enc
}

/// Per-image patch features of an external teacher, indexed like the
/// dataset manifest it was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    /// `[images, n_patches, dim]`.
    pub features: Array3<f64>,
}

impl FeatureBank {
    pub fn len(&self) -> usize {
        self.features.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_patches(&self) -> usize {
        self.features.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.features.len_of(Axis(2))
    }

    /// Check the bank against a student: patch count and target width.
    pub fn check(&self, student: &ModelConfig, images: usize) -> Result<()> {
        if self.dim() != student.projection_dim {
            return Err(Error::Dimension {
                expected: student.projection_dim,
                actual: self.dim(),
                context: "feature bank width vs projection_dim".into(),
            });
        }
        if self.n_patches() != student.n_patches() {
            return Err(Error::Dimension {
                expected: student.n_patches(),
                actual: self.n_patches(),
                context: "feature bank patches per image".into(),
            });
        }
        if self.len() != images {
            return Err(Error::Data(format!("feature bank holds {} images, dataset {images}", self.len())));
        }
        Ok(())
    }

    fn rows(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((indices.len() * self.n_patches(), self.dim()));
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Data(format!("image {i} outside the feature bank")));
            }
            let n = self.n_patches();
            out.slice_mut(s![k * n..(k + 1) * n, ..]).assign(&self.features.slice(s![i, .., ..]));
        }
        Ok(out)
    }
}

/// The distillation teacher.
#[derive(Clone, Debug, PartialEq)]
pub enum Teacher {
    /// A plain ViT encoder run on the intact image.
    Network { params: ParameterStore, config: ModelConfig },
    /// Fixed features looked up by image index; requires un-augmented data.
    Precomputed(FeatureBank),
}

impl Teacher {
    /// A randomly initialized teacher shaped like `config`.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Teacher::Network {
            params: encoder_weights(&init_model(config, seed)?),
            config: config.clone(),
        })
    }

    pub fn params(&self) -> Option<&ParameterStore> {
        match self {
            Teacher::Network { params, .. } => Some(params),
            Teacher::Precomputed(_) => None,
        }
    }

    pub fn config(&self) -> Option<&ModelConfig> {
        match self {
            Teacher::Network { config, .. } => Some(config),
            Teacher::Precomputed(_) => None,
        }
    }

    /// Width of the targets this teacher yields under `target`.
    pub fn target_width(&self, target: TargetKind) -> usize {
        match (self, target) {
            (Teacher::Precomputed(bank), t) if !matches!(t, TargetKind::Pixel { .. }) => bank.dim(),
            (Teacher::Network { config, .. }, t) => t.width(config),
            (Teacher::Precomputed(_), _) => 0,
        }
    }

    /// Targets for a batch: `indices` are manifest positions, `full` the
    /// batch's intact patch tokens. Pixel targets come straight from the
    /// input whichever teacher is installed.
    pub fn targets(&self, indices: &[usize], full: &TokenBatch, distill: &DistillConfig) -> Result<Array2<f64>> {
        match (self, distill.target) {
            (_, TargetKind::Pixel { normalized }) => Ok(if normalized {
                crate::model::normalize_patches(full.rows.view())
            } else {
                full.rows.clone()
            }),
            (Teacher::Network { params, config }, t) => teacher_targets(params, config, full, t, distill.target_ln),
            (Teacher::Precomputed(bank), _) => bank.rows(indices),
        }
    }

    /// Pull the teacher towards the student with momentum `m`.
    pub fn follow(&mut self, student: &ParameterStore, m: f64) -> Result<()> {
        match self {
            Teacher::Network { params, .. } => {
                *params = update_teacher(params, student, m)?;
                Ok(())
            }
            Teacher::Precomputed(_) => Err(Error::State("a precomputed teacher cannot track the student".into())),
        }
    }

    pub fn content_hash(&self) -> String {
        match self {
            Teacher::Network { params, .. } => params.content_hash(),
            Teacher::Precomputed(bank) => {
                let mut s = ParameterStore::new();
                s.insert("features", bank.features.clone().into_dyn());
                s.content_hash()
            }
        }
    }
}

/// What happens to the student at a breakpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Reinit,
    Keep,
}

/// Mutable state of a multi-stage run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub stage_index: usize,
    pub epoch_in_stage: usize,
    pub epochs_per_stage: Vec<usize>,
    pub teacher: Teacher,
    pub student: ParameterStore,
    pub student_config: ModelConfig,
    pub optimizer: OptimizerState,
    pub student_init: StudentInit,
    pub base_seed: u64,
}

/// Seed of the student initialized at the start of `stage`.
pub fn student_seed(base_seed: u64, stage: usize) -> u64 {
    derive_seed(base_seed, &[domain::INIT, stage as u64])
}

impl PipelineState {
    /// Fresh state at the start of the first stage.
    pub fn new(
        student_config: ModelConfig,
        teacher: Teacher,
        epochs_per_stage: Vec<usize>,
        student_init: StudentInit,
        base_seed: u64,
    ) -> Result<Self> {
        student_config.validate()?;
        if epochs_per_stage.is_empty() || epochs_per_stage.contains(&0) {
            return Err(Error::Config(format!("stage epochs {epochs_per_stage:?} must be non-empty and positive")));
        }
        if let Teacher::Network { config, .. } = &teacher {
            config.validate()?;
        }
        let student = init_model(&student_config, student_seed(base_seed, 0))?;
        Ok(Self {
            stage_index: 0,
            epoch_in_stage: 0,
            epochs_per_stage,
            teacher,
            optimizer: OptimizerState::new(&student),
            student,
            student_config,
            student_init,
            base_seed,
        })
    }

    /// Seed keying all randomness of the current stage.
    pub fn stage_seed(&self) -> u64 {
        derive_seed(self.base_seed, &[self.stage_index as u64])
    }

    pub fn current_stage_epochs(&self) -> Result<usize> {
        self.epochs_per_stage
            .get(self.stage_index)
            .copied()
            .ok_or_else(|| Error::State(format!("stage {} beyond the schedule", self.stage_index)))
    }

    pub fn stage_complete(&self) -> bool {
        self.current_stage_epochs().is_ok_and(|e| self.epoch_in_stage >= e)
    }

    pub fn is_finished(&self) -> bool {
        self.stage_index + 1 == self.epochs_per_stage.len() && self.stage_complete()
    }
}

fn same_encoder(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.image_size == b.image_size
        && a.patch_size == b.patch_size
        && a.in_channels == b.in_channels
        && a.embed_dim == b.embed_dim
        && a.depth == b.depth
        && a.num_heads == b.num_heads
        && a.mlp_ratio == b.mlp_ratio
}

/// Close the current stage: the teacher takes the student's encoder weights,
/// the student is re-initialized (or kept), the optimizer restarts and the
/// next stage begins.
pub fn advance_breakpoint(state: &mut PipelineState) -> Result<()> {
    let epochs = state.current_stage_epochs()?;
    if state.epoch_in_stage != epochs {
        return Err(Error::State(format!(
            "breakpoint requested at epoch {} of {epochs} in stage {}",
            state.epoch_in_stage, state.stage_index
        )));
    }
    if state.stage_index + 1 >= state.epochs_per_stage.len() {
        return Err(Error::State("no stage follows the last one".into()));
    }
    if let Teacher::Network { config, .. } = &state.teacher {
        if !same_encoder(config, &state.student_config) {
            return Err(Error::Config(
                "teacher and student encoders differ in shape; weights cannot be handed over".into(),
            ));
        }
    }
    state.teacher = Teacher::Network {
        params: encoder_weights(&state.student),
        config: state.student_config.clone(),
    };
    state.stage_index += 1;
    state.epoch_in_stage = 0;
    if state.student_init == StudentInit::Reinit {
        state.student = init_model(&state.student_config, student_seed(state.base_seed, state.stage_index))?;
    }
    state.optimizer = OptimizerState::new(&state.student);
    Ok(())
}

/// Hooks called by the driver. All default to doing nothing.
pub trait Observer {
    fn on_step(&mut self, _state: &PipelineState, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// After `state.epoch_in_stage` has been incremented.
    fn on_epoch(&mut self, _state: &PipelineState, _mean_loss: f64) -> Result<()> {
        Ok(())
    }

    /// At the end of a stage, before the breakpoint.
    fn on_stage_end(&mut self, _state: &PipelineState) -> Result<()> {
        Ok(())
    }
}

/// An observer that ignores everything.
pub struct Silent;

impl Observer for Silent {}

/// Check that the teacher, student and objective fit together.
pub fn check_setup(state: &PipelineState, ctx: &TrainContext<'_>) -> Result<()> {
    ctx.momentum.validate()?;
    ctx.distill.validate()?;
    ctx.optim.validate()?;
    ctx.augment.validate()?;
    let target = ctx.distill.target;
    let width = match (&state.teacher, target) {
        (_, TargetKind::Pixel { .. }) => state.student_config.patch_dim(),
        (t, k) => t.target_width(k),
    };
    check_target_width(&state.student_config, width)?;
    if let (Teacher::Network { config, .. }, TargetKind::Block(k)) = (&state.teacher, target) {
        if k > config.depth {
            return Err(Error::Config(format!("target block {k} exceeds teacher depth {}", config.depth)));
        }
    }
    if let Teacher::Network { config, .. } = &state.teacher {
        if config.image_size != state.student_config.image_size || config.patch_size != state.student_config.patch_size
        {
            return Err(Error::Config("teacher and student must share image and patch size".into()));
        }
    }
    if let Teacher::Precomputed(bank) = &state.teacher {
        if !matches!(target, TargetKind::Pixel { .. }) {
            bank.check(&state.student_config, ctx.data.len())?;
            if !ctx.augment.is_identity() {
                return Err(Error::Config("precomputed teacher features require augmentation to be off".into()));
            }
            if ctx.momentum != MomentumPolicy::Vanilla && ctx.momentum != MomentumPolicy::Constant(1.0) {
                return Err(Error::Config("a precomputed teacher can only be used with a frozen policy".into()));
            }
        }
    }
    if ctx.augment.output_size != state.student_config.image_size {
        return Err(Error::Config(format!(
            "augmentation output {} differs from model image size {}",
            ctx.augment.output_size, state.student_config.image_size
        )));
    }
    if ctx.optim.batch_size > ctx.data.len() {
        return Err(Error::Data(format!(
            "batch size {} exceeds dataset size {}",
            ctx.optim.batch_size,
            ctx.data.len()
        )));
    }
    Ok(())
}

/// Run every remaining stage. Returns the per-epoch mean losses of each
/// stage trained during this call.
pub fn run_pipeline(
    state: &mut PipelineState,
    ctx: &TrainContext<'_>,
    observer: &mut dyn Observer,
) -> Result<Vec<Vec<f64>>> {
    check_setup(state, ctx)?;
    let mut losses = Vec::new();
    loop {
        if !state.stage_complete() {
            losses.push(train_stage(state, ctx, observer)?);
        }
        observer.on_stage_end(state)?;
        if state.is_finished() {
            return Ok(losses);
        }
        advance_breakpoint(state)?;
    }
}
