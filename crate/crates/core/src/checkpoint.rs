//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "BDSTCKPT"
//! version    u32
//! meta_len   u64, then meta_len bytes of JSON metadata
//! count      u64, then per tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8   (0 = f32, 1 = f64)
//!   ndim     u32, dims as u64 each
//!   payload  product(dims) values
//! digest     32 bytes, SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{parameter_shapes, ModelConfig};
use crate::params::{ParameterStore, StoreMeta};
use crate::pipeline::{FeatureBank, PipelineState, StudentInit, Teacher};
use crate::trainer::OptimizerState;

pub const MAGIC: &[u8; 8] = b"BDSTCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// On-disk precision of tensor payloads. `F64` round-trips every value
/// bit-exactly; `F32` halves the size and is exact only for values that are
/// representable in single precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Full pipeline state: teacher, student and optimizer.
    Pipeline,
    /// A single model's weights.
    Model,
    /// Precomputed per-image teacher features.
    FeatureBank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    #[serde(default)]
    pub stage_index: usize,
    #[serde(default)]
    pub epoch_in_stage: usize,
    #[serde(default)]
    pub epochs_per_stage: Vec<usize>,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub stage_seed: u64,
    #[serde(default)]
    pub student_init: StudentInit,
    #[serde(default)]
    pub model_config: Option<ModelConfig>,
    #[serde(default)]
    pub teacher_config: Option<ModelConfig>,
    #[serde(default)]
    pub optimizer_step: u64,
    /// Provenance of each stored parameter group.
    #[serde(default)]
    pub stores: BTreeMap<String, StoreMeta>,
}

impl CheckpointMeta {
    pub fn new(kind: CheckpointKind) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            stage_index: 0,
            epoch_in_stage: 0,
            epochs_per_stage: Vec::new(),
            base_seed: 0,
            stage_seed: 0,
            student_init: StudentInit::Reinit,
            model_config: None,
            teacher_config: None,
            optimizer_step: 0,
            stores: BTreeMap::new(),
        }
    }
}

/// Metadata plus named tensors. Groups share one namespace through prefixes
/// such as `student.` and `teacher.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParameterStore,
}

impl Checkpoint {
    /// Tensors under `group.`, with the prefix removed.
    pub fn group(&self, group: &str) -> ParameterStore {
        let prefix = format!("{group}.");
        let mut out = ParameterStore::new();
        for (name, t) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix(&prefix) {
                out.insert(rest, t.clone());
            }
        }
        out.meta = self.meta.stores.get(group).cloned().unwrap_or_default();
        out
    }

    pub fn insert_group(&mut self, group: &str, store: &ParameterStore) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{group}.{name}"), t.clone());
        }
        self.meta.stores.insert(group.to_string(), store.meta.clone());
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(match dtype {
                Dtype::F32 => 0,
                Dtype::F64 => 1,
            });
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.iter() {
                match dtype {
                    Dtype::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => buf.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checkpoint digest mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = r.u64()?;
        let mut tensors = ParameterStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match dtype {
                0 => r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                1 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                other => return Err(Error::Format(format!("unknown dtype tag {other} for `{name}`"))),
            };
            let t = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| Error::Format(e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    /// Write atomically: a temporary sibling is renamed into place.
    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn check_shapes(store: &ParameterStore, cfg: &ModelConfig, encoder_only: bool) -> Result<()> {
    let mut expected: Vec<(String, Vec<usize>)> = parameter_shapes(cfg);
    if encoder_only {
        expected.retain(|(n, _)| n.starts_with("encoder.") && n != "encoder.mask_token");
    }
    if expected.len() != store.len() {
        return Err(Error::Format(format!(
            "expected {} parameters for the stored config, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, shape) in expected {
        let t = store.get(&name).map_err(|_| Error::Format(format!("missing parameter `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    Ok(())
}

/// Snapshot of the full pipeline state.
pub fn state_checkpoint(state: &PipelineState) -> Checkpoint {
    let mut meta = CheckpointMeta::new(CheckpointKind::Pipeline);
    meta.stage_index = state.stage_index;
    meta.epoch_in_stage = state.epoch_in_stage;
    meta.epochs_per_stage = state.epochs_per_stage.clone();
    meta.base_seed = state.base_seed;
    meta.stage_seed = state.stage_seed();
    meta.student_init = state.student_init;
    meta.model_config = Some(state.student_config.clone());
    meta.teacher_config = state.teacher.config().cloned();
    meta.optimizer_step = state.optimizer.step;
    let mut ckpt = Checkpoint {
        meta,
        tensors: ParameterStore::new(),
    };
    ckpt.insert_group("student", &state.student);
    ckpt.insert_group("optim.m", &state.optimizer.m);
    ckpt.insert_group("optim.v", &state.optimizer.v);
    match &state.teacher {
        Teacher::Network { params, .. } => ckpt.insert_group("teacher", params),
        Teacher::Precomputed(bank) => {
            ckpt.tensors.insert("bank.features", bank.features.clone().into_dyn());
        }
    }
    ckpt
}

/// Rebuild a pipeline state saved by [`state_checkpoint`].
pub fn restore_state(ckpt: &Checkpoint) -> Result<PipelineState> {
    let meta = &ckpt.meta;
    if meta.kind != CheckpointKind::Pipeline {
        return Err(Error::Format(format!("expected a pipeline checkpoint, found {:?}", meta.kind)));
    }
    let student_config = meta
        .model_config
        .clone()
        .ok_or_else(|| Error::Format("pipeline checkpoint lacks the model config".into()))?;
    let student = ckpt.group("student");
    check_shapes(&student, &student_config, false)?;
    let teacher = match &meta.teacher_config {
        Some(config) => {
            let params = ckpt.group("teacher");
            check_shapes(&params, config, true)?;
            Teacher::Network {
                params,
                config: config.clone(),
            }
        }
        None => Teacher::Precomputed(bank_from(&ckpt.tensors, "bank.features")?),
    };
    let optimizer = OptimizerState {
        m: ckpt.group("optim.m"),
        v: ckpt.group("optim.v"),
        step: meta.optimizer_step,
    };
    student.check_compatible(&optimizer.m)?;
    student.check_compatible(&optimizer.v)?;
    let state = PipelineState {
        stage_index: meta.stage_index,
        epoch_in_stage: meta.epoch_in_stage,
        epochs_per_stage: meta.epochs_per_stage.clone(),
        teacher,
        student,
        student_config,
        optimizer,
        student_init: meta.student_init,
        base_seed: meta.base_seed,
    };
    if state.current_stage_epochs()? < state.epoch_in_stage {
        return Err(Error::Format("checkpoint epoch beyond its stage".into()));
    }
    Ok(state)
}

/// A single model's weights with its config.
pub fn model_checkpoint(params: &ParameterStore, config: &ModelConfig) -> Checkpoint {
    let mut meta = CheckpointMeta::new(CheckpointKind::Model);
    meta.model_config = Some(config.clone());
    let mut ckpt = Checkpoint {
        meta,
        tensors: ParameterStore::new(),
    };
    ckpt.insert_group("model", params);
    ckpt
}

/// Which weights of a checkpoint to use as an encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Student,
    Teacher,
}

/// Encoder weights and config from any checkpoint holding a network:
/// a model checkpoint, or the student or teacher of a pipeline checkpoint.
pub fn load_encoder(ckpt: &Checkpoint, role: Role) -> Result<(ParameterStore, ModelConfig)> {
    match (ckpt.meta.kind, role) {
        (CheckpointKind::Model, _) | (CheckpointKind::Pipeline, Role::Student) => {
            let group = if ckpt.meta.kind == CheckpointKind::Model { "model" } else { "student" };
            let cfg = ckpt
                .meta
                .model_config
                .clone()
                .ok_or_else(|| Error::Format("checkpoint lacks the model config".into()))?;
            let store = ckpt.group(group);
            let encoder_only = !store.contains("head.weight");
            check_shapes(&store, &cfg, encoder_only)?;
            Ok((store, cfg))
        }
        (CheckpointKind::Pipeline, Role::Teacher) => {
            let cfg = ckpt
                .meta
                .teacher_config
                .clone()
                .ok_or_else(|| Error::Format("the teacher of this checkpoint is a feature bank".into()))?;
            let store = ckpt.group("teacher");
            check_shapes(&store, &cfg, true)?;
            Ok((store, cfg))
        }
        (CheckpointKind::FeatureBank, _) => Err(Error::Format("a feature bank holds no network".into())),
    }
}

fn bank_from(tensors: &ParameterStore, name: &str) -> Result<FeatureBank> {
    let t = tensors
        .get(name)
        .map_err(|_| Error::Format(format!("missing tensor `{name}`")))?
        .clone();
    let features = t
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Format("feature bank must be [images, patches, dim]".into()))?;
    Ok(FeatureBank { features })
}

pub fn bank_checkpoint(bank: &FeatureBank) -> Checkpoint {
    let mut tensors = ParameterStore::new();
    tensors.insert("features", bank.features.clone().into_dyn());
    Checkpoint {
        meta: CheckpointMeta::new(CheckpointKind::FeatureBank),
        tensors,
    }
}

pub fn load_bank(ckpt: &Checkpoint) -> Result<FeatureBank> {
    if ckpt.meta.kind != CheckpointKind::FeatureBank {
        return Err(Error::Format(format!("expected a feature bank, found {:?}", ckpt.meta.kind)));
    }
    bank_from(&ckpt.tensors, "features")
}
