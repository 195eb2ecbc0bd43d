//! Desk-scale training criteria: a depth-4, width-96 ViT on 5000 synthetic
//! 32×32 glyph images, probed on 1000 (2000 for the target comparison)
//! held-out ones.

use bootdistill::analysis::performance_std;
use bootdistill::data::{synthetic_dataset, AugmentConfig, DatasetManifest, Split, SyntheticSpec};
use bootdistill::model::{init_model, ModelConfig, TargetKind};
use bootdistill::objective::DistillConfig;
use bootdistill::params::ParameterStore;
use bootdistill::pipeline::{run_pipeline, MomentumPolicy, Observer, PipelineState, StudentInit, Teacher};
use bootdistill::probe::{evaluate_accuracy, train_probe, ProbeConfig, ProbeMode};
use bootdistill::trainer::{OptimConfig, TrainContext};

const TRAIN_IMAGES: usize = 5000;
const EPOCHS_PER_STAGE: usize = 10;

type Res<T> = Result<T, String>;

fn corpus(n: usize, split: Split) -> Res<DatasetManifest> {
    let spec = SyntheticSpec { n_images: n, classes: 10, seed: 0, image_size: 32 };
    synthetic_dataset(&spec, split).map_err(|e| e.to_string())
}

fn model(target: TargetKind) -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.projection_dim = target.width(&cfg);
    cfg
}

fn linear_probe(params: &ParameterStore, cfg: &ModelConfig, train: &DatasetManifest, val: &DatasetManifest) -> Res<f64> {
    let probe = ProbeConfig::default();
    let fit = train_probe(params, cfg, train, &probe, 0).map_err(|e| e.to_string())?;
    evaluate_accuracy(&fit.head, &fit.encoder, cfg, val, &probe.normalize).map_err(|e| e.to_string())
}

/// Students at the end of every stage, plus the per-epoch losses.
#[derive(Default)]
struct Record {
    students: Vec<ParameterStore>,
    losses: Vec<Vec<f64>>,
}

impl Observer for Record {
    fn on_epoch(&mut self, state: &PipelineState, loss: f64) -> bootdistill::Result<()> {
        if self.losses.len() <= state.stage_index {
            self.losses.push(Vec::new());
        }
        self.losses[state.stage_index].push(loss);
        Ok(())
    }

    fn on_stage_end(&mut self, state: &PipelineState) -> bootdistill::Result<()> {
        self.students.push(state.student.clone());
        Ok(())
    }
}

fn distill(teacher: Teacher, stages: usize, target: TargetKind, train: &DatasetManifest) -> Res<Record> {
    let cfg = model(target);
    let augment = AugmentConfig { crop_scale: (0.5, 1.0), ..Default::default() };
    let optim = OptimConfig { base_lr: 1.5e-3, warmup_epochs: 1, ..Default::default() };
    let distill = DistillConfig { target, ..Default::default() };
    let mut state = PipelineState::new(cfg, teacher, vec![EPOCHS_PER_STAGE; stages], StudentInit::Reinit, 0)
        .map_err(|e| e.to_string())?;
    let ctx = TrainContext { data: train, augment: &augment, optim: &optim, distill: &distill, momentum: MomentumPolicy::Vanilla };
    let mut record = Record::default();
    run_pipeline(&mut state, &ctx, &mut record).map_err(|e| e.to_string())?;
    Ok(record)
}

pub fn bootstrapping_trend() -> super::Outcome {
    let train = corpus(TRAIN_IMAGES, Split::Train)?;
    let val = corpus(1000, Split::Val)?;
    let cfg = model(TargetKind::Last);
    let random = init_model(&cfg, 1).map_err(|e| e.to_string())?;
    let record = distill(Teacher::Network { params: random.clone(), config: cfg.clone() }, 2, TargetKind::Last, &train)?;
    let s0 = linear_probe(&random, &cfg, &train, &val)?;
    let s1 = linear_probe(&record.students[0], &cfg, &train, &val)?;
    let s2 = linear_probe(&record.students[1], &cfg, &train, &val)?;
    let ok = s2 - s0 >= 0.10 && s2 >= s1 - 0.01;
    Ok((ok, format!("probe accuracy stage 0 {s0:.3}, stage 1 {s1:.3}, stage 2 {s2:.3} (need s2-s0 >= 0.100, s2 >= s1-0.010)")))
}

pub fn variance_shrink() -> super::Outcome {
    let train = corpus(TRAIN_IMAGES, Split::Train)?;
    let val = corpus(1000, Split::Val)?;
    let cfg = model(TargetKind::Last);
    let supervised = {
        let init = init_model(&cfg, 3).map_err(|e| e.to_string())?;
        let probe = ProbeConfig {
            mode: ProbeMode::Finetune,
            epochs: 3,
            base_lr: 1e-2,
            batch_size: 64,
            warmup_epochs: 1,
            ..Default::default()
        };
        train_probe(&init, &cfg, &train, &probe, 0).map_err(|e| e.to_string())?.encoder
    };
    let teachers = [
        init_model(&cfg, 1).map_err(|e| e.to_string())?,
        init_model(&cfg, 2).map_err(|e| e.to_string())?,
        supervised,
    ];
    let mut teacher_acc = Vec::new();
    let mut student_acc = Vec::new();
    for params in teachers {
        teacher_acc.push(linear_probe(&params, &cfg, &train, &val)?);
        let record = distill(Teacher::Network { params, config: cfg.clone() }, 1, TargetKind::Last, &train)?;
        student_acc.push(linear_probe(&record.students[0], &cfg, &train, &val)?);
    }
    let teacher_std = performance_std(&teacher_acc).map_err(|e| e.to_string())?;
    let student_std = performance_std(&student_acc).map_err(|e| e.to_string())?;
    Ok((
        student_std < teacher_std,
        format!(
            "teachers {teacher_acc:.3?} std {teacher_std:.4}; stage-1 students {student_acc:.3?} std {student_std:.4}"
        ),
    ))
}

pub fn pixel_target_equivalence() -> super::Outcome {
    let train = corpus(TRAIN_IMAGES, Split::Train)?;
    let val = corpus(2000, Split::Val)?;
    let mut acc = Vec::new();
    let mut detail = Vec::new();
    let mut decreasing = true;
    for target in [TargetKind::Pixel { normalized: true }, TargetKind::Block(0)] {
        let cfg = model(target);
        let teacher = Teacher::random(&cfg, 1).map_err(|e| e.to_string())?;
        let record = distill(teacher, 1, target, &train)?;
        let losses = &record.losses[0];
        let (first, last) = (losses[0], losses[losses.len() - 1]);
        decreasing &= last < first;
        let a = linear_probe(&record.students[0], &cfg, &train, &val)?;
        detail.push(format!("{target:?}: loss {first:.4} -> {last:.4}, probe {a:.3}"));
        acc.push(a);
    }
    let gap = (acc[0] - acc[1]).abs();
    Ok((decreasing && gap < 0.03, format!("{}; gap {gap:.3} (need < 0.030)", detail.join("; "))))
}
