use std::fs;
use std::path::{Path, PathBuf};

use bootdistill::analysis::{
    block_features, corloc, mean_attention_distance, svd_spectrum, unsup_localize, BoundingBox,
};
use bootdistill::checkpoint::{
    load_bank, load_encoder, model_checkpoint, restore_state, state_checkpoint, Checkpoint, CheckpointKind, Role,
};
use bootdistill::data::{eval_transform, AugmentConfig, DatasetManifest, Split};
use bootdistill::model::{forward_encoder, patchify, ModelConfig};
use bootdistill::pipeline::{encoder_weights, run_pipeline, Observer, PipelineState, Teacher};
use bootdistill::probe::{evaluate_accuracy, train_probe, ProbeConfig, ProbeMode};
use bootdistill::rng::{self, derive_seed, domain};
use bootdistill::trainer::{StepRecord, TrainContext};
use bootdistill::{Error, Result};
use log::info;
use serde::Serialize;

use crate::config::{RunConfig, TeacherSection};
use crate::{report, Analysis, Common};

/// Environment variable overriding the configured output directory.
pub const OUTPUT_ENV: &str = "BOOTDISTILL_OUTPUT";

/// Load, apply overrides and validate.
fn prepare(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = match (&common.output, std::env::var_os(OUTPUT_ENV)) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) if !dir.is_empty() => PathBuf::from(dir),
        _ => cfg.output_dir.clone(),
    };
    Ok((cfg, out))
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    io(dir, fs::create_dir_all(dir))
}

/// Seed of the default random teacher.
pub fn teacher_seed(base: u64) -> u64 {
    derive_seed(base, &[domain::INIT, u64::MAX])
}

fn build_teacher(cfg: &RunConfig, model: &ModelConfig) -> Result<Teacher> {
    match &cfg.teacher {
        TeacherSection::Random => Teacher::random(model, teacher_seed(cfg.seed)),
        TeacherSection::Seeded { seed } => Teacher::random(model, *seed),
        TeacherSection::Checkpoint { path, role } => {
            let (params, config) = load_encoder(&Checkpoint::load(path)?, *role)?;
            Ok(Teacher::Network {
                params: encoder_weights(&params),
                config,
            })
        }
        TeacherSection::Features { path } => Ok(Teacher::Precomputed(load_bank(&Checkpoint::load(path)?)?)),
    }
}

#[derive(Serialize)]
struct StageEntry {
    stage: usize,
    epochs: usize,
    checkpoint: String,
    final_loss: Option<f64>,
    teacher_hash: String,
    student_hash: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    momentum: &'a str,
    student_reinit: bool,
    stages: &'a [StageEntry],
}

#[derive(Serialize)]
struct MetricRow {
    stage: usize,
    epoch: usize,
    step: usize,
    lr: f64,
    loss: f64,
    momentum: f64,
}

struct RunObserver<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    metrics: csv::Writer<fs::File>,
    metrics_path: PathBuf,
    stages: Vec<StageEntry>,
    last_loss: Option<f64>,
}

impl RunObserver<'_> {
    fn write_manifest(&self) -> Result<()> {
        let m = Manifest {
            seed: self.cfg.seed,
            momentum: &self.cfg.momentum,
            student_reinit: self.cfg.student_reinit,
            stages: &self.stages,
        };
        let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
        let path = self.out.join("manifest.toml");
        io(&path, fs::write(&path, text))
    }
}

impl Observer for RunObserver<'_> {
    fn on_step(&mut self, _state: &PipelineState, r: &StepRecord) -> Result<()> {
        self.metrics
            .serialize(MetricRow {
                stage: r.stage,
                epoch: r.epoch,
                step: r.step,
                lr: r.lr,
                loss: r.loss,
                momentum: r.momentum,
            })
            .map_err(|e| csv_err(&self.metrics_path, e))
    }

    fn on_epoch(&mut self, state: &PipelineState, mean_loss: f64) -> Result<()> {
        info!("stage {} epoch {} loss {mean_loss:.5}", state.stage_index + 1, state.epoch_in_stage);
        self.last_loss = Some(mean_loss);
        let every = self.cfg.checkpoint_every;
        if every > 0 && state.epoch_in_stage % every == 0 && !state.stage_complete() {
            state_checkpoint(state).save(&self.out.join("latest.ckpt"), self.cfg.checkpoint_dtype)?;
        }
        Ok(())
    }

    fn on_stage_end(&mut self, state: &PipelineState) -> Result<()> {
        self.metrics.flush().map_err(|e| csv_err(&self.metrics_path, e.into()))?;
        let name = format!("stage_{}.ckpt", state.stage_index + 1);
        state_checkpoint(state).save(&self.out.join(&name), self.cfg.checkpoint_dtype)?;
        info!("wrote {}", self.out.join(&name).display());
        let entry = StageEntry {
            stage: state.stage_index + 1,
            epochs: state.current_stage_epochs()?,
            checkpoint: name,
            final_loss: self.last_loss.take(),
            teacher_hash: state.teacher.content_hash(),
            student_hash: state.student.content_hash(),
        };
        self.stages.retain(|s| s.stage != entry.stage);
        self.stages.push(entry);
        self.write_manifest()
    }
}

/// Keep the metric rows logged before the resume point.
fn surviving_metrics(path: &Path, state: &PipelineState) -> Result<Vec<MetricRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    #[derive(serde::Deserialize)]
    struct Row {
        stage: usize,
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        momentum: f64,
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut kept = Vec::new();
    for row in reader.deserialize::<Row>() {
        let r = row.map_err(|e| csv_err(path, e))?;
        if (r.stage, r.epoch) < (state.stage_index, state.epoch_in_stage) {
            kept.push(MetricRow {
                stage: r.stage,
                epoch: r.epoch,
                step: r.step,
                lr: r.lr,
                loss: r.loss,
                momentum: r.momentum,
            });
        }
    }
    Ok(kept)
}

fn check_resume(state: &PipelineState, cfg: &RunConfig, model: &ModelConfig) -> Result<()> {
    if state.student_config != *model {
        return Err(Error::Config("checkpoint model differs from the configured model".into()));
    }
    if state.epochs_per_stage != cfg.stage_epochs()? || state.base_seed != cfg.seed {
        return Err(Error::Config("checkpoint stage plan or seed differs from the configuration".into()));
    }
    if state.student_init != cfg.student_init() {
        return Err(Error::Config("checkpoint student_reinit differs from the configuration".into()));
    }
    Ok(())
}

pub fn pretrain(common: &Common, stage: Option<usize>, checkpoint: Option<&Path>) -> Result<()> {
    let (cfg, out) = prepare(common)?;
    let model = cfg.model();
    let train = cfg.load_split(Split::Train)?;
    let resume_from = match (checkpoint, stage) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(k)) => Some(out.join(format!("stage_{k}.ckpt"))),
        (None, None) => None,
    };
    let mut state = match &resume_from {
        Some(path) => {
            let state = restore_state(&Checkpoint::load(path)?)?;
            check_resume(&state, &cfg, &model)?;
            if let Some(k) = stage {
                // `stage_k.ckpt` holds the end of stage index k − 1.
                if state.stage_index + 1 != k {
                    return Err(Error::State(format!(
                        "--stage {k} but the checkpoint is from stage {}",
                        state.stage_index + 1
                    )));
                }
            }
            state
        }
        None => PipelineState::new(
            model.clone(),
            build_teacher(&cfg, &model)?,
            cfg.stage_epochs()?,
            cfg.student_init(),
            cfg.seed,
        )?,
    };
    let distill = cfg.distill();
    let momentum = cfg.momentum_policy()?;
    let ctx = TrainContext {
        data: &train,
        augment: &cfg.augment,
        optim: &cfg.optim,
        distill: &distill,
        momentum,
    };
    bootdistill::pipeline::check_setup(&state, &ctx)?;
    if common.validate_only {
        println!("configuration ok");
        return Ok(());
    }

    create_dir(&out)?;
    let metrics_path = out.join("metrics.csv");
    let kept = if resume_from.is_some() {
        surviving_metrics(&metrics_path, &state)?
    } else {
        Vec::new()
    };
    let file = io(&metrics_path, fs::File::create(&metrics_path))?;
    let mut metrics = csv::Writer::from_writer(file);
    for row in kept {
        metrics.serialize(row).map_err(|e| csv_err(&metrics_path, e))?;
    }
    let mut observer = RunObserver {
        cfg: &cfg,
        out: &out,
        metrics,
        metrics_path,
        stages: Vec::new(),
        last_loss: None,
    };
    if resume_from.is_some() {
        observer.stages = read_stage_entries(&out)?;
    }
    let losses = run_pipeline(&mut state, &ctx, &mut observer)?;
    observer.metrics.flush().map_err(|e| csv_err(&out, e.into()))?;
    for (k, l) in losses.iter().enumerate() {
        if let (Some(a), Some(b)) = (l.first(), l.last()) {
            info!("trained stage segment {}: loss {a:.5} -> {b:.5}", k + 1);
        }
    }
    Ok(())
}

fn read_stage_entries(out: &Path) -> Result<Vec<StageEntry>> {
    #[derive(serde::Deserialize)]
    struct Entry {
        stage: usize,
        epochs: usize,
        checkpoint: String,
        final_loss: Option<f64>,
        teacher_hash: String,
        student_hash: String,
    }
    #[derive(serde::Deserialize)]
    struct File {
        #[serde(default)]
        stages: Vec<Entry>,
    }
    let path = out.join("manifest.toml");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = io(&path, fs::read_to_string(&path))?;
    let f: File = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(f
        .stages
        .into_iter()
        .map(|e| StageEntry {
            stage: e.stage,
            epochs: e.epochs,
            checkpoint: e.checkpoint,
            final_loss: e.final_loss,
            teacher_hash: e.teacher_hash,
            student_hash: e.student_hash,
        })
        .collect())
}

fn probe_config(cfg: &RunConfig, mode: ProbeMode) -> ProbeConfig {
    if mode == cfg.probe.mode {
        cfg.probe.clone()
    } else {
        match mode {
            ProbeMode::Finetune => ProbeConfig::finetune(),
            ProbeMode::LinearProbe => ProbeConfig::default(),
        }
    }
}

fn require_labels(m: &DatasetManifest, split: &str) -> Result<()> {
    if !m.is_labeled() {
        return Err(Error::Data(format!("the {split} split has unlabeled images; evaluation needs labels")));
    }
    Ok(())
}

pub fn evaluate(common: &Common, checkpoint: &Path, mode: ProbeMode, role: Role) -> Result<()> {
    let (cfg, out) = prepare(common)?;
    let probe = probe_config(&cfg, mode);
    probe.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (params, model) = load_encoder(&ckpt, role)?;
    let train = cfg.load_split(Split::Train)?;
    let val = cfg.load_split(Split::Val)?;
    require_labels(&train, "training")?;
    require_labels(&val, "validation")?;
    if common.validate_only {
        println!("configuration ok");
        return Ok(());
    }
    let fit = train_probe(&params, &model, &train, &probe, cfg.seed)?;
    let acc = evaluate_accuracy(&fit.head, &fit.encoder, &model, &val, &probe.normalize)?;
    println!("{mode} accuracy: train {:.4} val {acc:.4}", fit.train_accuracy);

    create_dir(&out)?;
    let path = out.join("summary.csv");
    let fresh = !path.exists();
    let file = io(&path, fs::OpenOptions::new().create(true).append(true).open(&path))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    #[derive(Serialize)]
    struct Row<'a> {
        checkpoint: &'a str,
        role: &'a str,
        mode: String,
        train_accuracy: f64,
        val_accuracy: f64,
    }
    let name = checkpoint.display().to_string();
    w.serialize(Row {
        checkpoint: &name,
        role: match role {
            Role::Student => "student",
            Role::Teacher => "teacher",
        },
        mode: mode.to_string(),
        train_accuracy: fit.train_accuracy,
        val_accuracy: acc,
    })
    .map_err(|e| csv_err(&path, e))?;
    w.flush().map_err(|e| csv_err(&path, e.into()))
}

pub fn analyze(
    common: &Common,
    checkpoint: &Path,
    which: Analysis,
    role: Role,
    images: usize,
    max_k: usize,
    plot: bool,
) -> Result<()> {
    let (cfg, out) = prepare(common)?;
    let (params, model) = load_encoder(&Checkpoint::load(checkpoint)?, role)?;
    let data = cfg.load_split(Split::Val)?.take(images);
    if data.is_empty() {
        return Err(Error::Data("no images to analyze".into()));
    }
    if which == Analysis::Svd && (max_k == 0 || max_k > model.n_patches().min(model.embed_dim)) {
        return Err(Error::Config(format!("max_k {max_k} outside 1..={}", model.n_patches().min(model.embed_dim))));
    }
    if common.validate_only {
        println!("configuration ok");
        return Ok(());
    }
    let aug = AugmentConfig::identity(model.image_size, cfg.probe.normalize.clone());
    let inputs: Vec<_> = data.records.iter().map(|r| eval_transform(r.image.view(), &aug)).collect();
    let dir = out.join("analysis");
    create_dir(&dir)?;
    let grid = model.grid();
    match which {
        Analysis::AttnDist => {
            let mut rng = rng::stream(cfg.seed, &[]);
            let records = inputs
                .iter()
                .map(|im| {
                    let t = patchify(im.view(), model.patch_size)?;
                    Ok(forward_encoder(&params, &model, &t, true, false, &mut rng)?.1.expect("recorded"))
                })
                .collect::<Result<Vec<_>>>()?;
            let rep = mean_attention_distance(&records, grid, model.patch_size)?;
            let rows: Vec<Vec<String>> = rep
                .distances
                .iter()
                .enumerate()
                .flat_map(|(l, heads)| {
                    heads
                        .iter()
                        .enumerate()
                        .map(move |(h, d)| vec![(l + 1).to_string(), h.to_string(), d.to_string()])
                })
                .collect();
            write_csv(&dir.join("attn_dist.csv"), &["layer", "head", "distance"], &rows)?;
            if plot {
                let svg = report::attention_plot(&rep.distances);
                io(&dir.join("attn_dist.svg"), fs::write(dir.join("attn_dist.svg"), svg))?;
            }
        }
        Analysis::Svd => {
            let views: Vec<_> = inputs.iter().map(|i| i.view()).collect();
            let rep = svd_spectrum(&block_features(&params, &model, &views)?, max_k)?;
            let rows: Vec<Vec<String>> = rep
                .percentages
                .iter()
                .enumerate()
                .flat_map(|(l, ks)| {
                    ks.iter()
                        .enumerate()
                        .map(move |(k, p)| vec![(l + 1).to_string(), (k + 1).to_string(), p.to_string()])
                })
                .collect();
            write_csv(&dir.join("svd.csv"), &["layer", "k", "percentage"], &rows)?;
            if plot {
                let svg = report::spectrum_plot(&rep.percentages);
                io(&dir.join("svd.svg"), fs::write(dir.join("svd.svg"), svg))?;
            }
        }
        Analysis::Localize => {
            let views: Vec<_> = inputs.iter().map(|i| i.view()).collect();
            let feats = block_features(&params, &model, &views)?;
            let mut rows = Vec::new();
            let mut predicted = Vec::new();
            let mut truth = Vec::new();
            for (i, (f, rec)) in feats.iter().zip(&data.records).enumerate() {
                let b = unsup_localize(f.last().expect("depth ≥ 1").view(), grid, model.patch_size)?;
                let mut row = vec![i.to_string(), b.x_min.to_string(), b.y_min.to_string(), b.x_max.to_string(), b.y_max.to_string()];
                match rec.bbox {
                    Some([x0, y0, x1, y1]) => {
                        let (h, w, _) = rec.image.dim();
                        // Boxes are stored in source pixels.
                        let sx = model.image_size as f64 / w as f64;
                        let sy = model.image_size as f64 / h as f64;
                        let gt = BoundingBox::new(x0 * sx, y0 * sy, x1 * sx, y1 * sy)?;
                        row.push(b.iou(&gt).to_string());
                        predicted.push(b);
                        truth.push(vec![gt]);
                    }
                    None => row.push(String::new()),
                }
                rows.push(row);
            }
            write_csv(&dir.join("localize.csv"), &["image", "x_min", "y_min", "x_max", "y_max", "iou"], &rows)?;
            if predicted.len() == data.len() {
                println!("CorLoc: {:.4}", corloc(&predicted, &truth)?);
            } else {
                println!("no ground-truth boxes; CorLoc not computed");
            }
        }
    }
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| csv_err(path, e.into()))?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn import_teacher(common: &Common, input: &Path, role: Role) -> Result<()> {
    let (cfg, out) = prepare(common)?;
    let model = cfg.model();
    let ckpt = Checkpoint::load(input)?;
    let width = model.projection_dim;
    let imported = match ckpt.meta.kind {
        CheckpointKind::FeatureBank => {
            let bank = load_bank(&ckpt)?;
            if bank.dim() != width {
                return Err(Error::Dimension {
                    expected: width,
                    actual: bank.dim(),
                    context: "feature bank width vs projection_dim".into(),
                });
            }
            let train = cfg.load_split(Split::Train)?;
            bank.check(&model, train.len())?;
            ckpt
        }
        _ => {
            let (params, config) = load_encoder(&ckpt, role)?;
            let got = cfg.distill.target.width(&config);
            if got != width {
                return Err(Error::Dimension {
                    expected: width,
                    actual: got,
                    context: format!("teacher target `{}` width vs projection_dim", cfg.distill.target),
                });
            }
            model_checkpoint(&encoder_weights(&params), &config)
        }
    };
    if common.validate_only {
        println!("teacher ok");
        return Ok(());
    }
    create_dir(&out)?;
    let path = out.join("teacher.ckpt");
    imported.save(&path, cfg.checkpoint_dtype)?;
    println!("imported teacher written to {}", path.display());
    Ok(())
}
