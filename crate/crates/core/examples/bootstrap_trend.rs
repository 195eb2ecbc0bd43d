//! Linear-probe accuracy of a random encoder and of the students of two
//! bootstrapped stages, on the synthetic glyphs corpus.
//!
//! Usage: bootstrap_trend [train_images] [epochs_per_stage] [base_lr]

use std::time::Instant;

use bootdistill::data::{synthetic_dataset, AugmentConfig, DatasetManifest, Split, SyntheticSpec};
use bootdistill::model::ModelConfig;
use bootdistill::objective::DistillConfig;
use bootdistill::params::ParameterStore;
use bootdistill::pipeline::{run_pipeline, MomentumPolicy, Observer, PipelineState, StudentInit, Teacher};
use bootdistill::probe::{evaluate_accuracy, train_probe, ProbeConfig};
use bootdistill::trainer::{OptimConfig, TrainContext};

struct Probe<'a> {
    train: &'a DatasetManifest,
    val: &'a DatasetManifest,
    start: Instant,
}

impl Probe<'_> {
    fn report(&self, label: &str, params: &ParameterStore, cfg: &ModelConfig) -> bootdistill::Result<()> {
        let probe = ProbeConfig::default();
        let fit = train_probe(params, cfg, self.train, &probe, 0)?;
        let acc = evaluate_accuracy(&fit.head, &fit.encoder, cfg, self.val, &probe.normalize)?;
        println!(
            "{label}: train {:.3} val {acc:.3} ({:.0}s)",
            fit.train_accuracy,
            self.start.elapsed().as_secs_f64()
        );
        Ok(())
    }
}

impl Observer for Probe<'_> {
    fn on_epoch(&mut self, state: &PipelineState, loss: f64) -> bootdistill::Result<()> {
        println!("  stage {} epoch {} loss {loss:.5}", state.stage_index + 1, state.epoch_in_stage);
        Ok(())
    }

    fn on_stage_end(&mut self, state: &PipelineState) -> bootdistill::Result<()> {
        if state.stage_index == 0 {
            self.report("stage 0", state.teacher.params().unwrap(), &state.student_config)?;
        }
        self.report(&format!("stage {}", state.stage_index + 1), &state.student, &state.student_config)
    }
}

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> bootdistill::Result<()> {
    let n = arg(1, 5000usize);
    let epochs = arg(2, 10usize);
    let base_lr = arg(3, 1.5e-3f64);
    let spec = |n_images| SyntheticSpec { n_images, classes: 10, seed: 0, image_size: 32 };
    let train = synthetic_dataset(&spec(n), Split::Train)?;
    let val = synthetic_dataset(&spec(1000), Split::Val)?;
    let cfg = ModelConfig::desk();
    let augment = AugmentConfig { crop_scale: (0.5, 1.0), ..Default::default() };
    let optim = OptimConfig { base_lr, warmup_epochs: 1, ..Default::default() };
    let mut distill = DistillConfig::default();
    if let Ok(t) = std::env::var("TARGET") {
        distill.target = t.parse()?;
    }
    if let Ok(m) = std::env::var("MASK") {
        distill.mask_ratio = m.parse().unwrap();
    }
    let mut cfg = cfg;
    cfg.projection_dim = distill.target.width(&cfg);
    let mut state =
        PipelineState::new(cfg.clone(), Teacher::random(&cfg, 1)?, vec![epochs, epochs], StudentInit::Reinit, 0)?;
    let ctx = TrainContext { data: &train, augment: &augment, optim: &optim, distill: &distill, momentum: MomentumPolicy::Vanilla };
    let mut probe = Probe { train: &train, val: &val, start: Instant::now() };
    run_pipeline(&mut state, &ctx, &mut probe)?;
    Ok(())
}
