use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bootdistill::checkpoint::{bank_checkpoint, load_encoder, model_checkpoint, Checkpoint, Role};
use bootdistill::model::{init_model, ModelConfig};
use bootdistill::pipeline::{encoder_weights, FeatureBank};
use ndarray::Array3;

const TOY: &str = r#"seed = 3
output_dir = "out"
stages = 2
epochs_per_stage = [1]

[model]
image_size = 16
patch_size = 8
embed_dim = 8
depth = 1
num_heads = 2
decoder_dim = 8
decoder_depth = 1

[optim]
batch_size = 4
warmup_epochs = 0

[augment]
output_size = 16

[data]
kind = "synthetic"
n_images = 8
classes = 2
image_size = 16
val_images = 4

[probe]
epochs = 2
batch_size = 4
warmup_epochs = 0
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bootdistill"));
    c.env_remove("BOOTDISTILL_OUTPUT").env("RUST_LOG", "warn");
    c
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn run(args: &[&str], cfg: &Path) -> Output {
    bin().args(args).arg("--config").arg(cfg).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pretrain_writes_checkpoints_manifest_and_metrics() {
    let (dir, cfg) = setup(TOY);
    ok(&run(&["pretrain"], &cfg));
    let out = dir.path().join("out");
    assert!(out.join("stage_1.ckpt").exists());
    assert!(out.join("stage_2.ckpt").exists());
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert_eq!(manifest.matches("[[stages]]").count(), 2);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("stage,epoch,step,lr,loss,momentum"));
    // 8 images, batch 4: two steps per stage.
    assert_eq!(metrics.lines().count(), 1 + 4);
}

#[test]
fn reruns_with_the_same_seed_give_identical_metrics() {
    let (dir, cfg) = setup(TOY);
    let path = |d: &str| dir.path().join(d).to_str().unwrap().to_string();
    ok(&run(&["pretrain", "--output", &path("a")], &cfg));
    ok(&run(&["pretrain", "--output", &path("b")], &cfg));
    ok(&run(&["pretrain", "--output", &path("c"), "--seed", "4"], &cfg));
    let read = |d: &str| fs::read_to_string(dir.path().join(d).join("metrics.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn invalid_momentum_fails_without_writing() {
    let (dir, cfg) = setup(&TOY.replace("epochs_per_stage = [1]", "epochs_per_stage = [1]\nmomentum = \"constant:2\""));
    let out = run(&["pretrain"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_keys_are_config_errors() {
    let (dir, cfg) = setup(&TOY.replace("stages = 2", "stages = 2\nstagez = 3"));
    let out = run(&["pretrain"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn validate_only_has_no_side_effects() {
    let (dir, cfg) = setup(TOY);
    ok(&run(&["pretrain", "--validate-only"], &cfg));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn output_env_var_sits_between_flag_and_config() {
    let (dir, cfg) = setup(TOY);
    let env_out = dir.path().join("from_env");
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .env("BOOTDISTILL_OUTPUT", &env_out)
        .output()
        .unwrap();
    ok(&out);
    assert!(env_out.join("stage_2.ckpt").exists());
    assert!(!dir.path().join("out").exists());
    let flag_out = dir.path().join("from_flag");
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(&flag_out)
        .env("BOOTDISTILL_OUTPUT", &env_out)
        .output()
        .unwrap();
    ok(&out);
    assert!(flag_out.join("stage_2.ckpt").exists());
}

#[test]
fn resuming_from_stage_one_reproduces_stage_two() {
    let (dir, cfg) = setup(TOY);
    ok(&run(&["pretrain"], &cfg));
    let out = dir.path().join("out");
    let full = fs::read(out.join("stage_2.ckpt")).unwrap();
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    fs::remove_file(out.join("stage_2.ckpt")).unwrap();
    ok(&run(&["pretrain", "--stage", "1"], &cfg));
    assert_eq!(fs::read(out.join("stage_2.ckpt")).unwrap(), full);
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap(), metrics);
    // The stage flag must agree with the checkpoint.
    let bad = bin()
        .args(["pretrain", "--stage", "2", "--checkpoint"])
        .arg(out.join("stage_1.ckpt"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn evaluate_appends_rows_and_rejects_bad_input() {
    let (dir, cfg) = setup(TOY);
    ok(&run(&["pretrain"], &cfg));
    let out = dir.path().join("out");
    let ck = out.join("stage_2.ckpt");
    let ck = ck.to_str().unwrap();
    ok(&run(&["evaluate", "--checkpoint", out.join("stage_1.ckpt").to_str().unwrap(), "--role", "teacher"], &cfg));
    ok(&run(&["evaluate", "--checkpoint", ck], &cfg));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");
    assert!(summary.lines().nth(1).unwrap().contains(",teacher,linear_probe,"));

    let usage = run(&["evaluate", "--checkpoint", ck, "--mode", "knn"], &cfg);
    assert_eq!(usage.status.code(), Some(2));

    let unlabeled = dir.path().join("unlabeled");
    fs::create_dir_all(&unlabeled).unwrap();
    for i in 0..4 {
        bootdistill::data::write_png(&unlabeled.join(format!("{i}.png")), ndarray::Array3::from_elem((16, 16, 3), 0.5).view())
            .unwrap();
    }
    let text = TOY.replace(
        "kind = \"synthetic\"\nn_images = 8\nclasses = 2\nimage_size = 16\nval_images = 4",
        "kind = \"directory\"\ntrain = \"unlabeled\"\nval = \"unlabeled\"",
    );
    fs::write(&cfg, text).unwrap();
    let missing = run(&["evaluate", "--checkpoint", ck], &cfg);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("label"));
}

#[test]
fn analyze_writes_reports() {
    let (dir, cfg) = setup(TOY);
    ok(&run(&["pretrain"], &cfg));
    let out = dir.path().join("out");
    let ck = out.join("stage_2.ckpt");
    let ck = ck.to_str().unwrap();

    ok(&run(&["analyze", "--checkpoint", ck, "--which", "attn-dist", "--plot", "--images", "3"], &cfg));
    let attn = fs::read_to_string(out.join("analysis/attn_dist.csv")).unwrap();
    // depth 1 × 2 heads.
    assert_eq!(attn.lines().count(), 1 + 2);
    assert!(out.join("analysis/attn_dist.svg").exists());

    ok(&run(&["analyze", "--checkpoint", ck, "--which", "svd", "--max-k", "4"], &cfg));
    let svd = fs::read_to_string(out.join("analysis/svd.csv")).unwrap();
    let p: Vec<f64> = svd.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(p.len(), 4);
    assert!(p.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    assert!((p[3] - 1.0).abs() < 1e-9);

    let loc = run(&["analyze", "--checkpoint", ck, "--which", "localize"], &cfg);
    ok(&loc);
    assert!(String::from_utf8_lossy(&loc.stdout).contains("CorLoc"));

    let missing = run(&["analyze", "--checkpoint", "nope.ckpt", "--which", "svd"], &cfg);
    assert_eq!(missing.status.code(), Some(3));
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        decoder_dim: 8,
        decoder_depth: 1,
        ..ModelConfig::new(16, 8, 8, 1, 2)
    }
}

#[test]
fn imported_checkpoint_round_trips_and_drives_a_run() {
    let (dir, cfg) = setup(TOY);
    ok(&run(&["pretrain"], &cfg));
    let out = dir.path().join("out");
    ok(&run(&["import-teacher", "--input", out.join("stage_2.ckpt").to_str().unwrap()], &cfg));
    let (orig, _) = load_encoder(&Checkpoint::load(&out.join("stage_2.ckpt")).unwrap(), Role::Student).unwrap();
    let (imported, _) = load_encoder(&Checkpoint::load(&out.join("teacher.ckpt")).unwrap(), Role::Student).unwrap();
    assert_eq!(imported.content_hash(), encoder_weights(&orig).content_hash());

    let text = TOY.replace("[data]", "[teacher]\nkind = \"checkpoint\"\npath = \"out/teacher.ckpt\"\n\n[data]")
        .replace("output_dir = \"out\"", "output_dir = \"second\"")
        .replace("stages = 2", "stages = 1")
        .replace("epochs_per_stage = [1]", "epochs_per_stage = [1]\nmomentum = \"constant:1\"");
    fs::write(&cfg, text).unwrap();
    ok(&run(&["pretrain"], &cfg));
    let manifest = fs::read_to_string(dir.path().join("second/manifest.toml")).unwrap();
    assert!(manifest.contains(&imported.content_hash()));
}

#[test]
fn feature_banks_with_the_wrong_width_name_both_dims() {
    let (dir, cfg) = setup(TOY);
    let bank = FeatureBank {
        features: Array3::zeros((8, 4, 5)),
    };
    let path = dir.path().join("bank.ckpt");
    bank_checkpoint(&bank).save(&path, Default::default()).unwrap();
    let out = run(&["import-teacher", "--input", path.to_str().unwrap()], &cfg);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("expected 8") && err.contains("got 5"), "{err}");

    let good = FeatureBank {
        features: Array3::zeros((8, 4, 8)),
    };
    bank_checkpoint(&good).save(&path, Default::default()).unwrap();
    ok(&run(&["import-teacher", "--input", path.to_str().unwrap()], &cfg));
    assert!(dir.path().join("out/teacher.ckpt").exists());
}

#[test]
fn teacher_checkpoints_with_the_wrong_width_are_rejected() {
    let (dir, cfg) = setup(TOY);
    let wide = ModelConfig {
        embed_dim: 12,
        ..toy_model()
    };
    let path = dir.path().join("wide.ckpt");
    model_checkpoint(&init_model(&wide, 0).unwrap(), &wide).save(&path, Default::default()).unwrap();
    let out = run(&["import-teacher", "--input", path.to_str().unwrap()], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 8, got 12"));
}
