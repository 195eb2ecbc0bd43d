//! The run configuration file.

use std::path::{Path, PathBuf};

use bootdistill::checkpoint::{Dtype, Role};
use bootdistill::data::{AugmentConfig, DatasetManifest, DatasetSource, Split, SyntheticSpec};
use bootdistill::model::{ModelConfig, TargetKind};
use bootdistill::objective::{DistillConfig, LossKind, LossPositions};
use bootdistill::pipeline::{MomentumPolicy, StudentInit};
use bootdistill::probe::ProbeConfig;
use bootdistill::trainer::OptimConfig;
use bootdistill::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything one run needs. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Number of stages; `epochs_per_stage` may give one value for all.
    pub stages: usize,
    pub epochs_per_stage: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: String,
    #[serde(default = "default_true")]
    pub student_reinit: bool,
    #[serde(default)]
    pub target_ln: bool,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub checkpoint_dtype: Dtype,
    /// Also write `latest.ckpt` every this many epochs (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub data: DataSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_momentum() -> String {
    "vanilla".into()
}

fn default_true() -> bool {
    true
}

fn default_mask_ratio() -> f64 {
    0.75
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub loss: LossKind,
    pub smooth_l1_beta: f64,
    pub loss_positions: LossPositions,
    pub target: TargetKind,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            loss: d.loss,
            smooth_l1_beta: d.smooth_l1_beta,
            loss_positions: d.loss_positions,
            target: d.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum DataSection {
    Synthetic {
        n_images: usize,
        classes: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_image_size")]
        image_size: usize,
        #[serde(default = "default_val_images")]
        val_images: usize,
    },
    Directory {
        train: PathBuf,
        #[serde(default)]
        val: Option<PathBuf>,
    },
}

fn default_val_images() -> usize {
    1000
}

fn default_image_size() -> usize {
    32
}

impl DataSection {
    /// The synthetic spec for one split, if this section is synthetic.
    pub fn synthetic(&self, split: Split) -> Option<SyntheticSpec> {
        match *self {
            DataSection::Synthetic { n_images, classes, seed, image_size, val_images } => Some(SyntheticSpec {
                n_images: if split == Split::Train { n_images } else { val_images },
                classes,
                seed,
                image_size,
            }),
            DataSection::Directory { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum TeacherSection {
    /// A random encoder shaped like the student.
    #[default]
    Random,
    /// Random with its own seed instead of the run seed.
    Seeded { seed: u64 },
    /// Encoder weights from a checkpoint.
    Checkpoint {
        path: PathBuf,
        #[serde(default)]
        role: Role,
    },
    /// A precomputed feature bank.
    Features { path: PathBuf },
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Read and parse a config file; relative paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        match &mut cfg.data {
            DataSection::Directory { train, val } => {
                resolve(train);
                if let Some(v) = val {
                    resolve(v);
                }
            }
            DataSection::Synthetic { .. } => {}
        }
        match &mut cfg.teacher {
            TeacherSection::Checkpoint { path, .. } | TeacherSection::Features { path } => resolve(path),
            _ => {}
        }
        Ok(cfg)
    }

    pub fn momentum_policy(&self) -> Result<MomentumPolicy> {
        self.momentum.parse()
    }

    pub fn student_init(&self) -> StudentInit {
        if self.student_reinit {
            StudentInit::Reinit
        } else {
            StudentInit::Keep
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            loss: self.distill.loss,
            smooth_l1_beta: self.distill.smooth_l1_beta,
            loss_positions: self.distill.loss_positions,
            target: self.distill.target,
            target_ln: self.target_ln,
            mask_ratio: self.mask_ratio,
        }
    }

    /// The student config with decoder and projection defaults filled in; a
    /// zero projection width follows the target.
    pub fn model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if m.projection_dim == 0 {
            m.projection_dim = self.distill.target.width(&m);
        }
        m.with_defaults()
    }

    pub fn stage_epochs(&self) -> Result<Vec<usize>> {
        match self.epochs_per_stage.as_slice() {
            [e] if self.stages >= 1 => Ok(vec![*e; self.stages]),
            list if list.len() == self.stages => Ok(list.to_vec()),
            list => Err(Error::Config(format!(
                "stages = {} but epochs_per_stage lists {} values",
                self.stages,
                list.len()
            ))),
        }
    }

    /// Check every section; touches no files.
    pub fn validate(&self) -> Result<()> {
        let epochs = self.stage_epochs()?;
        if self.stages == 0 || epochs.contains(&0) {
            return Err(Error::Config("need at least one stage, each with at least one epoch".into()));
        }
        self.momentum_policy()?;
        let model = self.model();
        model.validate()?;
        self.distill().validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        self.probe.validate()?;
        if self.augment.output_size != model.image_size {
            return Err(Error::Config(format!(
                "augment.output_size {} differs from model.image_size {}",
                self.augment.output_size, model.image_size
            )));
        }
        if let DataSection::Synthetic { n_images, classes, image_size, .. } = self.data {
            if n_images == 0 || classes == 0 {
                return Err(Error::Config("synthetic data needs images and classes".into()));
            }
            if image_size != model.image_size {
                return Err(Error::Config(format!(
                    "synthetic image_size {image_size} differs from model.image_size {}",
                    model.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> Result<DatasetManifest> {
        let source = match (&self.data, split) {
            (DataSection::Synthetic { .. }, _) => DatasetSource::Synthetic(self.data.synthetic(split).expect("synthetic")),
            (DataSection::Directory { train, .. }, Split::Train) => DatasetSource::Directory(train.clone()),
            (DataSection::Directory { val: Some(v), .. }, Split::Val) => DatasetSource::Directory(v.clone()),
            (DataSection::Directory { val: None, .. }, Split::Val) => {
                return Err(Error::Data("no validation directory configured".into()))
            }
        };
        bootdistill::data::load_dataset(&source, split)
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    /// The example config of the command-line chapter.
    fn example() -> String {
        let book = include_str!("../../../book/src/cli.md");
        let start = book.find("```toml\n").expect("toml block") + 8;
        let len = book[start..].find("```").expect("closed block");
        book[start..start + len].to_string()
    }

    #[test]
    fn example_parses_and_validates() {
        let cfg = RunConfig::from_toml(&example()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_epochs().unwrap(), vec![10, 10]);
        assert_eq!(cfg.model().projection_dim, 96);
        assert_eq!(cfg.momentum_policy().unwrap(), MomentumPolicy::Vanilla);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = example().replace("mask_ratio = 0.75", "mask_ratio = 0.75\nmask_ration = 0.5");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let text = example().replace("depth = 4", "depth = 4\nwidth = 3");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn bad_momentum_fails_validation() {
        let text = example().replace("\"vanilla\"", "\"constant:1.5\"");
        assert!(RunConfig::from_toml(&text).unwrap().validate().is_err());
    }

    #[test]
    fn one_epoch_value_covers_all_stages() {
        let text = example().replace("stages = 2", "stages = 3").replace("[10, 10]", "[4]");
        assert_eq!(RunConfig::from_toml(&text).unwrap().stage_epochs().unwrap(), vec![4, 4, 4]);
        let text = example().replace("[10, 10]", "[4, 4, 4]");
        assert!(RunConfig::from_toml(&text).unwrap().validate().is_err());
    }

    #[test]
    fn pixel_target_sets_projection_width() {
        let text = example().replace("target = \"last\"", "target = \"pixel\"");
        assert_eq!(RunConfig::from_toml(&text).unwrap().model().projection_dim, 192);
    }
}
