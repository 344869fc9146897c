//! Experiment configuration: one TOML file, validated as a whole before any
//! compute. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use dprune::analysis::HessianEstimator;
use dprune::data::{load_idx, make_blobs, LabeledDataset, Role};
use dprune::distill::{DistillConfig, InitMode, MAX_UNROLL};
use dprune::model::{Arch, Layer};
use dprune::prune::PruneScope;
use dprune::train::{EarlyStop, TrainRecipe};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub arch: ArchConfig,
    pub seeds: SeedConfig,
    /// Recipe for every training run on real data.
    pub train: RecipeConfig,
    /// Recipe for training on the distilled set.
    pub syn_train: RecipeConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    /// `per_class` training examples, `per_class / 5` validation examples and
    /// `test_per_class` test examples per class, all from one draw.
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        seed: u64,
        test_per_class: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArchConfig {
    Mlp { hidden: Vec<usize> },
    Convnet3 { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub init: u64,
    /// Data-order seeds of the two interpolation branches. The first also
    /// orders every other real-data run.
    pub order: [u64; 2],
    pub distill: u64,
}

impl SeedConfig {
    /// Teacher `i` is initialized from `distill + 1 + i`.
    pub fn teachers(&self, count: usize) -> Vec<u64> {
        (1..=count as u64).map(|i| self.distill.wrapping_add(i)).collect()
    }

    /// Evaluation student `i` is initialized from `init + 1 + i`.
    pub fn students(&self, count: usize) -> Vec<u64> {
        (1..=count as u64).map(|i| self.init.wrapping_add(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeConfig {
    pub lr: f32,
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub epochs: u32,
    pub batch_size: usize,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl RecipeConfig {
    pub fn recipe(&self, order_seed: u64) -> TrainRecipe {
        TrainRecipe {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            order_seed,
            checkpoint_epochs: vec![],
            early_stop: self.early_stop.clone(),
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(CliError::config(format!("{section}.lr"), "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CliError::config(format!("{section}.momentum"), "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CliError::config(format!("{section}.weight_decay"), "must be >= 0"));
        }
        if self.epochs == 0 {
            return Err(CliError::config(format!("{section}.epochs"), "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(CliError::config(format!("{section}.batch_size"), "must be >= 1"));
        }
        if let Some(es) = &self.early_stop {
            if es.patience == 0 {
                return Err(CliError::config(format!("{section}.early_stop.patience"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Teachers train with the real-data recipe, momentum-free and without early
/// stopping, for `epochs` epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub count: usize,
    pub epochs: u32,
    /// SGD steps between recorded snapshots.
    pub snapshot_interval: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub ipc: usize,
    pub outer_steps: usize,
    pub inner_unroll: usize,
    pub syn_lr: f32,
    #[serde(default = "default_syn_momentum")]
    pub syn_momentum: f32,
    pub match_horizon: usize,
    #[serde(default)]
    pub init_mode: InitMode,
    /// Students trained to score the distillate.
    #[serde(default = "default_students")]
    pub students: usize,
}

fn default_syn_momentum() -> f32 {
    0.5
}

fn default_students() -> usize {
    5
}

impl DistillSection {
    pub fn config(&self, seed: u64) -> DistillConfig {
        DistillConfig {
            ipc: self.ipc,
            outer_steps: self.outer_steps,
            inner_unroll: self.inner_unroll,
            syn_lr: self.syn_lr,
            syn_momentum: self.syn_momentum,
            match_horizon: self.match_horizon,
            init_mode: self.init_mode,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub method: PruneMethodArg,
    pub fraction: f64,
    pub iterations: usize,
    pub rewind_epoch: u32,
    pub scope: PruneScope,
    /// Distilled iterations before IMP takes over (combined method only).
    pub syn_iters: usize,
    /// Distill run directory or synthetic dataset container.
    pub synthetic: Option<PathBuf>,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            method: PruneMethodArg::Imp,
            fraction: 0.2,
            iterations: 8,
            rewind_epoch: 0,
            scope: PruneScope::Global,
            syn_iters: 8,
            synthetic: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethodArg {
    Imp,
    Distilled,
    Combined,
}

impl PruneMethodArg {
    pub fn needs_synthetic(self) -> bool {
        !matches!(self, PruneMethodArg::Imp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub alpha_steps: usize,
    pub grid_n: usize,
    pub margin: f64,
    pub landscape_seed: u64,
    pub estimator: HessianEstimator,
    pub probes: usize,
    pub hessian_seed: u64,
    /// Batch size for the full-data gradient behind each Hessian-vector product.
    pub batch_size: usize,
    /// Pruning iterations whose masks are analyzed.
    pub checkpoints: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            alpha_steps: dprune::analysis::DEFAULT_ALPHA_STEPS,
            grid_n: 25,
            margin: 0.25,
            landscape_seed: 0,
            estimator: HessianEstimator::Hutchinson,
            probes: 100,
            hessian_seed: 0,
            batch_size: 500,
            checkpoints: vec![4, 9],
        }
    }
}

/// Real data split three ways.
#[derive(Clone, Debug)]
pub struct Task {
    pub train: LabeledDataset,
    pub val: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing(path, format!("cannot read config ({e})")))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.task {
            TaskConfig::Blobs {
                classes,
                per_class,
                dim,
                spread,
                test_per_class,
                ..
            } => {
                for (name, v) in [
                    ("classes", *classes),
                    ("per_class", *per_class),
                    ("dim", *dim),
                    ("test_per_class", *test_per_class),
                ] {
                    if v == 0 {
                        return Err(CliError::config(format!("task.{name}"), "must be >= 1"));
                    }
                }
                if !(*spread >= 0.0) {
                    return Err(CliError::config("task.spread", "must be >= 0"));
                }
            }
            TaskConfig::Idx { .. } => {}
        }
        match &self.arch {
            ArchConfig::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(CliError::config("arch.hidden", "widths must be >= 1"));
                }
            }
            ArchConfig::Convnet3 { width } => {
                if *width == 0 {
                    return Err(CliError::config("arch.width", "must be >= 1"));
                }
            }
        }
        self.train.validate("train")?;
        self.syn_train.validate("syn_train")?;

        let t = &self.teacher;
        if t.count == 0 {
            return Err(CliError::config("teacher.count", "must be >= 1"));
        }
        if t.epochs == 0 {
            return Err(CliError::config("teacher.epochs", "must be >= 1"));
        }
        if t.snapshot_interval == 0 {
            return Err(CliError::config("teacher.snapshot_interval", "must be >= 1"));
        }

        let d = &self.distill;
        if d.ipc == 0 {
            return Err(CliError::config("distill.ipc", "must be >= 1"));
        }
        if d.inner_unroll == 0 || d.inner_unroll > MAX_UNROLL {
            return Err(CliError::config("distill.inner_unroll", format!("must be in 1..={MAX_UNROLL}")));
        }
        if d.match_horizon == 0 {
            return Err(CliError::config("distill.match_horizon", "must be >= 1"));
        }
        if !(d.syn_lr > 0.0) {
            return Err(CliError::config("distill.syn_lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&d.syn_momentum) {
            return Err(CliError::config("distill.syn_momentum", "must be in [0, 1)"));
        }
        if d.students == 0 {
            return Err(CliError::config("distill.students", "must be >= 1"));
        }

        let p = &self.prune;
        if !(p.fraction > 0.0 && p.fraction < 1.0) {
            return Err(CliError::config("prune.fraction", "must be in (0, 1)"));
        }
        if p.rewind_epoch > self.train.epochs {
            return Err(CliError::config(
                "prune.rewind_epoch",
                format!("exceeds the {} epoch budget of train.epochs", self.train.epochs),
            ));
        }
        if p.method.needs_synthetic() && p.rewind_epoch != 0 {
            return Err(CliError::config("prune.rewind_epoch", "distilled and combined pruning rewind to 0"));
        }
        if p.method == PruneMethodArg::Combined && p.syn_iters == 0 {
            return Err(CliError::config("prune.syn_iters", "must be >= 1 for the combined method"));
        }

        let a = &self.analysis;
        if a.alpha_steps < 3 {
            return Err(CliError::config("analysis.alpha_steps", "must be >= 3"));
        }
        if a.grid_n < 2 {
            return Err(CliError::config("analysis.grid_n", "must be >= 2"));
        }
        if !(a.margin >= 0.0) {
            return Err(CliError::config("analysis.margin", "must be >= 0"));
        }
        if a.estimator == HessianEstimator::Hutchinson && a.probes == 0 {
            return Err(CliError::config("analysis.probes", "must be >= 1 for hutchinson"));
        }
        if a.batch_size == 0 {
            return Err(CliError::config("analysis.batch_size", "must be >= 1"));
        }
        Ok(())
    }

    pub fn load_task(&self) -> Result<Task> {
        match &self.task {
            TaskConfig::Blobs {
                classes,
                per_class,
                dim,
                spread,
                seed,
                test_per_class,
            } => {
                let val = per_class / 5;
                let all = make_blobs(*classes, per_class + val + test_per_class, *dim, *spread, *seed)
                    .context(|| "task".into())?;
                let split = |start, count, role| all.take_per_class(start, count, role).context(|| "task split".into());
                Ok(Task {
                    train: split(0, *per_class, Role::RealTrain)?,
                    val: if val > 0 { Some(split(*per_class, val, Role::Validation)?) } else { None },
                    test: split(per_class + val, *test_per_class, Role::Test)?,
                })
            }
            TaskConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let load = |i: &PathBuf, l: &PathBuf| {
                    for p in [i, l] {
                        if !p.exists() {
                            return Err(CliError::missing(p, "IDX file named in task config"));
                        }
                    }
                    load_idx(i, l).context(|| format!("loading {}", i.display()))
                };
                Ok(Task {
                    train: load(train_images, train_labels)?,
                    val: None,
                    test: load(test_images, test_labels)?.with_role(Role::Test),
                })
            }
        }
    }

    /// Builds the architecture for the task's example shape. MLPs on image
    /// data get a leading flatten.
    pub fn build_arch(&self, example_shape: &[usize], classes: usize) -> Result<Arch> {
        let arch = match &self.arch {
            ArchConfig::Mlp { hidden } => {
                let inputs: usize = example_shape.iter().product();
                let mlp = Arch::mlp(inputs, hidden, classes).context(|| "arch".into())?;
                if example_shape.len() == 1 {
                    mlp
                } else {
                    let mut layers = vec![Layer::Flatten];
                    layers.extend(mlp.layers);
                    Arch::new(example_shape.to_vec(), layers).context(|| "arch".into())?
                }
            }
            ArchConfig::Convnet3 { width } => {
                let [c, h, w] = example_shape else {
                    return Err(CliError::config(
                        "arch.kind",
                        format!("convnet3 needs [channels, height, width] examples, task has {example_shape:?}"),
                    ));
                };
                Arch::convnet3([*c, *h, *w], *width, classes).context(|| "arch".into())?
            }
        };
        Ok(arch)
    }

    pub fn real_recipe(&self) -> TrainRecipe {
        self.train.recipe(self.seeds.order[0])
    }

    pub fn syn_recipe(&self) -> TrainRecipe {
        self.syn_train.recipe(self.seeds.order[0])
    }

    pub fn teacher_recipe(&self) -> TrainRecipe {
        TrainRecipe {
            momentum: 0.0,
            epochs: self.teacher.epochs,
            early_stop: None,
            ..self.real_recipe()
        }
    }
}
