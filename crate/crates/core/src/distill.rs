//! Dataset distillation by trajectory matching.
//!
//! Teachers train on real data and leave parameter snapshots behind. Each
//! outer step picks a snapshot `θ_s` and its horizon target `θ_{s+H}`,
//! unrolls a few student SGD steps from `θ_s` on the synthetic set, and
//! scores the landing point by `‖θ_student − θ_{s+H}‖² / ‖θ_s − θ_{s+H}‖²`.
//! The whole unroll is taped, so the gradient reaching the synthetic features
//! is exact.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::model::{build_logits, Arch, ModelState};
use crate::rng::{self, domain};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{evaluate, train, train_observed, TrainRecipe};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    #[default]
    RandomReal,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub ipc: usize,
    pub outer_steps: usize,
    /// Student SGD steps per outer step.
    pub inner_unroll: usize,
    /// Step size on the synthetic features.
    pub syn_lr: f32,
    #[serde(default = "default_syn_momentum")]
    pub syn_momentum: f32,
    /// Teacher snapshots between start and target.
    pub match_horizon: usize,
    #[serde(default)]
    pub init_mode: InitMode,
    pub seed: u64,
}

fn default_syn_momentum() -> f32 {
    0.5
}

pub const MAX_UNROLL: usize = 10;

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ipc == 0 {
            return Err(Error::Config("distill.ipc must be >= 1".into()));
        }
        if self.inner_unroll == 0 || self.inner_unroll > MAX_UNROLL {
            return Err(Error::Config(format!(
                "distill.inner_unroll must be in 1..={MAX_UNROLL}, got {}",
                self.inner_unroll
            )));
        }
        if self.match_horizon == 0 {
            return Err(Error::Config("distill.match_horizon must be >= 1".into()));
        }
        if !(self.syn_lr > 0.0) {
            return Err(Error::Config("distill.syn_lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.syn_momentum) {
            return Err(Error::Config("distill.syn_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    /// Snapshots ordered by step; the first is the initialization.
    pub snapshots: Vec<ModelState>,
    pub steps: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBank {
    pub arch: Arch,
    pub snapshot_interval: u64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBank {
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.trajectories {
            for s in &t.snapshots {
                h.update(s.digest().as_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Trains one teacher per seed on real data, keeping a snapshot every
/// `snapshot_interval` SGD steps plus the initialization and the final state.
pub fn record_teachers(
    real: &LabeledDataset,
    arch: &Arch,
    recipe: &TrainRecipe,
    seeds: &[u64],
    snapshot_interval: u64,
) -> Result<TrajectoryBank> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one teacher seed".into()));
    }
    if snapshot_interval == 0 {
        return Err(Error::Config("snapshot_interval must be >= 1".into()));
    }
    let mask = SparsityMask::dense(arch);
    let mut trajectories = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let init = ModelState::init(arch, seed);
        let mut snapshots = vec![init.clone()];
        let mut steps = vec![0];
        let out = train_observed(&init, &mask, real, &recipe.with_order_seed(seed), |step, s| {
            if step % snapshot_interval == 0 {
                snapshots.push(s.clone());
                steps.push(step);
            }
        })
        .map_err(|e| Error::diverged(format!("teacher seed {seed}"), e))?;
        if steps.last() != Some(&out.steps) {
            snapshots.push(out.state);
            steps.push(out.steps);
        }
        trajectories.push(Trajectory {
            seed,
            snapshots,
            steps,
        });
    }
    Ok(TrajectoryBank {
        arch: arch.clone(),
        snapshot_interval,
        trajectories,
    })
}

/// Loss of a student with flat parameters `params` on `features`.
pub trait StudentLoss {
    fn loss(&self, tape: &mut Tape, params: Var, features: Var) -> Result<Var>;
}

/// Softmax classifier over a fixed label vector.
pub struct Classifier<'a> {
    pub arch: &'a Arch,
    pub labels: &'a [usize],
}

impl StudentLoss for Classifier<'_> {
    fn loss(&self, tape: &mut Tape, params: Var, features: Var) -> Result<Var> {
        let logits = build_logits(tape, self.arch, params, features)?;
        tape.cross_entropy(logits, self.labels)
    }
}

#[derive(Clone, Debug)]
pub struct MatchStep {
    pub loss: f64,
    pub grad: Tensor,
}

/// One trajectory-matching evaluation: normalized distance after `unroll`
/// student steps and its gradient in the features. `None` when the teacher
/// did not move (denominator below 1e-12).
pub fn match_step(
    student: &impl StudentLoss,
    features: &Tensor,
    start: &[f32],
    target: &[f32],
    lr: f32,
    unroll: usize,
) -> Result<Option<MatchStep>> {
    let denom: f64 = start
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    if denom < 1e-12 {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let mut theta = tape.leaf(Tensor::from_vec(start.to_vec()));
    for _ in 0..unroll {
        let loss = student.loss(&mut tape, theta, x)?;
        let g = tape.grad(loss, &[theta])?[0];
        let step = tape.scale(g, lr);
        theta = tape.sub(theta, step)?;
    }
    let tgt = tape.constant(Tensor::from_vec(target.to_vec()));
    let diff = tape.sub(theta, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let dist = tape.sum(sq);
    let loss_var = tape.scale(dist, (1.0 / denom) as f32);
    let grad = tape.grad(loss_var, &[x])?[0];

    let num: f64 = tape
        .value(theta)
        .data()
        .iter()
        .zip(target)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(Some(MatchStep {
        loss: num / denom,
        grad: tape.value(grad).clone(),
    }))
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub dataset: LabeledDataset,
    /// Matching loss per completed outer step.
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// `ipc` examples per class, class-major, from real data or uniform noise.
pub fn initial_synthetic(real: &LabeledDataset, ipc: usize, mode: InitMode, seed: u64) -> Result<LabeledDataset> {
    let mut indices = Vec::with_capacity(ipc * real.class_count);
    let mut labels = Vec::with_capacity(ipc * real.class_count);
    for (c, members) in real.class_indices().iter().enumerate() {
        if members.len() < ipc {
            return Err(Error::Config(format!(
                "class {c} has {} examples, fewer than ipc = {ipc}",
                members.len()
            )));
        }
        let mut rng = rng::keyed(domain::DISTILL_INIT, seed, c as u64);
        let mut picked: Vec<usize> = sample(&mut rng, members.len(), ipc)
            .into_iter()
            .map(|j| members[j])
            .collect();
        picked.sort_unstable();
        indices.extend(picked);
        labels.extend(std::iter::repeat_n(c, ipc));
    }
    let features = match mode {
        InitMode::RandomReal => real.features.gather_rows(&indices),
        InitMode::Noise => {
            let mut rng = rng::keyed(domain::DISTILL_INIT, seed, u64::MAX);
            let mut shape = real.features.shape().to_vec();
            shape[0] = indices.len();
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random::<f32>()).collect())?
        }
    };
    LabeledDataset::new(features, labels, Role::Synthetic, real.class_count)
}

/// Optimizes a class-balanced synthetic set against the teacher bank.
pub fn distill(
    real: &LabeledDataset,
    bank: &TrajectoryBank,
    recipe: &TrainRecipe,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate()?;
    recipe.validate()?;
    let usable: Vec<&Trajectory> = bank
        .trajectories
        .iter()
        .filter(|t| t.snapshots.len() > config.match_horizon)
        .collect();
    if usable.is_empty() {
        return Err(Error::Config(format!(
            "no teacher trajectory is longer than match_horizon = {}",
            config.match_horizon
        )));
    }
    let syn = initial_synthetic(real, config.ipc, config.init_mode, config.seed)?;
    let labels = syn.labels.clone();
    let mut features = syn.features.clone();
    let student = Classifier {
        arch: &bank.arch,
        labels: &labels,
    };
    let mut velocity = vec![0.0f32; features.len()];
    let mut losses = Vec::with_capacity(config.outer_steps);
    let mut skipped = 0;

    for step in 0..config.outer_steps {
        let mut rng = rng::keyed(domain::DISTILL_STEP, config.seed, step as u64);
        let traj = usable[rng.random_range(0..usable.len())];
        let s = rng.random_range(0..traj.snapshots.len() - config.match_horizon);
        let start = &traj.snapshots[s].params;
        let target = &traj.snapshots[s + config.match_horizon].params;
        let Some(m) = match_step(&student, &features, start, target, recipe.lr, config.inner_unroll)
            .map_err(|e| Error::diverged(format!("distillation outer step {step}"), e))?
        else {
            skipped += 1;
            continue;
        };
        if !m.loss.is_finite() || !m.grad.is_finite() {
            return Err(Error::diverged(
                format!("distillation outer step {step}"),
                Error::NumericFailure {
                    layer: 0,
                    context: "trajectory matching loss".into(),
                },
            ));
        }
        for ((x, v), &g) in features
            .data_mut()
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(m.grad.data())
        {
            *v = config.syn_momentum * *v + g;
            *x = (*x - config.syn_lr * *v).clamp(0.0, 1.0);
        }
        losses.push(m.loss);
    }
    Ok(DistillOutcome {
        dataset: LabeledDataset::new(features, labels, Role::Synthetic, real.class_count)?,
        losses,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEval {
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Trains a fresh student per seed on `syn` only and scores it on `real_eval`.
pub fn eval_distillate(
    syn: &LabeledDataset,
    real_eval: &LabeledDataset,
    arch: &Arch,
    recipe: &TrainRecipe,
    student_seeds: &[u64],
) -> Result<DistillEval> {
    if syn.role != Role::Synthetic {
        return Err(Error::Config(format!("expected a synthetic dataset, got role {}", syn.role)));
    }
    student_accuracies(syn, real_eval, arch, recipe, student_seeds)
}

/// Same protocol without the role check, for baselines trained on real
/// subsets.
pub fn student_accuracies(
    train_set: &LabeledDataset,
    real_eval: &LabeledDataset,
    arch: &Arch,
    recipe: &TrainRecipe,
    student_seeds: &[u64],
) -> Result<DistillEval> {
    if student_seeds.is_empty() {
        return Err(Error::Config("need at least one student seed".into()));
    }
    let mask = SparsityMask::dense(arch);
    let mut accuracies = Vec::with_capacity(student_seeds.len());
    for &seed in student_seeds {
        let init = ModelState::init(arch, seed);
        let out = train(&init, &mask, train_set, &recipe.with_order_seed(seed))?;
        accuracies.push(evaluate(&out.state, real_eval)?.accuracy);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DistillEval {
        mean,
        std,
        accuracies,
    })
}

/// `|L(Φ(real); val) − L(Φ(syn); val)|` for one student seed.
pub fn validation_gap(
    real: &LabeledDataset,
    syn: &LabeledDataset,
    val: &LabeledDataset,
    arch: &Arch,
    real_recipe: &TrainRecipe,
    syn_recipe: &TrainRecipe,
    seed: u64,
) -> Result<f64> {
    let mask = SparsityMask::dense(arch);
    let init = ModelState::init(arch, seed);
    let a = train(&init, &mask, real, &real_recipe.with_order_seed(seed))?;
    let b = train(&init, &mask, syn, &syn_recipe.with_order_seed(seed))?;
    Ok((evaluate(&a.state, val)?.loss - evaluate(&b.state, val)?.loss).abs())
}
