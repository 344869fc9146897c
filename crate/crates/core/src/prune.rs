//! Magnitude pruning, weight rewinding, and the iterative pipelines.
//!
//! Every pipeline is one state machine ([`PruneRunner`]) stepping through a
//! phase plan. Step 0 trains the dense model; each later step prunes the
//! previous step's trained weights, rewinds the survivors to the reference
//! state and retrains. What varies between pipelines is the dataset used in
//! the inner training loop (real data for IMP, the distilled set for
//! distilled pruning) and, for the combined method, a switch from one to the
//! other part-way through.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Role};
use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::model::ModelState;
use crate::train::{evaluate, train, TrainRecipe};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// One threshold across all prunable layers.
    #[default]
    Global,
    /// The fraction is applied to each prunable layer separately.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethod {
    Imp,
    Distilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub fraction: f64,
    pub iterations: usize,
    pub method: PruneMethod,
    pub rewind_epoch: u32,
    #[serde(default)]
    pub scope: PruneScope,
}

impl PruneSchedule {
    pub fn imp(iterations: usize, rewind_epoch: u32) -> Self {
        Self {
            fraction: 0.2,
            iterations,
            method: PruneMethod::Imp,
            rewind_epoch,
            scope: PruneScope::Global,
        }
    }

    pub fn distilled(iterations: usize) -> Self {
        Self {
            fraction: 0.2,
            iterations,
            method: PruneMethod::Distilled,
            rewind_epoch: 0,
            scope: PruneScope::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction(self.fraction)?;
        if self.fraction == 0.0 {
            return Err(Error::Config("prune fraction must be > 0 for a schedule".into()));
        }
        Ok(())
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("prune fraction must be in [0, 1), got {fraction}")));
    }
    Ok(())
}

/// `1 − (1 − fraction)^t`
pub fn sparsity_after(fraction: f64, t: usize) -> f64 {
    1.0 - (1.0 - fraction).powi(t as i32)
}

/// Removes `⌊fraction · surviving⌋` of the surviving prunable weights with the
/// smallest magnitude, globally across layers. Ties go to the lower flat
/// index.
pub fn magnitude_prune(state: &ModelState, mask: &SparsityMask, fraction: f64) -> Result<SparsityMask> {
    magnitude_prune_scoped(state, mask, fraction, PruneScope::Global)
}

pub fn magnitude_prune_scoped(
    state: &ModelState,
    mask: &SparsityMask,
    fraction: f64,
    scope: PruneScope,
) -> Result<SparsityMask> {
    check_fraction(fraction)?;
    mask.check_aligned(state.params.len())?;
    let mut out = mask.clone();
    let groups: Vec<Vec<usize>> = match scope {
        PruneScope::Global => vec![mask.prunable_indices().filter(|&i| mask.keeps(i)).collect()],
        PruneScope::PerLayer => mask
            .segments()
            .iter()
            .filter(|s| s.prunable)
            .map(|s| (s.offset..s.offset + s.len).filter(|&i| mask.keeps(i)).collect())
            .collect(),
    };
    let by_magnitude = |&a: &usize, &b: &usize| -> Ordering {
        state.params[a]
            .abs()
            .total_cmp(&state.params[b].abs())
            .then(a.cmp(&b))
    };
    for mut candidates in groups {
        let k = (fraction * candidates.len() as f64).floor() as usize;
        if k == 0 {
            continue;
        }
        candidates.select_nth_unstable_by(k - 1, by_magnitude);
        for &i in &candidates[..k] {
            out.set_pruned(i);
        }
    }
    Ok(out)
}

/// `reference ⊙ mask`, carrying the reference's epoch tag.
pub fn rewind(trained: &ModelState, reference: &ModelState, mask: &SparsityMask) -> Result<ModelState> {
    trained.check_compatible(reference)?;
    mask.check_aligned(reference.params.len())?;
    Ok(mask.apply_to(reference))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Inner loop on real training data.
    Imp,
    /// Inner loop on the distilled set.
    Syn,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Imp => "imp",
            Phase::Syn => "syn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    /// Measured over prunable coordinates.
    pub sparsity: f64,
    /// `sparsity_after(fraction, iteration)`; differs from `sparsity` only by
    /// the per-iteration floor.
    pub schedule_sparsity: f64,
    pub surviving_prunable: usize,
    /// Converged loss of the inner-loop model on its own training set.
    pub inner_train_loss: f64,
    /// Loss of the real-data-trained subnetwork on the real training set.
    pub train_loss: f64,
    pub test_acc: f64,
    pub inner_examples_seen: u64,
    pub mask: SparsityMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRunRecord {
    pub fraction: f64,
    pub rewind_epoch: u32,
    pub scope: PruneScope,
    pub inner_roles: Vec<Role>,
    pub real_train_size: usize,
    pub syn_train_size: Option<usize>,
    pub entries: Vec<IterationRecord>,
}

impl PruneRunRecord {
    pub fn sparsities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.sparsity).collect()
    }

    pub fn at_sparsity(&self, sparsity: f64) -> Result<&IterationRecord> {
        self.entries
            .iter()
            .find(|e| (e.sparsity - sparsity).abs() < 1e-9)
            .ok_or_else(|| Error::MissingCheckpoint {
                requested: sparsity,
                nearest: nearest(&self.sparsities(), sparsity),
            })
    }

    pub fn final_entry(&self) -> &IterationRecord {
        self.entries.last().expect("record has the dense entry")
    }
}

pub(crate) fn nearest(available: &[f64], target: f64) -> Vec<f64> {
    let mut v = available.to_vec();
    v.sort_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()));
    v.truncate(3);
    v
}

/// Everything a pipeline reads but never mutates.
#[derive(Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub init: &'a ModelState,
    pub real_train: &'a LabeledDataset,
    pub real_test: &'a LabeledDataset,
    pub syn_train: Option<&'a LabeledDataset>,
    pub real_recipe: &'a TrainRecipe,
    /// Recipe for inner loops over the distilled set.
    pub syn_recipe: &'a TrainRecipe,
}

/// Serializable progress of a pipeline; enough to resume after the last
/// completed iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunnerState {
    pub record: PruneRunRecord,
    pub plan: Vec<Phase>,
    pub mask: SparsityMask,
    pub prune_source: Option<ModelState>,
    pub reference: Option<ModelState>,
}

impl RunnerState {
    pub fn next_step(&self) -> usize {
        self.record.entries.len()
    }

    pub fn is_done(&self) -> bool {
        self.next_step() >= self.plan.len()
    }
}

pub struct PruneRunner<'a> {
    inputs: PipelineInputs<'a>,
    state: RunnerState,
}

impl<'a> PruneRunner<'a> {
    /// `phases` lists `(phase, iterations)`; the dense step 0 belongs to the
    /// first phase.
    pub fn new(
        inputs: PipelineInputs<'a>,
        phases: &[(Phase, usize)],
        fraction: f64,
        rewind_epoch: u32,
        scope: PruneScope,
    ) -> Result<Self> {
        check_fraction(fraction)?;
        if fraction == 0.0 {
            return Err(Error::Config("prune fraction must be > 0".into()));
        }
        let Some(&(first, _)) = phases.first() else {
            return Err(Error::Config("pipeline needs at least one phase".into()));
        };
        let mut plan = vec![first];
        for &(phase, n) in phases {
            plan.extend(std::iter::repeat_n(phase, n));
        }
        if plan.contains(&Phase::Syn) {
            let syn = inputs
                .syn_train
                .ok_or_else(|| Error::Config("distilled phase needs a synthetic dataset".into()))?;
            if syn.role != Role::Synthetic {
                return Err(Error::Config(format!(
                    "inner-loop dataset must have role synthetic, got {}",
                    syn.role
                )));
            }
            if rewind_epoch != 0 {
                return Err(Error::Config("distilled pruning rewinds to initialization (k = 0)".into()));
            }
        }
        if rewind_epoch > inputs.real_recipe.epochs {
            return Err(Error::Config(format!(
                "rewind epoch {rewind_epoch} exceeds the {} epoch budget",
                inputs.real_recipe.epochs
            )));
        }
        if inputs.init.epoch_tag != 0 {
            return Err(Error::Config("pipelines start from an initialization (epoch 0)".into()));
        }
        let mut inner_roles = Vec::new();
        for &(phase, _) in phases {
            let role = match phase {
                Phase::Imp => Role::RealTrain,
                Phase::Syn => Role::Synthetic,
            };
            if !inner_roles.contains(&role) {
                inner_roles.push(role);
            }
        }
        let record = PruneRunRecord {
            fraction,
            rewind_epoch,
            scope,
            inner_roles,
            real_train_size: inputs.real_train.len(),
            syn_train_size: inputs.syn_train.map(LabeledDataset::len),
            entries: Vec::new(),
        };
        Ok(Self {
            state: RunnerState {
                record,
                plan,
                mask: SparsityMask::dense(&inputs.init.arch),
                prune_source: None,
                reference: None,
            },
            inputs,
        })
    }

    /// Continues from a saved state. The plan must match.
    pub fn resume(inputs: PipelineInputs<'a>, state: RunnerState) -> Result<Self> {
        state.mask.check_aligned(inputs.init.params.len())?;
        Ok(Self { inputs, state })
    }

    pub fn state(&self) -> &RunnerState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    /// Runs one iteration and returns its record entry.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let t = self.state.next_step();
        let Some(&phase) = self.state.plan.get(t) else {
            return Err(Error::InvalidInput("pipeline already complete".into()));
        };
        self.step_inner(t, phase)
            .map_err(|e| if e.is_numeric() { Error::diverged(format!("pruning iteration {t}"), e) } else { e })?;
        Ok(self.state.record.entries.last().expect("entry just pushed"))
    }

    fn step_inner(&mut self, t: usize, phase: Phase) -> Result<()> {
        let inp = self.inputs;
        let fraction = self.state.record.fraction;
        let k = self.state.record.rewind_epoch;

        let mask = if t == 0 {
            SparsityMask::dense(&inp.init.arch)
        } else {
            let source = self.state.prune_source.as_ref().expect("source after step 0");
            magnitude_prune_scoped(source, &self.state.mask, fraction, self.state.record.scope)?
        };
        let start = match (&self.state.reference, t) {
            (Some(reference), t) if t > 0 => rewind(inp.init, reference, &mask)?,
            _ => inp.init.clone(),
        };

        let (inner_data, inner_recipe) = match phase {
            Phase::Imp => (inp.real_train, inp.real_recipe.clone()),
            Phase::Syn => (
                inp.syn_train.expect("checked at construction"),
                inp.syn_recipe.clone(),
            ),
        };
        let mut inner_recipe = inner_recipe;
        if t == 0 && k > 0 && !inner_recipe.checkpoint_epochs.contains(&k) {
            inner_recipe.checkpoint_epochs.push(k);
        }
        let inner = train(&start, &mask, inner_data, &inner_recipe)?;
        if t == 0 {
            self.state.reference = Some(if k > 0 {
                inner
                    .checkpoint(k)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("dense run did not reach epoch {k}")))?
            } else {
                inp.init.clone()
            });
        }

        let real_trained = match phase {
            Phase::Imp => inner.state.clone(),
            Phase::Syn => train(&start, &mask, inp.real_train, inp.real_recipe)?.state,
        };
        let inner_eval = evaluate(&inner.state, inner_data)?;
        let train_eval = evaluate(&real_trained, inp.real_train)?;
        let test_eval = evaluate(&real_trained, inp.real_test)?;

        let entry = IterationRecord {
            iteration: t,
            phase,
            sparsity: mask.sparsity(),
            schedule_sparsity: sparsity_after(fraction, t),
            surviving_prunable: mask.surviving_prunable(),
            inner_train_loss: inner_eval.loss,
            train_loss: train_eval.loss,
            test_acc: test_eval.accuracy,
            inner_examples_seen: inner.examples_seen,
            mask: mask.clone(),
        };

        let next_phase = self.state.plan.get(t + 1).copied();
        self.state.prune_source = Some(if phase == Phase::Syn && next_phase == Some(Phase::Imp) {
            real_trained
        } else {
            inner.state
        });
        self.state.mask = mask;
        self.state.record.entries.push(entry);
        Ok(())
    }

    pub fn run_to_end(mut self) -> Result<PruneRunRecord> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.state.record)
    }
}

/// Traditional IMP with rewinding to `schedule.rewind_epoch`.
pub fn run_imp(
    init: &ModelState,
    real_train: &LabeledDataset,
    real_test: &LabeledDataset,
    recipe: &TrainRecipe,
    schedule: &PruneSchedule,
) -> Result<PruneRunRecord> {
    schedule.validate()?;
    if schedule.method != PruneMethod::Imp {
        return Err(Error::Config("run_imp needs method = imp".into()));
    }
    let inputs = PipelineInputs {
        init,
        real_train,
        real_test,
        syn_train: None,
        real_recipe: recipe,
        syn_recipe: recipe,
    };
    PruneRunner::new(
        inputs,
        &[(Phase::Imp, schedule.iterations)],
        schedule.fraction,
        schedule.rewind_epoch,
        schedule.scope,
    )?
    .run_to_end()
}

/// IMP whose inner loop trains on the distilled set; accuracies come from
/// retraining each masked initialization on real data.
pub fn run_distilled_pruning(
    inputs: PipelineInputs<'_>,
    schedule: &PruneSchedule,
) -> Result<PruneRunRecord> {
    schedule.validate()?;
    if schedule.method != PruneMethod::Distilled {
        return Err(Error::Config("run_distilled_pruning needs method = distilled".into()));
    }
    PruneRunner::new(
        inputs,
        &[(Phase::Syn, schedule.iterations)],
        schedule.fraction,
        schedule.rewind_epoch,
        schedule.scope,
    )?
    .run_to_end()
}

/// `syn_iters` distilled iterations, then IMP from the synthetic mask, both
/// rewinding to initialization.
pub fn run_combined(
    inputs: PipelineInputs<'_>,
    syn_iters: usize,
    imp_schedule: &PruneSchedule,
) -> Result<PruneRunRecord> {
    imp_schedule.validate()?;
    if syn_iters == 0 {
        return Err(Error::Config("combined pipeline needs syn_iters >= 1".into()));
    }
    if imp_schedule.rewind_epoch != 0 {
        return Err(Error::Config("combined pipeline rewinds to initialization (k = 0)".into()));
    }
    PruneRunner::new(
        inputs,
        &[(Phase::Syn, syn_iters), (Phase::Imp, imp_schedule.iterations)],
        imp_schedule.fraction,
        0,
        imp_schedule.scope,
    )?
    .run_to_end()
}
