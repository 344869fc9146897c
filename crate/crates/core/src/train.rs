//! The training algorithm shared by every pipeline: masked minibatch SGD over
//! keyed epoch orders, with a fixed epoch budget and a plateau early stop.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, LabeledDataset};
use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::model::{loss_and_grad, logits, ModelState};
use crate::optim::{sgd_step, MomentumBuffer, Sgd};
use crate::tensor::kernels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Minimum improvement of the epoch loss over the best seen so far.
    pub min_delta: f64,
    /// Consecutive non-improving epochs before stopping.
    pub patience: u32,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            min_delta: 1e-4,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub lr: f32,
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub epochs: u32,
    pub batch_size: usize,
    pub order_seed: u64,
    /// Epochs after which a snapshot of the weights is kept.
    #[serde(default)]
    pub checkpoint_epochs: Vec<u32>,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl TrainRecipe {
    pub fn sgd(&self) -> Sgd {
        Sgd {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().find(|&&e| e > self.epochs) {
            return Err(Error::Config(format!(
                "checkpoint epoch {e} exceeds the {} epoch budget",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn with_order_seed(&self, order_seed: u64) -> Self {
        Self {
            order_seed,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Snapshots at `checkpoint_epochs`, in epoch order.
    pub checkpoints: Vec<ModelState>,
    /// Mean minibatch loss per epoch run.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub examples_seen: u64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, epoch: u32) -> Option<&ModelState> {
        self.checkpoints.iter().find(|s| s.epoch_tag == epoch)
    }
}

/// Trains `start` (masked) from epoch `start.epoch_tag` up to the recipe's
/// budget.
pub fn train(
    start: &ModelState,
    mask: &SparsityMask,
    data: &LabeledDataset,
    recipe: &TrainRecipe,
) -> Result<TrainOutcome> {
    train_observed(start, mask, data, recipe, |_, _| {})
}

/// As [`train`], calling `observe(step, state)` after every update.
pub fn train_observed<F>(
    start: &ModelState,
    mask: &SparsityMask,
    data: &LabeledDataset,
    recipe: &TrainRecipe,
    mut observe: F,
) -> Result<TrainOutcome>
where
    F: FnMut(u64, &ModelState),
{
    recipe.validate()?;
    mask.check_aligned(start.params.len())?;
    let opt = recipe.sgd();
    let mut state = mask.apply_to(start);
    let mut buffer = MomentumBuffer::zeros(state.params.len());
    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut steps = 0u64;
    let mut examples_seen = 0u64;
    let last_checkpoint = recipe.checkpoint_epochs.iter().copied().max().unwrap_or(0);
    let mut best = f64::INFINITY;
    let mut stale = 0u32;

    for epoch in start.epoch_tag..recipe.epochs {
        let order = epoch_order(data, recipe.order_seed, epoch);
        let mut loss_sum = 0.0f64;
        for chunk in order.permutation.chunks(recipe.batch_size) {
            let (x, y) = data.batch(chunk);
            let (loss, grad) = loss_and_grad(&state, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::NumericFailure {
                    layer: state.arch.layers.len(),
                    context: format!("loss at epoch {epoch}"),
                });
            }
            sgd_step(&mut state, &grad, mask, &opt, &mut buffer)?;
            loss_sum += loss * chunk.len() as f64;
            steps += 1;
            examples_seen += chunk.len() as u64;
            observe(steps, &state);
        }
        state.epoch_tag = epoch + 1;
        let epoch_loss = loss_sum / data.len() as f64;
        epoch_losses.push(epoch_loss);
        if recipe.checkpoint_epochs.contains(&state.epoch_tag) {
            checkpoints.push(state.clone());
        }
        if let Some(es) = &recipe.early_stop {
            if best - epoch_loss < es.min_delta {
                stale += 1;
            } else {
                stale = 0;
            }
            best = best.min(epoch_loss);
            if stale >= es.patience && state.epoch_tag >= last_checkpoint {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        state,
        checkpoints,
        epoch_losses,
        steps,
        examples_seen,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and accuracy over the whole dataset, in fixed batch order.
pub fn evaluate(state: &ModelState, data: &LabeledDataset) -> Result<Evaluation> {
    const CHUNK: usize = 256;
    let n = data.len();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = data.features.rows_range(start, end);
        let z = logits(state, &x)?;
        let c = z.row_len();
        let y = &data.labels[start..end];
        loss += kernels::cross_entropy_rows(z.data(), y, c).iter().sum::<f64>();
        for (r, &label) in y.iter().enumerate() {
            if kernels::argmax(&z.data()[r * c..(r + 1) * c]) == label {
                correct += 1;
            }
        }
        start = end;
    }
    let loss = loss / n as f64;
    if !loss.is_finite() {
        return Err(Error::NumericFailure {
            layer: state.arch.layers.len(),
            context: "evaluation loss".into(),
        });
    }
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / n as f64,
    })
}
