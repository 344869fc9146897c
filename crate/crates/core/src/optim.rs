//! Masked SGD with momentum.

use crate::error::{Error, Result};
use crate::mask::SparsityMask;
use crate::model::ModelState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Sgd {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumBuffer(pub Vec<f32>);

impl MomentumBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }
}

/// One update: `b ← μ·b + (g + λ·θ)`, `θ ← θ − lr·b`, then zero both `θ` and
/// `b` wherever the mask prunes.
pub fn sgd_step(
    state: &mut ModelState,
    grad: &[f32],
    mask: &SparsityMask,
    opt: &Sgd,
    buffer: &mut MomentumBuffer,
) -> Result<()> {
    opt.validate()?;
    let n = state.params.len();
    mask.check_aligned(n)?;
    if grad.len() != n || buffer.0.len() != n {
        return Err(Error::Shape {
            context: "sgd_step gradient/buffer",
            expected: vec![n],
            actual: vec![grad.len(), buffer.0.len()],
        });
    }
    let bits = mask.bits();
    for i in 0..n {
        if !bits[i] {
            state.params[i] = 0.0;
            buffer.0[i] = 0.0;
            continue;
        }
        let g = grad[i] + opt.weight_decay * state.params[i];
        let b = opt.momentum * buffer.0[i] + g;
        buffer.0[i] = b;
        state.params[i] -= opt.lr * b;
    }
    Ok(())
}
