use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine-annealed learning rate, `0.5 * base * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    0.5 * base_lr * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos())
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub base_lr: f64,
    pub epoch: usize,
    pub total_epochs: usize,
}

impl SgdState {
    pub fn new(param_lens: &[usize], base_lr: f64, total_epochs: usize) -> Self {
        Self {
            velocity: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            momentum: 0.9,
            base_lr,
            epoch: 0,
            total_epochs,
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.epoch, self.total_epochs, self.base_lr)
    }
}

pub fn sgd_step(params: Vec<&mut [f64]>, grads: &[Vec<f64>], state: &mut SgdState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape("parameter/gradient/velocity count mismatch".into()));
    }
    let lr = state.lr();
    let mu = state.momentum;
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::Shape("parameter/gradient length mismatch".into()));
        }
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}
