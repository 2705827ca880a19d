//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix::Matrix;
use crate::params::{BlockId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a subset of the blocks of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    blocks: Vec<BlockId>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    /// State for the given trainable blocks; all other blocks are left
    /// untouched by [`AdamState::step`].
    pub fn new(config: AdamConfig, params: &ParamSet, trainable: Vec<BlockId>) -> Self {
        let zeros = |id: &BlockId| {
            let p = params.get(*id);
            Matrix::zeros(p.rows, p.cols)
        };
        Self {
            config,
            step: 0,
            m: trainable.iter().map(zeros).collect(),
            v: trainable.iter().map(zeros).collect(),
            blocks: trainable,
        }
    }

    pub fn for_all(config: AdamConfig, params: &ParamSet) -> Self {
        Self::new(config, params, params.ids().collect())
    }

    pub fn trainable(&self) -> &[BlockId] {
        &self.blocks
    }

    /// One update. `grads` holds a gradient for every block of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid(format!(
                "expected {} gradient blocks, got {}",
                params.len(),
                grads.len()
            )));
        }
        for (k, id) in self.blocks.iter().enumerate() {
            if grads[id.0].shape() != params.get(*id).shape() || self.m[k].shape() != params.get(*id).shape() {
                return Err(invalid(format!("gradient shape mismatch for block {}", id.0)));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, id) in self.blocks.iter().enumerate() {
            let p = params.get_mut(*id);
            let g = &grads[id.0];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = beta1 * m.data[j] + (1.0 - beta1) * gj;
                v.data[j] = beta2 * v.data[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn first_moment(&self, k: usize) -> &Matrix {
        &self.m[k]
    }

    pub fn second_moment(&self, k: usize) -> &Matrix {
        &self.v[k]
    }
}
