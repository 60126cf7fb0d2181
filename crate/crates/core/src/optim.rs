//! Adam and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam state for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moments sized after `params`, with β₁=0.9, β₂=0.999, ε=1e-8.
    pub fn new(params: &[Tensor], learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Param(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::Param(format!(
                    "adam: parameter {i} has {} values, gradient {}, moments {}",
                    p.len(),
                    g.len(),
                    self.first_moment[i].len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Multiplies the base rate by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::Config(format!("decay factor {factor} outside (0, 1)")));
        }
        Ok(Self {
            base_lr,
            milestones,
            factor,
        })
    }

    /// Rate used during the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}
