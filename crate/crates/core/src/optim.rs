//! Adam with decoupled weight decay, plus the multistep learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Adam moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update with bias correction. Decoupled weight decay
    /// `lr * weight_decay * w` is subtracted on top of the adaptive step;
    /// pass 0 for parameters that must not decay.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix, lr: f64, weight_decay: f64) -> Result<()> {
        if !param.same_shape(grad) || !param.same_shape(&self.m) {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: format!("{}x{}", param.rows(), param.cols()),
                rhs: format!("{}x{}", grad.rows(), grad.cols()),
            });
        }
        if lr <= 0.0 {
            return Err(Error::contract("adam_step", format!("lr must be > 0, got {lr}")));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        let p = param.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps) + lr * weight_decay * p[i];
        }
        Ok(())
    }
}

/// Multistep decay: lr = lr0 * gamma^(milestones passed).
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub initial: f64,
    pub gamma: f64,
    pub milestones: Vec<u64>,
}

impl LrSchedule {
    pub fn new(initial: f64, gamma: f64, milestones: Vec<u64>) -> Self {
        LrSchedule {
            initial,
            gamma,
            milestones,
        }
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
        self.initial * self.gamma.powi(passed)
    }
}
