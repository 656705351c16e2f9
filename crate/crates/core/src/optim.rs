//! Adam with bias correction and the cosine schedules driving the learning
//! rate (per step) and the regularizer weight λ (per epoch).

use std::sync::Once;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update at learning rate `lr`, then zeroes the gradients.
    pub fn step(&mut self, params: &mut ModelParams, lr: f64) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                tensors.len()
            )));
        }
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    op: "AdamState::step",
                    left: m.shape(),
                    right: p.value.shape(),
                });
            }
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            for (i, g) in grads.into_iter().enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                let m_hat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let v_hat = *vi / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

/// Value over `total_steps` steps, decaying from `start` to `end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

static CLAMP_WARNING: Once = Once::new();

impl Schedule {
    pub fn cosine(start: f64, end: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            start,
            end,
            total_steps,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            start: value,
            end: value,
            total_steps: 0,
        }
    }

    pub fn value(&self, t: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.start,
            ScheduleKind::Cosine => cosine_value(self.start, self.end, t, self.total_steps),
        }
    }
}

/// `end + ½(start − end)(1 + cos(π t / T))`; steps past `T` clamp to `end`.
pub fn cosine_value(start: f64, end: f64, t: u64, total: u64) -> f64 {
    if total == 0 || t >= total {
        if t > total {
            CLAMP_WARNING.call_once(|| {
                log::warn!("schedule step {t} is past its horizon {total}; clamping");
            });
        }
        return end;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + phase.cos())
}

/// Regularizer weight per epoch, optionally cosine-annealed from `lambda0`
/// down to `lambda_min` over `epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub lambda_min: f64,
    pub annealed: bool,
    pub epochs: u64,
}

impl LambdaSchedule {
    pub fn at_epoch(&self, epoch: u64) -> f64 {
        if self.annealed {
            cosine_value(self.lambda0, self.lambda_min, epoch, self.epochs)
        } else {
            self.lambda0
        }
    }
}
