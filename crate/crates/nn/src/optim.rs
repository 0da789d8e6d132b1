//! Adaptive first-order optimizers.

use serde::{Deserialize, Serialize};

use crate::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Second moment tracks the squared deviation of the gradient from its
    /// running mean.
    AdaBelief,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    /// lr 2e-4, betas (0.5, 0.99), eps 1e-16.
    pub fn adabelief() -> Self {
        Self { kind: OptimizerKind::AdaBelief, lr: 2e-4, beta1: 0.5, beta2: 0.99, eps: 1e-16 }
    }

    /// Original GAN-style Adam: lr 2e-4, betas (0.5, 0.999), eps 1e-8.
    pub fn adam() -> Self {
        Self { kind: OptimizerKind::Adam, lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// What a rejected update saw.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDiagnostics {
    pub step: u64,
    pub tensor: usize,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    /// First-moment accumulators, one per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second-moment (Adam) or belief (AdaBelief) accumulators.
    pub s: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            s: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: OptimizerConfig, params: &[&[f64]]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &shapes)
    }

    /// Applies one update. A non-finite gradient rejects the whole update and
    /// leaves parameters, accumulators and the step counter untouched.
    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[t].len() || g.len() != self.m[t].len() {
                return Err(NnError::Shape(format!("tensor {t}: accumulator/parameter/gradient sizes differ")));
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(GradientDiagnostics { step: self.step, tensor: t, index, value }));
            }
        }
        self.step += 1;
        let OptimizerConfig { kind, lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, s)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.s.iter_mut())) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                s[i] = match kind {
                    OptimizerKind::AdaBelief => {
                        let r = gi - m[i];
                        beta2 * s[i] + (1.0 - beta2) * r * r + eps
                    }
                    OptimizerKind::Adam => beta2 * s[i] + (1.0 - beta2) * gi * gi,
                };
                let m_hat = m[i] / bc1;
                let s_hat = s[i] / bc2;
                p[i] -= lr * m_hat / (s_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
