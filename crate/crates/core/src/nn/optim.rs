// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{NnError, Param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of folding it
    /// into the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4, decoupled: false }
    }
}

/// Adam over a fixed, ordered list of parameters.
///
/// Moment buffers are matched to parameters by position, so every call to
/// [`Adam::step`] must pass the same parameters in the same order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for (index, p) in params.iter().enumerate() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient { index });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay, decoupled } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            assert_eq!(m.len(), p.len(), "parameter shape changed between steps");
            for i in 0..p.len() {
                let mut g = p.grad[i];
                if decoupled {
                    p.value[i] -= lr * weight_decay * p.value[i];
                } else {
                    g += weight_decay * p.value[i];
                }
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Param {
        Param { value: vec![v], grad: vec![0.0], shape: vec![1] }
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = scalar(1.25);
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..3 {
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value[0], 1.25);
        assert_eq!(opt.steps(), 3);
    }

    #[test]
    fn positive_gradient_descends() {
        let mut p = scalar(0.0);
        p.grad[0] = 0.3;
        Adam::new(AdamConfig::default()).step(&mut [&mut p]).unwrap();
        assert!(p.value[0] < 0.0);
    }

    #[test]
    fn three_step_trajectory_matches_recurrence() {
        // Gradient of f(w) = w^2 + 0.5 w is 2w + 0.5; coupled decay 0.1.
        let cfg = AdamConfig { lr: 0.05, beta1: 0.8, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, decoupled: false };
        let mut p = scalar(1.5);
        let mut opt = Adam::new(cfg);

        let (mut w, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            p.grad[0] = 2.0 * p.value[0] + 0.5;
            opt.step(&mut [&mut p]).unwrap();

            let g = 2.0 * w + 0.5 + 0.1 * w;
            m = 0.8 * m + 0.2 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p.value[0] - w).abs() < 1e-10, "step {t}: {} vs {w}", p.value[0]);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = scalar(2.0);
        let mut opt = Adam::new(AdamConfig { decoupled: true, weight_decay: 0.1, lr: 0.5, ..Default::default() });
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar(1.0);
        p.grad[0] = f64::NAN;
        let err = Adam::new(AdamConfig::default()).step(&mut [&mut p]).unwrap_err();
        assert_eq!(err, NnError::NonFiniteGradient { index: 0 });
        assert_eq!(p.value[0], 1.0);
    }
}
