use serde::{Deserialize, Serialize};

use super::{Param, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are created on the first step and
/// bound to the order of the parameter list passed in.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam bound to {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value.shape() != m.shape() || p.grad.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("adam step ({})", p.name),
                    expected: m.shape().to_vec(),
                    actual: p.grad.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..g.len() {
                let mi = &mut m.data_mut()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * g[i] * g[i];
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Param {
        Param::new("w", Tensor::filled(&[1], v))
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(0.5);
        p.grad = Tensor::filled(&[1], 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![&mut p]).unwrap();
        assert!((p.value.data()[0] - (0.5 - 0.001)).abs() < 1e-8);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(0.5);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(vec![&mut p]).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.5);
        assert_eq!(adam.t, 3);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar(1.0);
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        for _ in 0..200 {
            let w = p.value.data()[0];
            p.grad = Tensor::filled(&[1], 2.0 * w);
            adam.step(vec![&mut p]).unwrap();
        }
        assert!(p.value.data()[0].abs() < 0.1, "w = {}", p.value.data()[0]);
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut a = scalar(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![&mut a]).unwrap();
        let mut b = Param::new("w", Tensor::zeros(&[2]));
        assert!(adam.step(vec![&mut b]).is_err());
    }
}
