//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| {
                (
                    Tensor::zeros(p.rows(), p.cols()),
                    Tensor::zeros(p.rows(), p.cols()),
                )
            })
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update: `p -= lr * wd * p`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: (params.len(), grads.len()),
                right: (self.m.len(), self.m.len()),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() || self.m[k].shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let m = self.m[k].data_mut();
            let vv = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                *w -= c.lr * c.weight_decay * *w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                vv[i] = c.beta2 * vv[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = vv[i] / bc2;
                *w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut w = Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap();
        let before = w.clone();
        let mut opt = OptimizerState::new(AdamConfig::new(0.1, 0.0), [&w]);
        for _ in 0..10 {
            opt.step(&mut [&mut w], &[Tensor::zeros(1, 2)]).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = Tensor::scalar(0.0);
        let mut opt = OptimizerState::new(AdamConfig::new(0.01, 0.0), [&w]);
        opt.step(&mut [&mut w], &[Tensor::scalar(1.0)]).unwrap();
        assert!((w.to_scalar() + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn minimises_square() {
        let mut w = Tensor::scalar(5.0);
        let mut opt = OptimizerState::new(AdamConfig::new(0.1, 0.0), [&w]);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * w.to_scalar());
            opt.step(&mut [&mut w], &[g]).unwrap();
        }
        assert!(w.to_scalar().abs() < 0.5, "{}", w.to_scalar());
    }

    #[test]
    fn decay_is_decoupled() {
        let mut w = Tensor::scalar(2.0);
        let mut opt = OptimizerState::new(AdamConfig::new(0.1, 0.5), [&w]);
        opt.step(&mut [&mut w], &[Tensor::scalar(0.0)]).unwrap();
        assert!((w.to_scalar() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
