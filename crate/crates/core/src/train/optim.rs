use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

impl OptimizerKind {
    pub fn default_weight_decay(self) -> f64 {
        match self {
            Self::SgdMomentum => 5e-4,
            Self::Adamw => 0.05,
        }
    }
}

/// Adam hyperparameters; `beta1` doubles as the momentum setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Per-parameter moment buffers. `first` holds SGD velocity or Adam `m`;
/// `second` is only populated by Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            second: zeros.clone(),
            first: zeros,
            step: 0,
        }
    }

    fn check(&self, params: &[&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        ensure!(
            params.len() == grads.len() && params.len() == self.first.len(),
            "optimizer got {} parameters, {} gradients and {} buffers",
            params.len(),
            grads.len(),
            self.first.len()
        );
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
        }
        Ok(())
    }
}

/// `g' = g + wd * theta; v = momentum * v + g'; theta -= lr * v`.
pub fn sgd_momentum_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    state.check(params, grads)?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.first) {
        for ((theta, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v + (g + weight_decay * *theta);
            *theta -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

/// Adam with decoupled weight decay: `theta *= 1 - lr * wd`, then the
/// bias-corrected Adam update.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimizerState,
    h: &AdamHyper,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((theta, &g), m), v) in it {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            *theta -= h.lr * h.weight_decay * *theta;
            *theta -= h.lr * (*m / c1) / ((*v / c2).sqrt() + h.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_sgd(p: &mut Tensor, g: &Tensor, s: &mut OptimizerState, lr: f64, mom: f64, wd: f64) {
        sgd_momentum_step(&mut [p], &[g], s, lr, mom, wd).unwrap();
    }

    #[test]
    fn sgd_plain_descent() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.5, 0.25]);
        let mut s = OptimizerState::new(&[&p]);
        run_sgd(&mut p, &g, &mut s, 0.1, 0.0, 0.0);
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut p = Tensor::vector(vec![3.0, 4.0]);
        let mut s = OptimizerState::new(&[&p]);
        run_sgd(&mut p, &Tensor::zeros(&[2]), &mut s, 0.1, 0.9, 0.0);
        assert_eq!(p.data(), &[3.0, 4.0]);
    }

    #[test]
    fn sgd_momentum_second_step() {
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut s = OptimizerState::new(&[&p]);
        run_sgd(&mut p, &g, &mut s, 0.1, 0.9, 0.0);
        let after_first = p.data()[0];
        run_sgd(&mut p, &g, &mut s, 0.1, 0.9, 0.0);
        assert!((after_first - p.data()[0] - 0.1 * 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_couples_into_gradient() {
        let mut p = Tensor::vector(vec![2.0]);
        let mut s = OptimizerState::new(&[&p]);
        run_sgd(&mut p, &Tensor::vector(vec![0.0]), &mut s, 0.5, 0.0, 0.1);
        assert!((p.data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_no_decay() {
        let mut p = Tensor::vector(vec![1.5, -0.5]);
        let mut s = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&Tensor::zeros(&[2])], &mut s, &AdamHyper::new(0.01, 0.0)).unwrap();
        assert_eq!(p.data(), &[1.5, -0.5]);
    }

    #[test]
    fn adamw_decay_is_multiplicative() {
        let mut p = Tensor::vector(vec![2.0, -4.0]);
        let mut s = OptimizerState::new(&[&p]);
        adamw_step(&mut [&mut p], &[&Tensor::zeros(&[2])], &mut s, &AdamHyper::new(0.1, 0.05)).unwrap();
        assert_eq!(p.data(), &[2.0 * (1.0 - 0.1 * 0.05), -4.0 * (1.0 - 0.1 * 0.05)]);
    }

    #[test]
    fn adamw_first_step_is_about_lr() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut s = OptimizerState::new(&[&p]);
        let h = AdamHyper::new(0.01, 0.0);
        adamw_step(&mut [&mut p], &[&Tensor::vector(vec![1.0])], &mut s, &h).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        assert!((p.data()[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        let mut s = OptimizerState::new(&[&p]);
        let g = Tensor::vector(vec![1.0]);
        assert!(sgd_momentum_step(&mut [&mut p], &[&g], &mut s, 0.1, 0.9, 0.0).is_err());
    }
}
