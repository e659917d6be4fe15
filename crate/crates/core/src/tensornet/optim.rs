use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (w, g) in params.iter_mut().zip(grad) {
        *w -= lr * g;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

pub fn adam_step(params: &mut [f64], grad: &[f64], lr: f64, state: &mut AdamState) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Optimizer together with its state; owned by exactly one training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, state: AdamState },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(Optimizer::Sgd { lr })
    }

    pub fn adam(lr: f64, n: usize) -> Result<Self> {
        check_lr(lr)?;
        Ok(Optimizer::Adam { lr, state: AdamState::new(n) })
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grad, *lr),
            Optimizer::Adam { lr, state } => adam_step(params, grad, *lr, state),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Sgd { .. } => 0,
            Optimizer::Adam { state, .. } => state.t,
        }
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("learning rate must be positive, got {lr}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut w = vec![1.0, -2.0];
        sgd_step(&mut w, &[0.0, 0.0], 0.5);
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_on_square() {
        // f = x^2, f' = 2x
        let mut x = vec![1.0];
        let g = vec![2.0 * x[0]];
        sgd_step(&mut x, &g, 0.1);
        assert!((x[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for scale in [1e-6, 1.0, 1e6] {
            let mut w = vec![0.0; 3];
            let mut st = AdamState::new(3);
            adam_step(&mut w, &[scale, -scale, 2.0 * scale], 1e-3, &mut st);
            for v in &w {
                assert!((v.abs() - 1e-3).abs() < 1e-5, "{v}");
            }
        }
    }

    #[test]
    fn optimizer_is_deterministic() {
        let run = || {
            let mut w = vec![0.3, -0.1, 0.7];
            let mut opt = Optimizer::adam(0.01, 3).unwrap();
            for k in 0..50 {
                let g: Vec<f64> = w.iter().map(|x| 2.0 * x + (k as f64).sin()).collect();
                opt.step(&mut w, &g);
            }
            w
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(Optimizer::sgd(0.0).is_err());
    }
}
