//! Adam with bias correction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> Default for AdamConfig<S> {
    fn default() -> Self {
        Self {
            lr: S::from_f64(0.0005),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
        }
    }
}

/// Per-parameter moment buffers plus the step counter and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub cfg: AdamConfig<S>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(param_sizes: &[usize], cfg: AdamConfig<S>) -> Self {
        Self {
            cfg,
            m: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<S>], &[Vec<S>]) {
        (&self.m, &self.v)
    }

    /// Rebuild from checkpointed buffers.
    pub fn from_parts(
        cfg: AdamConfig<S>,
        m: Vec<Vec<S>>,
        v: Vec<Vec<S>>,
        t: u64,
    ) -> Self {
        Self { cfg, m, v, t }
    }

    /// Apply one update to every parameter from its accumulated gradient.
    /// Gradients are left untouched; callers zero them between steps.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<S>)]) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::Contract(format!(
                "adam_step: {} parameters but state tracks {}",
                params.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = S::one() - beta1.powi(self.t as i32);
        let bc2 = S::one() - beta2.powi(self.t as i32);
        for (i, (name, param)) in params.iter_mut().enumerate() {
            let (data, grad) = param.data_and_grad_mut();
            let grad = grad.ok_or_else(|| {
                TensorError::Contract(format!("adam_step: parameter {name} has no gradient"))
            })?;
            if grad.len() != self.m[i].len() {
                return Err(TensorError::Contract(format!(
                    "adam_step: parameter {name} has {} values but state tracks {}",
                    grad.len(),
                    self.m[i].len()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, &g) in grad.iter().enumerate() {
                m[j] = beta1 * m[j] + (S::one() - beta1) * g;
                v[j] = beta2 * v[j] + (S::one() - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Tensor::<f64>::new(vec![2], vec![1.5, -2.0]).unwrap();
        p.grad = Some(vec![0.0, 0.0]);
        let mut state = AdamState::new(&[2], AdamConfig::default());
        state.step(&mut [("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn constant_gradient_matches_scalar_recurrence() {
        // Hand-rolled Adam recurrence on a scalar with constant gradient g.
        let g = 0.3f64;
        let cfg = AdamConfig::<f64>::default();
        let mut p = Tensor::<f64>::new(vec![1], vec![1.0]).unwrap();
        p.grad = Some(vec![g]);
        let mut state = AdamState::new(&[1], cfg);

        let (mut m, mut v, mut expected) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=10u32 {
            state.step(&mut [("p", &mut p)]).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
            expected -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            assert!(
                (p.data()[0] - expected).abs() < 1e-12,
                "step {t}: {} vs {expected}",
                p.data()[0]
            );
        }
        assert_eq!(state.step_count(), 10);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = Tensor::<f32>::zeros(vec![3]);
        let mut state = AdamState::new(&[3], AdamConfig::default());
        let err = state.step(&mut [("w_q", &mut p)]).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("w_q"), "message should name the parameter: {msg}");
    }
}
