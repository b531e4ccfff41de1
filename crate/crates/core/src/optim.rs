//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Internal(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[i].shape() {
                return Err(Error::Internal(format!(
                    "adam: shape mismatch for parameter {i}: {:?} vs {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.first_moment[0] = Tensor::vector(vec![0.5, 0.5]);
        state.second_moment[0] = Tensor::vector(vec![0.25, 0.25]);
        // with m != 0 the parameters move, so check the pure zero-state case separately
        let mut fresh = params.clone();
        let mut fresh_state = AdamState::new(AdamConfig::default(), &fresh);
        fresh_state.step(&mut fresh, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(fresh[0].data(), &[1.0, -2.0]);
        assert_eq!(fresh_state.step_count, 1);

        state.step(&mut params, &[Tensor::vector(vec![0.0, 0.0])]).unwrap();
        assert_eq!(state.first_moment[0].data(), &[0.45, 0.45]);
        assert!((state.second_moment[0].data()[0] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut params = vec![Tensor::vector(vec![0.0, 0.0, 0.0])];
        let mut state = AdamState::new(cfg, &params);
        state.step(&mut params, &[Tensor::vector(vec![3.0, -0.5, 100.0])]).unwrap();
        for (p, s) in params[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * 0.01).abs() < 1e-8, "{p}");
        }
    }

    #[test]
    fn two_steps_on_square_decrease_w() {
        // scalar simulation of f(w) = w², gradient 2w
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut params = vec![Tensor::vector(vec![1.0])];
        let mut state = AdamState::new(cfg, &params);
        let mut trace = vec![1.0];
        for _ in 0..2 {
            let w = params[0].data()[0];
            state.step(&mut params, &[Tensor::vector(vec![2.0 * w])]).unwrap();
            trace.push(params[0].data()[0]);
        }
        assert!(trace[1] < trace[0] && trace[2] < trace[1], "{trace:?}");
    }

    #[test]
    fn zero_learning_rate_is_bit_exact_identity() {
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        let orig = vec![Tensor::vector(vec![0.3, -7.25, 1e-9])];
        let mut params = orig.clone();
        let mut state = AdamState::new(cfg, &params);
        for _ in 0..5 {
            state.step(&mut params, &[Tensor::vector(vec![1.0, -3.0, 0.2])]).unwrap();
        }
        assert_eq!(params, orig);
    }

    #[test]
    fn shape_mismatch_is_internal_error() {
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let err = state.step(&mut params, &[Tensor::vector(vec![0.0])]).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }
}
