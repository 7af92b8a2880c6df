use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 factor added to the gradient before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

/// Adam with coupled L2 regularization.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            state: AdamState { first_moment: zeros.clone(), second_moment: zeros, step: 0 },
        }
    }

    /// Applies one update. Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), AutodiffError> {
        if grads.len() != params.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { name: name.to_string() });
            }
        }
        let AdamConfig { learning_rate, beta1, beta2, epsilon, weight_decay } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let moments = self.state.first_moment.iter_mut().zip(self.state.second_moment.iter_mut());
        for ((p, g), (m, v)) in params.values_mut().zip(grads).zip(moments) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + weight_decay * *w;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(values.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = store(&[0.5, -1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            adam.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(params.get("w").unwrap().data(), &[0.5, -1.0, 2.0]);
        assert_eq!(adam.state.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr*g/(|g|+eps)
        let mut params = store(&[0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params, &[Tensor::from_vec(vec![1.0])]).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((params.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn stronger_weight_decay_gives_smaller_norm() {
        let run = |decay: f64| {
            let mut params = store(&[1.0, -2.0, 0.5, 3.0]);
            let config = AdamConfig { weight_decay: decay, ..AdamConfig::default() };
            let mut adam = Adam::new(config, &params);
            for step in 0..200 {
                // gradient of a shallow quadratic pulling toward (1,1,1,1)
                let g: Vec<f64> = params.get("w").unwrap().data().iter().map(|w| 0.01 * (w - 1.0) + 1e-3 * (step % 3) as f64).collect();
                adam.step(&mut params, &[Tensor::from_vec(g)]).unwrap();
            }
            params.l2_norm()
        };
        assert!(run(5e-4) < run(1e-4));
    }

    #[test]
    fn nan_gradient_is_rejected_without_update() {
        let mut params = store(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &params);
        let err = adam.step(&mut params, &[Tensor::from_vec(vec![f64::NAN])]).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteGradient { .. }));
        assert_eq!(params.get("w").unwrap().item(), 1.0);
        assert_eq!(adam.state.step, 0);
    }
}
