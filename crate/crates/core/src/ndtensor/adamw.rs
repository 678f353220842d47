use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment optimizer with bias correction and decoupled weight decay.
///
/// Moment state is keyed by entry position, so one optimizer must only ever
/// see one [`ParamSet`] layout.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: Vec<(Tensor, Tensor)>,
    step_count: u64,
    warnings: Vec<String>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            step_count: 0,
            warnings: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Entries skipped because of non-finite gradients.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Applies one update using the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step_count += 1;
        if self.moments.len() != params.len() {
            self.moments = params
                .iter()
                .map(|e| (Tensor::zeros(e.value.shape()), Tensor::zeros(e.value.shape())))
                .collect();
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (entry, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !entry.grad.is_finite() {
                self.warnings.push(format!(
                    "step {}: non-finite gradient for '{}', update skipped",
                    self.step_count, entry.name
                ));
                continue;
            }
            let values = entry.value.data_mut();
            let grads = entry.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * weight_decay * values[i];
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(p: f64) -> ParamSet {
        let mut s = ParamSet::new();
        s.insert("p", Tensor::scalar(p)).unwrap();
        s
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::from_vec(vec![0.3, -2.0, 5.5]))
            .unwrap();
        let before = params.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..5 {
            opt.step(&mut params);
        }
        assert!(params.values_bit_identical(&before));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = scalar_set(1.0);
        params.get_mut("p").unwrap().grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut params);
        let p = params.value("p").unwrap().item();
        assert!((p - 0.9).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn quadratic_converges() {
        let mut params = scalar_set(5.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..100 {
            params.zero_grad();
            let p = params.value("p").unwrap().item();
            params.get_mut("p").unwrap().grad = Tensor::scalar(p);
            opt.step(&mut params);
        }
        let p = params.value("p").unwrap().item();
        assert!(p.abs() < 0.5, "p = {p}");
    }

    #[test]
    fn non_finite_gradient_skips_entry_and_warns() {
        let mut params = ParamSet::new();
        params.insert("bad", Tensor::scalar(1.0)).unwrap();
        params.insert("good", Tensor::scalar(1.0)).unwrap();
        params.get_mut("bad").unwrap().grad = Tensor::scalar(f64::NAN);
        params.get_mut("good").unwrap().grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&mut params);
        assert_eq!(params.value("bad").unwrap().item(), 1.0);
        assert!(params.value("good").unwrap().item() < 1.0);
        assert_eq!(opt.warnings().len(), 1);
        assert!(opt.warnings()[0].contains("bad"));
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let mut params = scalar_set(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut params);
        assert!((params.value("p").unwrap().item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
