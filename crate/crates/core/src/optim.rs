//! Adam with optional global-norm gradient clipping.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            clip_norm: Some(40.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .values()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }

    /// One Adam update in place. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<f64> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(TensorError::Invalid(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((p, g), m) in params.values().iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&x| {
                let x = x.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TensorError::NonFinite { op: "adam_step" });
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => T::lit(c / norm),
            _ => T::one(),
        };
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * clip;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn one_param(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Other, Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = one_param(0.7);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..5 {
            adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(store.values()[0].item(), 0.7);
        assert_eq!(adam.step_count, 5);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut store = one_param(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..100 {
            adam.step(&mut store, &[Tensor::scalar(2.5)]).unwrap();
        }
        assert!(store.values()[0].item() < 0.0);
        let mut store = one_param(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..100 {
            adam.step(&mut store, &[Tensor::scalar(-0.1)]).unwrap();
        }
        assert!(store.values()[0].item() > 0.0);
    }

    #[test]
    fn single_step_on_quadratic_matches_scalar_reference() {
        // f(w) = w², w = 1 -> g = 2.
        let cfg = AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        };
        let mut store = one_param(1.0);
        let mut adam = AdamState::new(cfg, &store);
        adam.step(&mut store, &[Tensor::scalar(2.0)]).unwrap();

        // hand-rolled reference
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 3e-4f64, 1e-7f64);
        let g = 2.0;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expected = 1.0 - lr * mhat / (vhat.sqrt() + eps);
        assert!((store.values()[0].item() - expected).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut store = one_param(0.0);
        let mut adam = AdamState::new(cfg, &store);
        let norm = adam.step(&mut store, &[Tensor::scalar(100.0)]).unwrap();
        assert_eq!(norm, 100.0);
        assert!((adam.first_moment[0].item() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut store = one_param(0.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let bad = Tensor::zeros(&[2]);
        assert!(adam.step(&mut store, &[bad]).is_err());
        assert!(adam.step(&mut store, &[]).is_err());
    }
}
