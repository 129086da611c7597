use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Elem = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Elem> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| p.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One bias-corrected Adam update. Nothing is modified when any gradient
    /// holds a non-finite value.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::Checkpoint(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient { name: name.to_string() });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Elem>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_slice(vec![values.len()], values).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &[Tensor::zeros(vec![3])]).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_each_coordinate_by_about_lr() {
        // Bias-corrected first step: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
        let grads = [0.5, -3.0, 1e-2];
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        s.step(&mut p, &[Tensor::from_slice(vec![3], &grads).unwrap()]).unwrap();
        for (w, g) in p.tensors()[0].data().iter().zip(grads) {
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        }
    }

    #[test]
    fn two_steps_follow_the_moment_recurrence() {
        let g = 0.4;
        let mut p = store(&[1.0]);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let gt = Tensor::from_slice(vec![1], &[g]).unwrap();
        s.step(&mut p, &[gt.clone()]).unwrap();
        s.step(&mut p, &[gt]).unwrap();
        assert_eq!(s.step, 2);
        let m1 = 0.1 * g;
        let v1 = 0.001 * g * g;
        let m2 = 0.9 * m1 + 0.1 * g;
        let v2 = 0.999 * v1 + 0.001 * g * g;
        assert!((s.m[0].data()[0] - m2).abs() < 1e-15);
        assert!((s.v[0].data()[0] - v2).abs() < 1e-15);
        let step2 = 1e-3 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let step1 = 1e-3 * g / (g + 1e-8);
        assert!((p.tensors()[0].data()[0] - (1.0 - step1 - step2)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = store(&[1.0]);
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let err = s
            .step(&mut p, &[Tensor::from_slice(vec![1], &[f64::NAN]).unwrap()])
            .unwrap_err();
        match err {
            TensorError::NonFiniteGradient { name } => assert_eq!(name, "w"),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::from_slice(vec![2], &[3.0f64, 4.0]).unwrap()];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    }
}
