use grlb_tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Value range x̂₀ is clamped to before de-normalization.
pub const X0_CLAMP: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear β schedule with cumulative products. Index 0 is the clean
/// signal (ᾱ₀ = 1); valid diffusion steps are 1..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let t = cfg.timesteps;
        if t == 0 {
            return Err(CoreError::Config("schedule needs at least one timestep".into()));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0) && t > 1 {
            return Err(CoreError::Config(format!(
                "need 0 < beta_start < beta_end < 1, got {} and {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let mut betas = vec![0.0];
        let mut alpha_bars = vec![1.0];
        for k in 0..t {
            let frac = if t > 1 { k as f64 / (t - 1) as f64 } else { 0.0 };
            let beta = cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start);
            betas.push(beta);
            alpha_bars.push(alpha_bars[k] * (1.0 - beta));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(CoreError::Timestep {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// ᾱ_t for 0 ≤ t ≤ T, with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Loss weight per timestep; uniform.
    pub fn weight(&self, _t: usize) -> f64 {
        1.0
    }

    /// S timesteps spread evenly over 1..=T, ascending.
    pub fn respaced(&self, steps: usize) -> Vec<usize> {
        let t = self.timesteps();
        let mut out: Vec<usize> = (1..=steps).map(|k| ((k * t) as f64 / steps as f64).round() as usize).collect();
        out.dedup();
        out.retain(|&s| s >= 1);
        out
    }
}

/// x_t = √ᾱ_t · x₀ + √(1−ᾱ_t) · ε.
pub fn q_sample<T: Elem>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check(t)?;
    q_sample_at(x0, t, eps, schedule)
}

/// As [`q_sample`] but also accepts t = 0 (returns x₀).
pub(crate) fn q_sample_at<T: Elem>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(CoreError::Shape(format!("q_sample: {:?} vs {:?}", x0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t, clamped to ±[`X0_CLAMP`].
pub fn predict_x0<T: Elem>(x_t: &Tensor<T>, t: usize, eps_hat: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    schedule.check(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(CoreError::Shape(format!("predict_x0: {:?} vs {:?}", x_t.shape(), eps_hat.shape())));
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let lim = X0_CLAMP;
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| T::from_f64(((x.to_f64() - sb * e.to_f64()) / sa).clamp(-lim, lim)))
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data)?)
}
