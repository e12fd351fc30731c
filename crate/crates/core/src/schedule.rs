//! Per-timestep diffusion constants.
//!
//! Index `t` runs over `1..=T`; slot 0 of every per-step array is unused
//! except `alpha_bar[0] = 1`, which marks clean data.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    omega: Vec<f64>,
    lambda: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β schedule with `α_t = 1 − β_t`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("diffusion.T must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_alphas(betas.iter().map(|b| 1.0 - b).collect())
    }

    /// Builds the schedule from per-step `α_1..α_T`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::config("empty alpha sequence"));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::config("every alpha must lie in (0, 1)"));
        }
        let steps = alphas.len();
        let mut alpha = vec![f64::NAN; steps + 1];
        alpha[1..].copy_from_slice(&alphas);
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut sigma = vec![0.0; steps + 1];
        let mut omega = vec![0.0; steps + 1];
        let mut lambda = vec![f64::INFINITY; steps + 1];
        for t in 1..=steps {
            let var = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * (1.0 - alpha[t]);
            sigma[t] = var.sqrt();
            // σ_1 = 0 makes the weight singular; use the upper variance 1 − α_1 there.
            let var_w = if t == 1 { 1.0 - alpha[1] } else { var };
            omega[t] = (1.0 - alpha[t]).powi(2) / (2.0 * var_w * alpha[t] * (1.0 - alpha_bar[t]));
            lambda[t] = 0.5 * (alpha_bar[t] / (1.0 - alpha_bar[t])).ln();
        }
        Ok(NoiseSchedule {
            steps,
            alpha,
            alpha_bar,
            sigma,
            omega,
            lambda,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t`, defined for `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior standard deviation `σ_t`; `σ_1 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn omega(&self, t: usize) -> f64 {
        self.omega[t]
    }

    /// Half log-SNR `λ_t`.
    pub fn lambda(&self, t: usize) -> f64 {
        self.lambda[t]
    }

    /// `√ᾱ_t`, the signal scale.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    /// `√(1 − ᾱ_t)`, the noise scale.
    pub fn noise(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// `x_t = √ᾱ_t x_0 + √(1 − ᾱ_t) ε`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::shape(format!(
                "x0 has dim {}, eps has dim {}",
                x0.len(),
                eps.len()
            )));
        }
        let (a, s) = (self.signal(t), self.noise(t));
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }
}
