use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear variance schedule. Step `t` runs from 1 to `T`; arrays are
/// indexed by `t - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            timesteps,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Linear schedule from 1e-4 to 0.02.
    pub fn standard(timesteps: usize) -> Result<Self> {
        NoiseSchedule::linear(timesteps, 1e-4, 0.02)
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.timesteps {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.timesteps
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `ᾱ_{t-1}` with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Reverse-step standard deviation at `t`.
    pub fn sigma(&self, t: usize, variance: ReverseVariance) -> f64 {
        match variance {
            ReverseVariance::Beta => self.beta(t).sqrt(),
            ReverseVariance::Posterior => {
                let ratio = (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t));
                (ratio * self.beta(t)).sqrt()
            }
        }
    }
}

/// Choice of reverse-process variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

/// Closed-form marginal of the forward chain:
/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
///
/// Composing `q(x_t | x_{t-1}) = N(√α_t x_{t-1}, β_t I)` gives mean
/// `√(∏α) x0` and variance `1 − ∏α`, hence this form.
pub fn forward_diffuse(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    let i = schedule.check(t)?;
    if x0.len() != eps.len() {
        return Err(Error::shape("forward_diffuse", &[x0.len()], &[eps.len()]));
    }
    let a = schedule.alpha_bars[i].sqrt();
    let s = (1.0 - schedule.alpha_bars[i]).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// One step of the forward chain: `x_t = √α_t · x_{t-1} + √β_t · noise`.
pub fn forward_step(schedule: &NoiseSchedule, x_prev: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    let i = schedule.check(t)?;
    if x_prev.len() != noise.len() {
        return Err(Error::shape("forward_step", &[x_prev.len()], &[noise.len()]));
    }
    let a = schedule.alphas[i].sqrt();
    let s = schedule.betas[i].sqrt();
    Ok(x_prev.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
}
