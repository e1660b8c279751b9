use serde::{Deserialize, Serialize};

use super::config::{check_betas, DiffusionConfig};
use crate::error::{Error, Result};

/// Linear variance schedule with cumulative products and posterior variances.
///
/// All per-step vectors are indexed by timestep `t` in `0..=T`; index 0 holds
/// the conventions `alpha_bar[0] = 1`, `beta[0] = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

pub fn make_schedule(config: &DiffusionConfig) -> Result<Schedule> {
    config.validate()?;
    Schedule::linear(config.timesteps, config.beta_start, config.beta_end)
}

impl Schedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        check_betas(timesteps, beta_start, beta_end)?;
        let mut beta = vec![0.0; timesteps + 1];
        for (i, b) in beta.iter_mut().enumerate().skip(1) {
            let frac = (i - 1) as f64 / (timesteps - 1) as f64;
            *b = beta_start + (beta_end - beta_start) * frac;
        }
        let mut alpha_bar = vec![1.0; timesteps + 1];
        for t in 1..=timesteps {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        let mut sigma2 = vec![0.0; timesteps + 1];
        for t in 1..=timesteps {
            sigma2[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
        }
        Ok(Self {
            beta,
            alpha_bar,
            sigma2,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    /// `beta[t] / sqrt(1 - alpha_bar[t])`, the noise coefficient of the reverse mean.
    pub fn eps_coef(&self, t: usize) -> f64 {
        self.beta[t] / (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }
}
