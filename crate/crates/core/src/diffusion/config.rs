use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry, noise schedule bounds and denoiser sizes of the desk-scale model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub image_side: usize,
    pub prompt_vocab: Vec<String>,
    pub hidden_dim: usize,
    pub time_embed_dim: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.08,
            image_side: 16,
            prompt_vocab: vec!["circle".into(), "square".into(), "cross".into()],
            // 256 units cannot fit the three-class task in 3000 steps
            hidden_dim: 1536,
            time_embed_dim: 32,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_betas(self.timesteps, self.beta_start, self.beta_end)?;
        if self.image_side < 4 {
            return Err(Error::Config(format!(
                "image_side must be >= 4, got {}",
                self.image_side
            )));
        }
        if self.prompt_vocab.is_empty() {
            return Err(Error::Config("prompt_vocab must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for token in &self.prompt_vocab {
            if !seen.insert(token) {
                return Err(Error::Config(format!("prompt_vocab repeats token {token:?}")));
            }
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be a positive even number, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn prompt_index(&self, token: &str) -> Result<usize> {
        self.prompt_vocab
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }
}

pub(crate) fn check_betas(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<()> {
    if timesteps < 2 {
        return Err(Error::Config(format!("timesteps must be >= 2, got {timesteps}")));
    }
    if !(beta_start > 0.0) {
        return Err(Error::Config(format!("beta_start must be > 0, got {beta_start}")));
    }
    if !(beta_start < beta_end) {
        return Err(Error::Config(format!(
            "beta_start ({beta_start}) must be < beta_end ({beta_end})"
        )));
    }
    if !(beta_end < 1.0) {
        return Err(Error::Config(format!("beta_end must be < 1, got {beta_end}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        DiffusionConfig::default().validate().unwrap();
    }

    #[test]
    fn bounds_are_named() {
        let mut cfg = DiffusionConfig {
            timesteps: 2,
            beta_start: 0.01,
            beta_end: 0.01,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("beta_start"), "{err}");

        cfg.beta_end = 1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("beta_end"));

        cfg.beta_end = 0.5;
        cfg.image_side = 3;
        assert!(cfg.validate().unwrap_err().to_string().contains("image_side"));

        cfg.image_side = 16;
        cfg.prompt_vocab = vec!["a".into(), "a".into()];
        assert!(cfg.validate().unwrap_err().to_string().contains("repeats"));

        cfg.prompt_vocab.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_step_rejected() {
        let cfg = DiffusionConfig {
            timesteps: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
