use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// Per-group dense maps `group_dim -> code_dim -> group_dim` around the lookup.
    Factorized,
    /// Lookup directly in latent space; requires `code_dim == group_dim`.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VQConfig {
    pub n_residual: usize,
    pub n_group: usize,
    pub n_codes: usize,
    pub code_dim: usize,
    pub latent_dim: usize,
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_projection")]
    pub projection: Projection,
    #[serde(default = "default_commitment")]
    pub commitment_weight: f64,
    /// Consecutive unused updates before a code is re-seeded; `None` disables.
    #[serde(default = "default_dead")]
    pub dead_code_threshold: Option<u32>,
    /// Laplace smoothing constant for cluster sizes.
    #[serde(default = "default_eps")]
    pub epsilon: f64,
}

fn default_decay() -> f64 {
    0.8
}
fn default_projection() -> Projection {
    Projection::Factorized
}
fn default_commitment() -> f64 {
    0.25
}
fn default_dead() -> Option<u32> {
    Some(20)
}
fn default_eps() -> f64 {
    1e-5
}

impl VQConfig {
    pub fn new(n_residual: usize, n_group: usize, n_codes: usize, code_dim: usize, latent_dim: usize) -> Self {
        Self {
            n_residual,
            n_group,
            n_codes,
            code_dim,
            latent_dim,
            ema_decay: default_decay(),
            projection: default_projection(),
            commitment_weight: default_commitment(),
            dead_code_threshold: default_dead(),
            epsilon: default_eps(),
        }
    }

    pub fn group_dim(&self) -> usize {
        self.latent_dim / self.n_group.max(1)
    }

    pub fn n_codebooks(&self) -> usize {
        self.n_group * self.n_residual
    }

    /// Flat codebook index for group `g`, residual round `r`.
    pub fn codebook_index(&self, g: usize, r: usize) -> usize {
        g * self.n_residual + r
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("quantizer: {m}")));
        if self.n_residual == 0 || self.n_group == 0 {
            return fail("n_residual and n_group must be >= 1".into());
        }
        if self.n_codes < 2 {
            return fail(format!("n_codes must be >= 2, got {}", self.n_codes));
        }
        if self.code_dim == 0 || self.latent_dim == 0 {
            return fail("code_dim and latent_dim must be >= 1".into());
        }
        if self.latent_dim % self.n_group != 0 {
            return fail(format!(
                "latent_dim {} not divisible by n_group {}",
                self.latent_dim, self.n_group
            ));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if self.projection == Projection::Identity && self.code_dim != self.group_dim() {
            return fail(format!(
                "identity projection requires code_dim == latent_dim / n_group ({} != {})",
                self.code_dim,
                self.group_dim()
            ));
        }
        if !(self.commitment_weight >= 0.0) || !(self.epsilon > 0.0) {
            return fail("commitment_weight must be >= 0 and epsilon > 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(VQConfig::new(2, 2, 16, 8, 32).validate().is_ok());
        assert!(VQConfig::new(0, 1, 16, 8, 32).validate().is_err());
        assert!(VQConfig::new(1, 3, 16, 8, 32).validate().is_err());
        assert!(VQConfig::new(1, 1, 1, 8, 32).validate().is_err());
        let mut c = VQConfig::new(1, 1, 16, 8, 32);
        c.projection = Projection::Identity;
        assert!(c.validate().is_err());
        c.code_dim = 32;
        assert!(c.validate().is_ok());
        c.ema_decay = 1.0;
        assert!(c.validate().is_err());
    }
}
