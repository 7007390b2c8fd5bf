use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::experts::TrainConfig;
use crate::net::MlpDenoiser;
use crate::promptbank::{DEFAULT_DELTA, DEFAULT_TAU};

use super::synth::MixtureSpec;

/// Every knob of a run. Missing JSON fields take the [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Dimension of the synthetic samples.
    pub data_dim: usize,
    /// Expert domains, in conditioning order.
    pub domains: Vec<Domain>,

    /// Components per seeded domain mixture.
    pub mixture_components: usize,
    /// Seeded component means are drawn uniformly from a ball of this radius.
    pub mixture_radius: f64,
    /// Seeded components use `variance · I`.
    pub mixture_variance: f64,
    /// Explicit mixtures; domains listed here skip the seeded draw.
    pub mixtures: BTreeMap<Domain, MixtureSpec>,

    /// Grammar prompts generated per domain before filtering.
    pub prompts_per_domain: usize,
    /// Seed the bank with the bundled showcase prompts.
    pub include_showcase_prompts: bool,
    /// ROUGE-L rejection threshold.
    pub tau: f64,
    /// Embedding-cosine rejection threshold.
    pub delta: f64,

    pub hidden: Vec<usize>,
    pub rank: usize,
    pub lambda: f64,
    /// Adapted layers; `None` adapts every hidden-to-hidden layer.
    pub adapted_layers: Option<Vec<String>>,
    pub batch_size: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub expert_steps: usize,
    pub expert_lr: f64,
    /// Loss-log stride for training curves.
    pub log_every: usize,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    /// Projected feature dimension for all trust metrics.
    pub feature_dim: usize,
    /// Fresh real samples per domain for evaluation.
    pub eval_real_samples: usize,
    /// Generated samples per (model, domain) in each of the calibration and
    /// held-out sets.
    pub eval_gen_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data_dim: 8,
            domains: Domain::ALL.to_vec(),
            mixture_components: 2,
            mixture_radius: 4.0,
            mixture_variance: 0.25,
            mixtures: BTreeMap::new(),
            prompts_per_domain: 400,
            include_showcase_prompts: true,
            tau: DEFAULT_TAU,
            delta: DEFAULT_DELTA,
            hidden: vec![64, 64, 64],
            rank: 4,
            lambda: 1e-4,
            adapted_layers: None,
            batch_size: 32,
            pretrain_batch_size: 32,
            pretrain_steps: 2000,
            pretrain_lr: 3e-2,
            expert_steps: 2000,
            expert_lr: 3e-4,
            log_every: 20,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            feature_dim: 4,
            eval_real_samples: 400,
            eval_gen_samples: 200,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&canonical)))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data_dim", self.data_dim),
            ("mixture_components", self.mixture_components),
            ("prompts_per_domain", self.prompts_per_domain),
            ("rank", self.rank),
            ("batch_size", self.batch_size),
            ("pretrain_batch_size", self.pretrain_batch_size),
            ("log_every", self.log_every),
            ("diffusion_steps", self.diffusion_steps),
            ("feature_dim", self.feature_dim),
            ("eval_real_samples", self.eval_real_samples),
            ("eval_gen_samples", self.eval_gen_samples),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("at least one domain is required"));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].contains(d) {
                return Err(Error::invalid(format!("domain {d} listed twice")));
            }
        }
        for (name, v) in [("tau", self.tau), ("delta", self.delta)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        for (name, v) in [("mixture_radius", self.mixture_radius), ("pretrain_lr", self.pretrain_lr), ("expert_lr", self.expert_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.mixture_variance.is_finite() && self.mixture_variance >= 0.0) {
            return Err(Error::invalid("mixture_variance must be nonnegative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be nonnegative"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be a nonempty list of positive sizes"));
        }
        if self.feature_dim > self.data_dim {
            return Err(Error::invalid("feature_dim cannot exceed data_dim"));
        }
        if self.eval_real_samples < 2 || self.eval_gen_samples < 2 {
            return Err(Error::invalid("evaluation needs at least 2 samples per set"));
        }
        if self.rank > self.hidden.iter().copied().min().unwrap_or(0) {
            return Err(Error::invalid("rank exceeds the narrowest hidden layer"));
        }
        for (d, spec) in &self.mixtures {
            spec.validate(self.data_dim).map_err(|e| Error::invalid(format!("mixture for {d}: {e}")))?;
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    /// Untrained base denoiser conditioned on `domains.len()` classes.
    pub fn init_model(&self, rng: &mut crate::rng::SeededRng) -> Result<MlpDenoiser> {
        MlpDenoiser::new(self.data_dim, self.domains.len(), &self.hidden, rng)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            lambda: 0.0,
            rank: self.rank,
            layers: None,
            log_every: self.log_every,
        }
    }

    pub fn expert_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.expert_steps,
            batch_size: self.batch_size,
            lr: self.expert_lr,
            lambda: self.lambda,
            rank: self.rank,
            layers: self.adapted_layers.clone(),
            log_every: self.log_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let json = cfg.to_json().unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_ne!(partial.hash().unwrap(), cfg.hash().unwrap());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            PipelineConfig { tau: 0.0, ..Default::default() },
            PipelineConfig { delta: 1.5, ..Default::default() },
            PipelineConfig { batch_size: 0, ..Default::default() },
            PipelineConfig { domains: vec![], ..Default::default() },
            PipelineConfig { domains: vec![Domain::Implausible, Domain::Implausible], ..Default::default() },
            PipelineConfig { feature_dim: 9, ..Default::default() },
            PipelineConfig { rank: 65, ..Default::default() },
            PipelineConfig {
                mixtures: BTreeMap::from([(
                    Domain::Implausible,
                    MixtureSpec { weights: vec![0.5, 0.4], means: vec![vec![0.0; 8]; 2], covs: vec![Matrix::identity(8); 2] },
                )]),
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
