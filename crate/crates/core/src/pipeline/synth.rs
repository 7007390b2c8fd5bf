//! Seeded ground-truth mixtures standing in for an image generator, and the
//! `(prompt, sample)` dataset drawn from them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, GaussianStats, Matrix};
use crate::promptbank::PromptRecord;
use crate::rng::SeededRng;

use super::config::PipelineConfig;

/// Gaussian mixture parameters as they appear in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Matrix>,
}

impl MixtureSpec {
    /// Single component with covariance `variance · I`.
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        Self { weights: vec![1.0], means: vec![mean], covs: vec![Matrix::identity(d).scale(variance)] }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let n = self.weights.len();
        if n == 0 || self.means.len() != n || self.covs.len() != n {
            return Err(Error::invalid(format!("{} weights, {} means, {} covs", n, self.means.len(), self.covs.len())));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be nonnegative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("weights sum to {total}, not 1")));
        }
        for (m, c) in self.means.iter().zip(&self.covs) {
            if m.len() != dim || c.shape() != (dim, dim) {
                return Err(Error::shape("mixture component", dim, format!("{} / {}x{}", m.len(), c.rows(), c.cols())));
            }
            GaussianStats::new(m.clone(), c.clone())?;
        }
        Ok(())
    }
}

/// A validated mixture with precomputed covariance factors.
#[derive(Debug, Clone)]
pub struct Mixture {
    spec: MixtureSpec,
    factors: Vec<Matrix>,
}

impl Mixture {
    pub fn new(spec: MixtureSpec) -> Result<Self> {
        let dim = spec.means.first().map_or(0, Vec::len);
        spec.validate(dim)?;
        let factors = spec.covs.iter().map(psd_factor).collect::<Result<_>>()?;
        Ok(Self { spec, factors })
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.means[0].len()
    }

    /// Draws a component by weight, then `μ_c + L_c·ξ`.
    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = self.spec.weights.len() - 1;
        for (i, w) in self.spec.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = i;
                break;
            }
        }
        let xi = rng.normal_vec(self.dim());
        let lx = self.factors[pick].matvec(&xi).expect("factor matches dim");
        self.spec.means[pick].iter().zip(lx).map(|(m, v)| m + v).collect()
    }

    /// `n` draws, one per row.
    pub fn sample_n(&self, n: usize, rng: &mut SeededRng) -> Matrix {
        let data = (0..n).flat_map(|_| self.sample(rng)).collect();
        Matrix::new(n, self.dim(), data).expect("rows have dim entries")
    }

    /// Exact mixture mean and covariance.
    pub fn moments(&self) -> Result<GaussianStats> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, m) in self.spec.weights.iter().zip(&self.spec.means) {
            mean.iter_mut().zip(m).for_each(|(a, x)| *a += w * x);
        }
        let mut cov = Matrix::zeros(d, d);
        for ((w, m), c) in self.spec.weights.iter().zip(&self.spec.means).zip(&self.spec.covs) {
            for i in 0..d {
                for j in 0..d {
                    let v = cov.get(i, j) + w * (c.get(i, j) + (m[i] - mean[i]) * (m[j] - mean[j]));
                    cov.set(i, j, v);
                }
            }
        }
        GaussianStats::new(mean, cov)
    }
}

/// Point uniform in the `d`-ball of `radius`.
fn ball_point(d: usize, radius: f64, rng: &mut SeededRng) -> Vec<f64> {
    let mut dir = rng.normal_vec(d);
    let n = crate::linalg::norm(&dir).max(f64::MIN_POSITIVE);
    let r = radius * rng.uniform().powf(1.0 / d as f64);
    dir.iter_mut().for_each(|x| *x *= r / n);
    dir
}

/// One mixture per configured domain: explicit specs where given, otherwise
/// equal-weight components with seeded means and `variance · I` covariances.
pub fn resolve_mixtures(cfg: &PipelineConfig) -> Result<BTreeMap<Domain, Mixture>> {
    let mut out = BTreeMap::new();
    for &domain in &cfg.domains {
        let spec = match cfg.mixtures.get(&domain) {
            Some(spec) => spec.clone(),
            None => {
                let mut rng = SeededRng::labeled(cfg.seed, &format!("mixture/{domain}"));
                let k = cfg.mixture_components;
                MixtureSpec {
                    weights: vec![1.0 / k as f64; k],
                    means: (0..k).map(|_| ball_point(cfg.data_dim, cfg.mixture_radius, &mut rng)).collect(),
                    covs: vec![Matrix::identity(cfg.data_dim).scale(cfg.mixture_variance); k],
                }
            }
        };
        if spec.means.first().map(Vec::len) != Some(cfg.data_dim) {
            return Err(Error::invalid(format!("mixture for {domain} does not match data_dim")));
        }
        out.insert(domain, Mixture::new(spec)?);
    }
    Ok(out)
}

/// A training sample paired with the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPair {
    pub prompt_id: u64,
    pub domain: Domain,
    pub sample: Vec<f64>,
}

/// One sample per retained prompt, drawn from its domain's mixture in bank
/// order.
pub fn synth_dataset(bank: &[PromptRecord], mixtures: &BTreeMap<Domain, Mixture>, rng: &mut SeededRng) -> Result<Vec<SynthPair>> {
    let retained: Vec<&PromptRecord> = bank.iter().filter(|r| r.is_retained()).collect();
    if retained.is_empty() {
        return Err(Error::invalid("prompt bank has no retained prompts"));
    }
    retained
        .into_iter()
        .map(|r| {
            let mix = mixtures.get(&r.domain).ok_or_else(|| Error::UnknownDomain(r.domain.to_string()))?;
            Ok(SynthPair { prompt_id: r.id, domain: r.domain, sample: mix.sample(rng) })
        })
        .collect()
}

pub fn write_pairs<W: Write>(mut w: W, pairs: &[SynthPair]) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn read_pairs<R: BufRead>(r: R) -> Result<Vec<SynthPair>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
