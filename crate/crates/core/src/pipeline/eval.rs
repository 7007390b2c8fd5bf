//! Evaluation of base, merged and per-domain expert models against fresh
//! draws from the ground-truth mixtures.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::diffusion::{denoise_mse, generate, noise_batch, Condition, NoiseSchedule, NoisedBatch};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::experts::{merge_discrepancy, ExpertSet, MERGED_LABEL};
use crate::linalg::{gaussian_fit, GaussianStats, Matrix};
use crate::metrics::{
    fid, fit_epsilon, kl_gaussian, risk_bound_check, CalibrationPoint, FeatureProjector, LogisticProbe, MetricsReport, ReportRow, POOLED, REPORT_SCHEMA_VERSION,
};
use crate::net::MlpDenoiser;
use crate::rng::SeededRng;

use super::checkpoint::Checkpoint;
use super::config::PipelineConfig;
use super::synth::resolve_mixtures;

pub const BASE_MODEL: &str = "base";

/// Generated coordinates beyond this magnitude mean the sampler diverged; the
/// data itself lives within a few units of the origin.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Report name of a domain expert.
pub fn expert_model_name(domain: Domain) -> String {
    format!("expert:{domain}")
}

fn stack(ms: &[Matrix]) -> Result<Matrix> {
    let cols = ms.first().map_or(0, Matrix::cols);
    let rows = ms.iter().map(Matrix::rows).sum();
    let data = ms.iter().flat_map(|m| m.data().iter().copied()).collect();
    Matrix::new(rows, cols, data)
}

fn rows_of(m: &Matrix) -> Vec<&[f64]> {
    (0..m.rows()).map(|r| m.row(r)).collect()
}

/// Noises every row of `samples` under `cond` with the domain's fixed noise
/// stream, so real and generated sets see identical `(t, ε)` draws.
fn noised(samples: &Matrix, cond: Condition, sched: &NoiseSchedule, seed: u64, domain: Domain) -> Result<NoisedBatch> {
    let items: Vec<(&[f64], Condition)> = rows_of(samples).into_iter().map(|r| (r, cond)).collect();
    noise_batch(&items, sched, &mut SeededRng::labeled(seed, &format!("eval/noise/{domain}")))
}

struct Stats {
    fid: f64,
    kl: f64,
}

fn discrepancy(projector: &FeatureProjector, real: &GaussianStats, gen: &Matrix) -> Result<Stats> {
    let g = gaussian_fit(&projector.project_rows(gen)?)?;
    Ok(Stats { fid: fid(real, &g)?, kl: kl_gaussian(real, &g)? })
}

/// Per-domain generated sets for one model.
struct Generated {
    calibration: Vec<Matrix>,
    held_out: Vec<Matrix>,
}

fn generate_sets(model: &MlpDenoiser, name: &str, cfg: &PipelineConfig, sched: &NoiseSchedule) -> Result<Generated> {
    let n_dom = cfg.domains.len();
    let mut out = Generated { calibration: Vec::with_capacity(n_dom), held_out: Vec::with_capacity(n_dom) };
    for (i, d) in cfg.domains.iter().enumerate() {
        let cond = Condition::new(i, n_dom)?;
        for (set, dst) in [("calibration", &mut out.calibration), ("held-out", &mut out.held_out)] {
            let mut rng = SeededRng::labeled(cfg.seed, &format!("eval/gen/{set}/{name}/{d}"));
            let samples = generate(model, cond, cfg.eval_gen_samples, sched, &mut rng)?;
            if let Some(v) = samples.data().iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(Error::invalid(format!("model `{name}` diverged while sampling {d} (value {v:e})")));
            }
            dst.push(samples);
        }
    }
    Ok(out)
}

/// Scores every model in `ckpt` and assembles the report. Models are the
/// base, `merged` and one expert per configured domain.
pub fn evaluate(cfg: &PipelineConfig, ckpt: &Checkpoint) -> Result<MetricsReport> {
    let sched = ckpt.schedule.build()?;
    let mixtures = resolve_mixtures(cfg)?;
    let n_dom = cfg.domains.len();
    let projector = FeatureProjector::new(cfg.feature_dim, cfg.data_dim, &mut SeededRng::labeled(cfg.seed, "eval/projector"))?;

    let mut real = Vec::with_capacity(n_dom);
    let mut real_batches = Vec::with_capacity(n_dom);
    let mut real_stats = Vec::with_capacity(n_dom);
    for (i, &d) in cfg.domains.iter().enumerate() {
        let mix = mixtures.get(&d).ok_or_else(|| Error::UnknownDomain(d.to_string()))?;
        let samples = mix.sample_n(cfg.eval_real_samples, &mut SeededRng::labeled(cfg.seed, &format!("eval/real/{d}")));
        real_batches.push(noised(&samples, Condition::new(i, n_dom)?, &sched, cfg.seed, d)?);
        real_stats.push(gaussian_fit(&projector.project_rows(&samples)?)?);
        real.push(samples);
    }
    let pooled_real_stats = gaussian_fit(&projector.project_rows(&stack(&real)?)?)?;

    let mut models: Vec<(String, MlpDenoiser)> = vec![(BASE_MODEL.to_string(), ckpt.base.clone()), (MERGED_LABEL.to_string(), ckpt.model(MERGED_LABEL)?)];
    for &d in &cfg.domains {
        models.push((expert_model_name(d), ckpt.model(d.label())?));
    }

    let generated: Vec<Generated> = std::thread::scope(|s| {
        let handles: Vec<_> = models.iter().map(|(name, model)| s.spawn(|| generate_sets(model, name, cfg, &sched))).collect();
        handles.into_iter().map(|h| h.join().expect("generation thread panicked")).collect::<Result<Vec<_>>>()
    })?;

    let base = &ckpt.base;
    let real_base_loss = real_batches.iter().map(|b| denoise_mse(base, b)).collect::<Result<Vec<_>>>()?;
    // Excess loss: how much worse the base model denoises generated samples
    // than real ones under identical noise draws.
    let excess = |gen: &Matrix, i: usize| -> Result<f64> {
        let cond = Condition::new(i, n_dom)?;
        Ok(denoise_mse(base, &noised(gen, cond, &sched, cfg.seed, cfg.domains[i])?)? - real_base_loss[i])
    };

    let mut calibration = Vec::new();
    for gen in &generated {
        for (i, g) in gen.calibration.iter().enumerate() {
            let s = discrepancy(&projector, &real_stats[i], g)?;
            calibration.push(CalibrationPoint { fid: s.fid, kl: s.kl, excess: excess(g, i)? });
        }
    }
    let eps = fit_epsilon(&calibration)?;

    // A single domain leaves nothing to classify: every sample is correct.
    let probe = if n_dom >= 2 { Some(LogisticProbe::fit(&projector, &real)?) } else { None };
    let probe_accuracy = |samples: &[Matrix]| -> Result<(Vec<f64>, f64)> {
        match &probe {
            Some(p) => p.accuracy(samples),
            None => Ok((vec![1.0; samples.len()], 1.0)),
        }
    };
    let (_, probe_real_accuracy) = probe_accuracy(&real)?;

    let mut rows = Vec::new();
    let (mut satisfied, mut checked) = (0usize, 0usize);
    for ((name, model), gen) in models.iter().zip(&generated) {
        let (per_domain_acc, pooled_acc) = probe_accuracy(&gen.held_out)?;
        let mut losses = Vec::with_capacity(n_dom);
        let mut gen_losses = Vec::with_capacity(n_dom);
        for (i, d) in cfg.domains.iter().enumerate() {
            let loss = denoise_mse(model, &real_batches[i])?;
            let s = discrepancy(&projector, &real_stats[i], &gen.held_out[i])?;
            let gen_loss = excess(&gen.held_out[i], i)? + real_base_loss[i];
            let check = risk_bound_check(&eps, s.fid, s.kl, gen_loss, real_base_loss[i])?;
            satisfied += usize::from(check.satisfied);
            checked += 1;
            losses.push(loss);
            gen_losses.push(gen_loss);
            rows.push(ReportRow {
                model: name.clone(),
                domain: d.to_string(),
                denoise_loss: loss,
                d_fid: s.fid,
                d_kl: s.kl,
                epsilon: check.epsilon,
                slack: check.slack,
                bound_satisfied: check.satisfied,
                probe_accuracy: per_domain_acc[i],
            });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let s = discrepancy(&projector, &pooled_real_stats, &stack(&gen.held_out)?)?;
        let check = risk_bound_check(&eps, s.fid, s.kl, mean(&gen_losses), mean(&real_base_loss))?;
        rows.push(ReportRow {
            model: name.clone(),
            domain: POOLED.to_string(),
            denoise_loss: mean(&losses),
            d_fid: s.fid,
            d_kl: s.kl,
            epsilon: check.epsilon,
            slack: check.slack,
            bound_satisfied: check.satisfied,
            probe_accuracy: pooled_acc,
        });
    }

    let experts: BTreeMap<String, _> = cfg
        .domains
        .iter()
        .map(|d| Ok((d.to_string(), ckpt.adapters.get(d.label()).cloned().ok_or_else(|| Error::invalid(format!("no adapters for {d}")))?)))
        .collect::<Result<_>>()?;
    let merge_gap = merge_discrepancy(&ExpertSet::new(ckpt.base.clone(), experts)?)?.into_iter().collect();

    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        domains: cfg.domains.clone(),
        rows,
        epsilon_model: eps,
        bound_fraction_satisfied: satisfied as f64 / checked as f64,
        probe_real_accuracy,
        merge_discrepancy: merge_gap,
    };
    report.validate()?;
    Ok(report)
}

/// Loss curves as `step,domain,loss` rows; the `domain` column carries the
/// log label (`pretrain` or a domain).
pub fn plot_data_csv(ckpt: &Checkpoint) -> String {
    let mut out = String::from("step,domain,loss\n");
    for (label, log) in &ckpt.loss_logs {
        for (step, loss) in log {
            let _ = writeln!(out, "{step},{label},{loss}");
        }
    }
    out
}
