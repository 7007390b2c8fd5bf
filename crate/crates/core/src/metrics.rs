//! Distribution-trust metrics on projected features.
//!
//! Samples are mapped through a fixed [`FeatureProjector`] before any moment
//! is taken; every distance here compares Gaussian summaries of those
//! features.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::linalg::{dot, spd_inverse_logdet, sqrtm_psd, sym_eig, GaussianStats, Matrix};
use crate::rng::SeededRng;

pub const DEFAULT_FEATURE_DIM: usize = 4;
pub const FID_CLAMP: f64 = 1e-8;
pub const KL_CLAMP: f64 = 1e-10;
/// Smallest eigenvalue accepted for the reference covariance in KL.
pub const KL_MIN_EIGENVALUE: f64 = 1e-10;
/// Diagonal shift applied to a singular first-argument covariance in KL.
pub const KL_REGULARIZER: f64 = 1e-10;
pub const EPSILON_STATIONARITY: f64 = 1e-10;
const EPSILON_MAX_SWEEPS: usize = 10_000_000;

/// Row-orthonormal `k × d` linear feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProjector {
    proj: Matrix,
}

impl FeatureProjector {
    /// Orthonormalizes the rows of a seeded Gaussian `k × d` matrix.
    pub fn new(k: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::invalid(format!("feature dim {k} must be in 1..={d}")));
        }
        let mut rows: Vec<Vec<f64>> = (0..k).map(|_| rng.normal_vec(d)).collect();
        for i in 0..k {
            // Two Gram-Schmidt passes keep the result orthonormal to ~1e-15.
            for _ in 0..2 {
                for j in 0..i {
                    let c = dot(&rows[i], &rows[j]);
                    let (head, tail) = rows.split_at_mut(i);
                    tail[0].iter_mut().zip(&head[j]).for_each(|(x, q)| *x -= c * q);
                }
            }
            let n = dot(&rows[i], &rows[i]).sqrt();
            if n < 1e-12 {
                return Err(Error::invalid("degenerate projection draw"));
            }
            rows[i].iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self { proj: Matrix::from_rows(&rows)? })
    }

    /// Wraps an explicit matrix after checking `P·Pᵀ = I` within 1e-10.
    pub fn from_matrix(proj: Matrix) -> Result<Self> {
        let gram = proj.matmul(&proj.transpose())?;
        let err = gram.sub(&Matrix::identity(proj.rows()))?.max_abs();
        if err > 1e-10 {
            return Err(Error::invalid(format!("projection rows are not orthonormal (error {err:e})")));
        }
        Ok(Self { proj })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.proj
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.proj.matvec(x)
    }

    /// Projects every row of `samples`.
    pub fn project_rows(&self, samples: &Matrix) -> Result<Matrix> {
        samples.matmul(&self.proj.transpose())
    }
}

fn check_dims(op: &'static str, a: &GaussianStats, b: &GaussianStats) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(op, a.dim(), b.dim()));
    }
    Ok(())
}

fn clamp_tiny_negative(value: f64, tol: f64, what: &str) -> Result<f64> {
    if value >= 0.0 {
        Ok(value)
    } else if value >= -tol {
        Ok(0.0)
    } else {
        Err(Error::invalid(format!("{what} evaluated to {value:e}")))
    }
}

/// `‖μr − μg‖² + tr Σr + tr Σg − 2·tr (Σr^½ Σg Σr^½)^½`.
pub fn fid(real: &GaussianStats, gen: &GaussianStats) -> Result<f64> {
    check_dims("fid", real, gen)?;
    let diff: f64 = real.mean().iter().zip(gen.mean()).map(|(a, b)| (a - b) * (a - b)).sum();
    let root = sqrtm_psd(real.cov())?;
    let inner = root.matmul(gen.cov())?.matmul(&root)?.symmetrized()?;
    let cross = sqrtm_psd(&inner)?.trace();
    let scale = real.cov().trace() + gen.cov().trace();
    let value = diff + scale - 2.0 * cross;
    clamp_tiny_negative(value, FID_CLAMP * scale.max(1.0), "fid")
}

/// `KL(p ‖ q)` between Gaussians.
pub fn kl_gaussian(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    check_dims("kl_gaussian", p, q)?;
    let k = p.dim() as f64;
    let (q_inv, logdet_q) = spd_inverse_logdet(q.cov(), KL_MIN_EIGENVALUE)?;
    let p_eig = sym_eig(p.cov())?;
    let singular = p_eig.values.last().is_some_and(|&l| l <= KL_MIN_EIGENVALUE);
    let shift = if singular { KL_REGULARIZER } else { 0.0 };
    let logdet_p: f64 = p_eig.values.iter().map(|&l| (l.max(0.0) + shift).ln()).sum();

    let trace_term: f64 = (0..p.dim()).map(|i| dot(q_inv.row(i), &p.cov().column(i))).sum();
    let dm: Vec<f64> = q.mean().iter().zip(p.mean()).map(|(a, b)| a - b).collect();
    let maha = dot(&dm, &q_inv.matvec(&dm)?);
    let value = 0.5 * (trace_term + maha - k + logdet_q - logdet_p);
    clamp_tiny_negative(value, KL_CLAMP * k.max(1.0), "kl_gaussian")
}

/// `ε(fid, kl) = a·fid + b·kl` with `a, b ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonModel {
    pub a: f64,
    pub b: f64,
    /// Root-mean-square fit residual over the calibration points.
    pub residual: f64,
}

impl EpsilonModel {
    pub fn eval(&self, fid: f64, kl: f64) -> f64 {
        self.a * fid + self.b * kl
    }
}

/// One `(fid, kl, observed excess loss)` calibration triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub fid: f64,
    pub kl: f64,
    pub excess: f64,
}

/// Objective value after every coordinate-descent sweep (index 0 is the
/// starting point `a = b = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonFit {
    pub model: EpsilonModel,
    pub objective_history: Vec<f64>,
}

/// Nonnegative least squares over the calibration set.
pub fn fit_epsilon(points: &[CalibrationPoint]) -> Result<EpsilonModel> {
    fit_epsilon_traced(points).map(|f| f.model)
}

/// [`fit_epsilon`] plus the per-sweep objective trace.
pub fn fit_epsilon_traced(points: &[CalibrationPoint]) -> Result<EpsilonFit> {
    if points.len() < 2 {
        return Err(Error::invalid(format!("fit_epsilon needs at least 2 points, got {}", points.len())));
    }
    for (i, p) in points.iter().enumerate() {
        for v in [p.fid, p.kl, p.excess] {
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i, value: v });
            }
        }
    }
    let (mut g00, mut g01, mut g11, mut c0, mut c1, mut ee) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        g00 += p.fid * p.fid;
        g01 += p.fid * p.kl;
        g11 += p.kl * p.kl;
        c0 += p.fid * p.excess;
        c1 += p.kl * p.excess;
        ee += p.excess * p.excess;
    }
    let objective = |a: f64, b: f64| (g00 * a * a + 2.0 * g01 * a * b + g11 * b * b - 2.0 * (c0 * a + c1 * b) + ee).max(0.0);
    let tol = EPSILON_STATIONARITY * (g00 + g11).max(1.0);
    let projected = |x: f64, g: f64| if x > 0.0 { g.abs() } else { (-g).max(0.0) };

    let (mut a, mut b) = (0.0_f64, 0.0_f64);
    let mut history = vec![objective(a, b)];
    for _ in 0..EPSILON_MAX_SWEEPS {
        let ga = g00 * a + g01 * b - c0;
        let gb = g01 * a + g11 * b - c1;
        if projected(a, ga).max(projected(b, gb)) <= tol {
            break;
        }
        a = if g00 > 0.0 { ((c0 - g01 * b) / g00).max(0.0) } else { 0.0 };
        b = if g11 > 0.0 { ((c1 - g01 * a) / g11).max(0.0) } else { 0.0 };
        history.push(objective(a, b));
    }
    let rss: f64 = points.iter().map(|p| (a * p.fid + b * p.kl - p.excess).powi(2)).sum();
    Ok(EpsilonFit { model: EpsilonModel { a, b, residual: (rss / points.len() as f64).sqrt() }, objective_history: history })
}

/// Outcome of `E_gen[L] ≤ E_real[L] + ε(fid, kl)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCheck {
    pub epsilon: f64,
    /// `real_loss + ε − gen_loss`.
    pub slack: f64,
    pub satisfied: bool,
}

pub fn risk_bound_check(eps: &EpsilonModel, fid: f64, kl: f64, gen_loss: f64, real_loss: f64) -> Result<RiskCheck> {
    for (index, value) in [fid, kl, gen_loss, real_loss].into_iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite { index, value });
        }
    }
    let epsilon = eps.eval(fid, kl);
    let slack = real_loss + epsilon - gen_loss;
    Ok(RiskCheck { epsilon, slack, satisfied: slack >= 0.0 })
}

/// Multinomial logistic classifier over standardized projected features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    projector: FeatureProjector,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// `classes × (k + 1)`, bias in the last column.
    weights: Matrix,
}

const PROBE_ITERS: usize = 400;
const PROBE_LR: f64 = 0.5;
const PROBE_RIDGE: f64 = 1e-4;

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    z.iter_mut().for_each(|v| *v = (*v - m).exp());
    let s: f64 = z.iter().sum();
    z.iter_mut().for_each(|v| *v /= s);
}

impl LogisticProbe {
    /// Full-batch gradient descent from zero weights; `real[c]` holds class
    /// `c`'s samples as rows.
    pub fn fit(projector: &FeatureProjector, real: &[Matrix]) -> Result<Self> {
        let n_classes = real.len();
        if n_classes < 2 {
            return Err(Error::invalid("probe needs at least 2 classes"));
        }
        let feats = real.iter().map(|m| projector.project_rows(m)).collect::<Result<Vec<_>>>()?;
        let k = projector.feature_dim();
        let n: usize = feats.iter().map(Matrix::rows).sum();
        let mut center = vec![0.0; k];
        for f in &feats {
            for r in 0..f.rows() {
                center.iter_mut().zip(f.row(r)).for_each(|(c, x)| *c += x);
            }
        }
        center.iter_mut().for_each(|c| *c /= n as f64);
        let mut scale = vec![0.0; k];
        for f in &feats {
            for r in 0..f.rows() {
                scale.iter_mut().zip(f.row(r)).zip(&center).for_each(|((s, x), c)| *s += (x - c) * (x - c));
            }
        }
        scale.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt().max(1e-12));

        let mut probe = Self { projector: projector.clone(), center, scale, weights: Matrix::zeros(n_classes, k + 1) };
        let data: Vec<(Vec<f64>, usize)> =
            feats.iter().enumerate().flat_map(|(c, f)| (0..f.rows()).map(move |r| (c, f.row(r).to_vec()))).map(|(c, z)| (probe.standardize(&z), c)).collect();

        let mut grad = Matrix::zeros(n_classes, k + 1);
        let mut logits = vec![0.0; n_classes];
        for _ in 0..PROBE_ITERS {
            grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            for (x, label) in &data {
                probe.logits_into(x, &mut logits);
                softmax_in_place(&mut logits);
                for (c, p) in logits.iter().enumerate() {
                    let err = p - if c == *label { 1.0 } else { 0.0 };
                    for (j, xj) in x.iter().chain(std::iter::once(&1.0)).enumerate() {
                        grad.set(c, j, grad.get(c, j) + err * xj);
                    }
                }
            }
            let inv_n = 1.0 / n as f64;
            for (w, g) in probe.weights.data_mut().iter_mut().zip(grad.data()) {
                *w -= PROBE_LR * (g * inv_n + PROBE_RIDGE * *w);
            }
        }
        Ok(probe)
    }

    fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.center).zip(&self.scale).map(|((x, c), s)| (x - c) / s).collect()
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let k = x.len();
        for (c, o) in out.iter_mut().enumerate() {
            let row = self.weights.row(c);
            *o = dot(&row[..k], x) + row[k];
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    /// Predicted class for one raw (unprojected) sample.
    pub fn predict(&self, sample: &[f64]) -> Result<usize> {
        let x = self.standardize(&self.projector.project(sample)?);
        let mut logits = vec![0.0; self.n_classes()];
        self.logits_into(&x, &mut logits);
        // First maximum wins so ties are deterministic.
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// Fraction of rows of `samples[c]` classified as `c`, per class and overall.
    pub fn accuracy(&self, samples: &[Matrix]) -> Result<(Vec<f64>, f64)> {
        let mut per = Vec::with_capacity(samples.len());
        let (mut hits, mut total) = (0usize, 0usize);
        for (c, m) in samples.iter().enumerate() {
            let mut h = 0;
            for r in 0..m.rows() {
                if self.predict(m.row(r))? == c {
                    h += 1;
                }
            }
            per.push(if m.rows() > 0 { h as f64 / m.rows() as f64 } else { 0.0 });
            hits += h;
            total += m.rows();
        }
        Ok((per, if total > 0 { hits as f64 / total as f64 } else { 0.0 }))
    }
}

/// Probe accuracies: on generated samples (overall and per conditioning
/// class) and on the real samples it was fit to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub per_domain: Vec<f64>,
    pub real_accuracy: f64,
}

pub const PROBE_MIN_SAMPLES: usize = 10;

/// Fits a probe on `real[c]` and scores `gen[c]` against label `c`.
pub fn probe_faithfulness(projector: &FeatureProjector, real: &[Matrix], gen: &[Matrix]) -> Result<ProbeResult> {
    if real.len() < 2 || real.len() != gen.len() {
        return Err(Error::invalid(format!("probe needs >= 2 matching classes, got {} real and {} generated", real.len(), gen.len())));
    }
    for (c, (r, g)) in real.iter().zip(gen).enumerate() {
        if r.rows() < PROBE_MIN_SAMPLES || g.rows() < PROBE_MIN_SAMPLES {
            return Err(Error::invalid(format!("class {c} has {} real and {} generated samples (need {PROBE_MIN_SAMPLES} each)", r.rows(), g.rows())));
        }
    }
    let probe = LogisticProbe::fit(projector, real)?;
    let (per_domain, accuracy) = probe.accuracy(gen)?;
    let (_, real_accuracy) = probe.accuracy(real)?;
    Ok(ProbeResult { accuracy, per_domain, real_accuracy })
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Domain column value for rows aggregated over every domain.
pub const POOLED: &str = "pooled";
pub const CSV_COLUMNS: [&str; 9] = ["model", "domain", "denoise_loss", "d_fid", "d_kl", "epsilon", "slack", "bound_satisfied", "probe_accuracy"];

/// One `(model, domain)` evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub domain: String,
    pub denoise_loss: f64,
    pub d_fid: f64,
    pub d_kl: f64,
    pub epsilon: f64,
    pub slack: f64,
    pub bound_satisfied: bool,
    pub probe_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub seed: u64,
    pub domains: Vec<Domain>,
    pub rows: Vec<ReportRow>,
    pub epsilon_model: EpsilonModel,
    /// Fraction of per-domain rows whose held-out bound check holds.
    pub bound_fraction_satisfied: f64,
    /// Probe accuracy on the real samples it was fit to.
    pub probe_real_accuracy: f64,
    /// Per-layer `‖B*A* − mean(B_t A_t)‖_F`.
    pub merge_discrepancy: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// Checks nonnegative distances and accuracies within `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            let ok = row.d_fid >= 0.0 && row.d_kl >= 0.0 && (0.0..=1.0).contains(&row.probe_accuracy) && row.denoise_loss.is_finite();
            if !ok {
                return Err(Error::invalid(format!("report row {}/{} out of range", row.model, row.domain)));
            }
        }
        if !(0.0..=1.0).contains(&self.bound_fraction_satisfied) || self.epsilon_model.a < 0.0 || self.epsilon_model.b < 0.0 {
            return Err(Error::invalid("report summary out of range"));
        }
        Ok(())
    }

    pub fn row(&self, model: &str, domain: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.domain == domain)
    }

    /// Flattens the rows to CSV with [`CSV_COLUMNS`] as the header.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.model, r.domain, r.denoise_loss, r.d_fid, r.d_kl, r.epsilon, r.slack, r.bound_satisfied, r.probe_accuracy
            );
        }
        out
    }
}
