//! Dense row-major matrices, a cyclic Jacobi eigensolver, PSD square roots and
//! Gaussian moment fitting/sampling.
//!
//! Everything here is sized for the small matrices this crate deals with
//! (feature covariances, 64x64 weights); there is no blocking or SIMD.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Tolerance below which a negative eigenvalue is treated as round-off and
/// clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Maximum asymmetry accepted by the symmetric routines.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_TOLERANCE: f64 = 1e-12;

/// Dense row-major matrix of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", format!("{rows}x{cols}"), format!("{} values", data.len())));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", format!("row 0 has {cols} columns"), format!("row {i} has {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Matrix with i.i.d. N(0, std²) entries.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep entries finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape_str(), other.shape_str()));
        }
        Ok(Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape_str(), other.shape_str()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape_str(), other.shape_str()));
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let out_row = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self { rows: n, cols: p, data: out })
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec", self.shape_str(), format!("vector of {}", x.len())));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y` for a column vector `y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape("matvec_t", self.shape_str(), format!("vector of {}", y.len())));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::shape("symmetrize", self.shape_str(), "square"));
        }
        let n = self.rows;
        let mut s = self.clone();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                s.set(i, j, v);
                s.set(j, i, v);
            }
        }
        Ok(s)
    }

    /// Fails unless square and symmetric within `tol` (absolute, scaled by
    /// `max(1, max|m|)`).
    pub fn check_symmetric(&self, tol: f64) -> Result<()> {
        if !self.is_square() {
            return Err(Error::shape("symmetric check", self.shape_str(), "square"));
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let diff = (self.get(i, j) - self.get(j, i)).abs();
                if diff > tol * scale {
                    return Err(Error::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

impl SymEig {
    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let v = &self.vectors;
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| v.get(i, k) * fl[k] * v.get(j, k)).sum();
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        out
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
/// reaches roundoff level (`ε·‖m‖_F`), or stops shrinking once below 1e-12
/// relative to `max(1, ‖m‖_F)`. Gives up after 100 sweeps.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    m.check_symmetric(SYMMETRY_TOLERANCE)?;
    let n = m.rows();
    let mut a = m.symmetrized()?;
    let mut v = Matrix::identity(n);
    let tight = f64::EPSILON * m.frobenius_norm();
    let loose = JACOBI_OFF_TOLERANCE * m.frobenius_norm().max(1.0);

    let off_norm = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut off = off_norm(&a);
    let mut converged = off <= tight;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                // Rotation angle zeroing a[p][q] (Golub & Van Loan, sym.schur2).
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        let next = off_norm(&a);
        converged = next <= tight || (next < loose && next >= off);
        off = next;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_c, &old_c) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_c, v.get(r, old_c));
        }
    }
    Ok(SymEig { values, vectors })
}

fn check_psd_spectrum(eig: &SymEig) -> Result<()> {
    match eig.values.last() {
        Some(&min) if min < -PSD_TOLERANCE => Err(Error::NotPsd { eigenvalue: min }),
        _ => Ok(()),
    }
}

/// Eigenvalues at or below `n·ε·λ_max` are roundoff; their square roots
/// would inject errors of order `√ε`.
fn roundoff_floor(eig: &SymEig) -> f64 {
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    eig.values.len() as f64 * f64::EPSILON * top
}

/// Symmetric PSD square root. Eigenvalues in `[-1e-8, 0)` and those at
/// roundoff level relative to the largest are treated as 0.
pub fn sqrtm_psd(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    check_psd_spectrum(&eig)?;
    let floor = roundoff_floor(&eig);
    Ok(eig.reconstruct_with(|l| if l <= floor { 0.0 } else { l.sqrt() }))
}

/// A factor `L` with `L·Lᵀ = m` for PSD `m` (eigendecomposition based, so
/// rank-deficient inputs are fine).
pub fn psd_factor(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(m)?;
    check_psd_spectrum(&eig)?;
    let n = m.rows();
    let mut l = eig.vectors.clone();
    for (c, &val) in eig.values.iter().enumerate() {
        let s = val.max(0.0).sqrt();
        for r in 0..n {
            l.set(r, c, l.get(r, c) * s);
        }
    }
    Ok(l)
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
pub fn spd_inverse_logdet(m: &Matrix, min_eigenvalue: f64) -> Result<(Matrix, f64)> {
    let eig = sym_eig(m)?;
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min <= min_eigenvalue {
        return Err(Error::Singular { eigenvalue: min });
    }
    let logdet = eig.values.iter().map(|l| l.ln()).sum();
    Ok((eig.reconstruct_with(|l| 1.0 / l), logdet))
}

/// First two moments of a k-dimensional distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    mean: Vec<f64>,
    cov: Matrix,
}

impl GaussianStats {
    /// Symmetrizes `cov` and checks its spectrum is PSD within tolerance.
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        if !cov.is_square() || cov.rows() != mean.len() {
            return Err(Error::shape("GaussianStats::new", format!("mean of {}", mean.len()), cov.shape_str()));
        }
        if let Some((index, &value)) = mean.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        let cov = cov.symmetrized()?;
        check_psd_spectrum(&sym_eig(&cov)?)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }
}

/// Column means and unbiased (n−1) sample covariance of the rows of
/// `samples`.
pub fn gaussian_fit(samples: &Matrix) -> Result<GaussianStats> {
    let (n, k) = samples.shape();
    if n < 2 {
        return Err(Error::invalid(format!("gaussian_fit needs at least 2 samples, got {n}")));
    }
    let mut mean = vec![0.0; k];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(samples.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = Matrix::zeros(k, k);
    let mut centered = vec![0.0; k];
    for r in 0..n {
        for ((c, &x), &m) in centered.iter_mut().zip(samples.row(r)).zip(&mean) {
            *c = x - m;
        }
        for i in 0..k {
            for j in i..k {
                let v = cov.get(i, j) + centered[i] * centered[j];
                cov.set(i, j, v);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..k {
        for j in i..k {
            let v = cov.get(i, j) / denom;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    GaussianStats::new(mean, cov)
}

/// `n` draws of `μ + L·ξ` with `L·Lᵀ = Σ`, one sample per row.
pub fn mvn_sample(stats: &GaussianStats, n: usize, rng: &mut SeededRng) -> Result<Matrix> {
    let l = psd_factor(&stats.cov)?;
    let k = stats.dim();
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        let xi = rng.normal_vec(k);
        let lx = l.matvec(&xi)?;
        data.extend(stats.mean.iter().zip(&lx).map(|(m, v)| m + v));
    }
    Matrix::new(n, k, data)
}

/// Relative Frobenius error `‖a − b‖_F / ‖b‖_F` (absolute when `b` is zero).
pub fn relative_frobenius_error(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?.frobenius_norm();
    let denom = b.frobenius_norm();
    Ok(if denom > 0.0 { diff / denom } else { diff })
}
