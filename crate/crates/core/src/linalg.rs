//! Deterministic dense linear algebra: one-sided Jacobi SVD, softmax,
//! Shannon entropy and the GELU activation.

use thiserror::Error;

use crate::matrix::Matrix;

/// Default convergence tolerance for the Jacobi sweeps.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("Jacobi SVD did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("input is empty")]
    EmptyInput,
    #[error("probability vector sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("probability vector has a negative entry {0}")]
    NegativeProbability(f64),
    #[error("invalid singular spectrum: {0}")]
    InvalidSpectrum(String),
}

/// Thin SVD `W = U · diag(sigma) · Vᵀ` with `r = min(m, n)` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let (m, r) = self.u.shape();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for k in 0..r {
            let s = self.sigma[k];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get(i, k) * s;
                if us == 0.0 {
                    continue;
                }
                let row = out.row_mut(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o += us * self.v.get(j, k);
                }
            }
        }
        out
    }
}

/// Singular values sorted descending, all non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularSpectrum(Vec<f64>);

impl SingularSpectrum {
    /// Validates and sorts `values` descending.
    pub fn new(mut values: Vec<f64>) -> Result<Self, LinalgError> {
        if values.is_empty() {
            return Err(LinalgError::InvalidSpectrum("no values".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(LinalgError::InvalidSpectrum(format!(
                "value {v} is negative or non-finite"
            )));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// Full thin SVD via one-sided Jacobi on the taller orientation.
pub fn svd(w: &Matrix, tol: f64) -> Result<SvdResult, LinalgError> {
    if !w.all_finite() {
        return Err(LinalgError::NonFinite);
    }
    let transposed = w.rows() < w.cols();
    let a = if transposed { w.transpose() } else { w.clone() };
    let (m, n) = a.shape();

    let mut work = JacobiWork::new(&a, true);
    work.run(tol)?;
    let (sigma, order) = work.sorted_sigma();

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let vcols = work.v.as_ref().expect("v accumulated");
    let mut zero_cols = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = sigma[k];
        if s > 0.0 {
            for i in 0..m {
                u.set(i, k, work.cols[j][i] / work.norms[j]);
            }
        } else {
            zero_cols.push(k);
        }
        for i in 0..n {
            v.set(i, k, vcols[j][i]);
        }
    }
    complete_orthonormal(&mut u, &zero_cols);

    let sigma: Vec<f64> = sigma.into_iter().map(|s| s * work.scale).collect();
    Ok(if transposed {
        SvdResult { u: v, sigma, v: u }
    } else {
        SvdResult { u, sigma, v }
    })
}

/// Singular values only; performs the same rotations as [`svd`] without
/// accumulating `V`, so the values agree bit for bit.
pub fn singular_values(w: &Matrix, tol: f64) -> Result<SingularSpectrum, LinalgError> {
    if !w.all_finite() {
        return Err(LinalgError::NonFinite);
    }
    if w.is_all_zero() {
        return Err(LinalgError::ZeroMatrix);
    }
    let a = if w.rows() < w.cols() { w.transpose() } else { w.clone() };
    let mut work = JacobiWork::new(&a, false);
    work.run(tol)?;
    let (sigma, _) = work.sorted_sigma();
    Ok(SingularSpectrum(
        sigma.into_iter().map(|s| s * work.scale).collect(),
    ))
}

struct JacobiWork {
    /// Columns of the scaled working matrix (each of length m).
    cols: Vec<Vec<f64>>,
    /// Columns of the accumulated right rotation, when requested.
    v: Option<Vec<Vec<f64>>>,
    norms: Vec<f64>,
    scale: f64,
}

impl JacobiWork {
    fn new(a: &Matrix, accumulate_v: bool) -> Self {
        let (m, n) = a.shape();
        let scale = a.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let inv = if scale > 0.0 { 1.0 / scale } else { 1.0 };
        let cols = (0..n)
            .map(|j| (0..m).map(|i| a.get(i, j) * inv).collect())
            .collect();
        let v = accumulate_v.then(|| {
            (0..n)
                .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        });
        Self {
            cols,
            v,
            norms: Vec::new(),
            scale: if scale > 0.0 { scale } else { 1.0 },
        }
    }

    fn run(&mut self, tol: f64) -> Result<(), LinalgError> {
        let n = self.cols.len();
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = sq_norm(&self.cols[p]);
                    let beta = sq_norm(&self.cols[q]);
                    if alpha < f64::MIN_POSITIVE || beta < f64::MIN_POSITIVE {
                        continue;
                    }
                    let gamma = dot_cols(&self.cols[p], &self.cols[q]);
                    if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + zeta.hypot(1.0));
                    let c = 1.0 / t.hypot(1.0);
                    let s = c * t;
                    rotate(&mut self.cols, p, q, c, s);
                    if let Some(v) = self.v.as_mut() {
                        rotate(v, p, q, c, s);
                    }
                }
            }
            if !rotated {
                self.norms = self.cols.iter().map(|c| sq_norm(c).sqrt()).collect();
                return Ok(());
            }
        }
        Err(LinalgError::NoConvergence(MAX_SWEEPS))
    }

    /// Column norms sorted descending, with the originating column indices.
    /// Ties keep column order.
    fn sorted_sigma(&self) -> (Vec<f64>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.norms.len()).collect();
        order.sort_by(|&a, &b| self.norms[b].total_cmp(&self.norms[a]));
        (order.iter().map(|&j| self.norms[j]).collect(), order)
    }
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot_cols(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column (modified Gram-Schmidt over the standard basis).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let (m, r) = u.shape();
    let mut filled: Vec<usize> = (0..r).filter(|k| !missing.contains(k)).collect();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < m, "ran out of basis vectors while completing U");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &j in &filled {
                    let col = u.column(j);
                    let proj = dot_cols(&e, &col);
                    for (x, c) in e.iter_mut().zip(&col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = sq_norm(&e).sqrt();
            if norm > 1e-6 {
                for i in 0..m {
                    u.set(i, k, e[i] / norm);
                }
                filled.push(k);
                break;
            }
        }
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if scores.is_empty() {
        return Err(LinalgError::EmptyInput);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    Ok(softmax_unchecked(scores))
}

/// Softmax for inputs already known to be finite and non-empty.
pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `ln Σ exp(s_i)` computed stably.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Natural-log Shannon entropy with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64, LinalgError> {
    if p.is_empty() {
        return Err(LinalgError::EmptyInput);
    }
    if let Some(&v) = p.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(LinalgError::NegativeProbability(v));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(LinalgError::NotNormalized { sum });
    }
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact (erf-based) GELU: `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of [`gelu`]: `Φ(x) + x · φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn assert_orthonormal_columns(m: &Matrix, tol: f64) {
        for i in 0..m.cols() {
            for j in 0..m.cols() {
                let d: f64 = (0..m.rows()).map(|k| m.get(k, i) * m.get(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < tol, "columns {i},{j}: {d}");
            }
        }
    }

    #[test]
    fn diagonal_matrix() {
        let w = Matrix::diag(2, 2, &[3.0, 1.0]);
        let r = svd(&w, DEFAULT_TOL).unwrap();
        assert_eq!(r.sigma, vec![3.0, 1.0]);
        for k in 0..2 {
            assert!(close(r.u.get(k, k).abs(), 1.0, 1e-15));
            assert!(close(r.v.get(k, k).abs(), 1.0, 1e-15));
        }
    }

    #[test]
    fn permuted_scaled_diagonal() {
        let w = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let r = svd(&w, DEFAULT_TOL).unwrap();
        assert_eq!(r.sigma, vec![2.0, 1.0]);
        assert!(r.reconstruct().sub(&w).frobenius_norm() < 1e-14);
    }

    #[test]
    fn wide_and_rank_deficient() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]]).unwrap();
        let r = svd(&w, DEFAULT_TOL).unwrap();
        assert_eq!(r.u.shape(), (2, 2));
        assert_eq!(r.v.shape(), (4, 2));
        assert!(r.sigma[1].abs() < 1e-12);
        assert!(close(r.sigma[0], (5.0f64 * 30.0).sqrt(), 1e-12));
        assert_orthonormal_columns(&r.u, 1e-10);
        assert_orthonormal_columns(&r.v, 1e-10);
        assert!(r.reconstruct().sub(&w).frobenius_norm() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let w = Matrix::zeros(3, 2);
        let r = svd(&w, DEFAULT_TOL).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        assert_orthonormal_columns(&r.u, 1e-12);
        assert_eq!(singular_values(&w, DEFAULT_TOL), Err(LinalgError::ZeroMatrix));
    }

    #[test]
    fn identity_spectrum() {
        let s = singular_values(&Matrix::identity(4), DEFAULT_TOL).unwrap();
        assert_eq!(s.values(), &[1.0; 4]);
    }

    #[test]
    fn rank_one_scaled_by_seven() {
        let u = [0.5, 0.5, 0.5, 0.5];
        let v = [0.6, 0.0, 0.8, 0.0];
        let mut w = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                w.set(i, j, 7.0 * u[i] * v[j]);
            }
        }
        let s = singular_values(&w, DEFAULT_TOL).unwrap();
        assert!(close(s.values()[0], 7.0, 1e-12));
        for &x in &s.values()[1..] {
            assert!(x < 1e-10);
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15) && close(p[1], 1.0 / 3.0, 1e-15));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(close(p[0], 1.0, 1e-15) && p[1] >= 0.0 && p[1] < 1e-300);
        assert_eq!(softmax(&[]), Err(LinalgError::EmptyInput));
        assert_eq!(softmax(&[f64::NAN]), Err(LinalgError::NonFinite));
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let third = 1.0 / 3.0;
        assert!(close(entropy(&[third; 3]).unwrap(), 3f64.ln(), 1e-15));
        // (5, 4, 3) normalized to (5/12, 4/12, 3/12).
        let h = entropy(&[0.4167, 0.3333, 0.25]).unwrap();
        assert!(close(h, 1.0776, 5e-4), "{h}");
        assert!(matches!(entropy(&[0.5, 0.4]), Err(LinalgError::NotNormalized { .. })));
        assert!(matches!(
            entropy(&[1.5, -0.5]),
            Err(LinalgError::NegativeProbability(_))
        ));
    }

    #[test]
    fn gelu_closed_forms() {
        assert_eq!(gelu(0.0), 0.0);
        // GELU(z) - GELU(-z) = z
        for z in [-3.0, -0.7, 0.2, 1.9] {
            assert!(close(gelu(z) - gelu(-z), z, 1e-15));
        }
        assert!(close(gelu(1.0), 0.841_344_746_068_542_9, 1e-15));
        for x in [-2.0, -0.3, 0.0, 0.5, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(fd, gelu_grad(x), 1e-9));
        }
    }
}
