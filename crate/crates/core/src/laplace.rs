//! Quadratic least-squares model of a negative log-integrand and the Gaussian
//! weight obtained by completing the square.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::basis::{graded_multi_indices, total_degree_count};
use crate::error::{DtqError, Result};

/// `psi(eta) ~ c + d . eta + eta^T A eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFit {
    pub c: f64,
    pub d: DVector<f64>,
    pub a: DMatrix<f64>,
}

impl QuadraticFit {
    pub fn eval(&self, eta: &[f64]) -> f64 {
        let x = DVector::from_column_slice(eta);
        self.c + self.d.dot(&x) + x.dot(&(&self.a * &x))
    }
}

/// `C exp(-(x - mu)^T Sigma^{-1} (x - mu))` with `Sigma = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeight {
    pub mu: DVector<f64>,
    pub sigma_inv: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub log_c: f64,
}

impl GaussianWeight {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `log N(x; mu, Sigma)`.
    pub fn log_weight(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let diff = DVector::from_column_slice(x) - &self.mu;
        let q = diff.dot(&(&self.sigma_inv * &diff));
        let log_det_l: f64 = self.chol.diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * n as f64 * PI.ln() - log_det_l - q
    }

    /// `zeta = L^{-1} (x - mu)`.
    pub fn to_standard(&self, x: &[f64]) -> Vec<f64> {
        let diff = DVector::from_column_slice(x) - &self.mu;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        z.as_slice().to_vec()
    }

    /// `x = mu + L zeta`.
    pub fn from_standard(&self, zeta: &[f64]) -> Vec<f64> {
        let x = &self.mu + &self.chol * DVector::from_column_slice(zeta);
        x.as_slice().to_vec()
    }
}

/// Least-squares fit of `psi` over the monomials of total degree at most 2.
pub fn fit_log_quadratic(points: &[Vec<f64>], psi: &[f64]) -> Result<QuadraticFit> {
    assert_eq!(points.len(), psi.len());
    let n = points.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(DtqError::TooFewPoints { needed: 1, got: 0 });
    }
    let cols = total_degree_count(n, 2);
    if points.len() < cols {
        return Err(DtqError::TooFewPoints {
            needed: cols,
            got: points.len(),
        });
    }
    if !psi.iter().all(|v| v.is_finite()) {
        return Err(DtqError::FitFailed("non-finite log-integrand"));
    }
    let idx = graded_multi_indices(n, cols);
    let m = DMatrix::from_fn(points.len(), cols, |i, v| {
        idx.get(v)
            .iter()
            .zip(&points[i])
            .map(|(&a, &x)| x.powi(a as i32))
            .product()
    });
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= 1e-12 * smax {
        return Err(DtqError::FitFailed("rank-deficient design"));
    }
    let tau = svd
        .solve(&DVector::from_column_slice(psi), 0.0)
        .map_err(|_| DtqError::FitFailed("least-squares solve"))?;
    if !tau.iter().all(|v| v.is_finite()) {
        return Err(DtqError::FitFailed("non-finite coefficients"));
    }

    let mut c = 0.0;
    let mut d = DVector::zeros(n);
    let mut a = DMatrix::zeros(n, n);
    for (v, alpha) in idx.iter().enumerate() {
        let nz: Vec<usize> = (0..n).filter(|&l| alpha[l] > 0).collect();
        match (nz.as_slice(), alpha.iter().sum::<u32>()) {
            ([], _) => c = tau[v],
            ([l], 1) => d[*l] = tau[v],
            ([l], 2) => a[(*l, *l)] = tau[v],
            ([l, u], 2) => {
                a[(*l, *u)] = 0.5 * tau[v];
                a[(*u, *l)] = 0.5 * tau[v];
            }
            _ => unreachable!("degree at most two"),
        }
    }
    Ok(QuadraticFit { c, d, a })
}

/// Completes the square: `exp(-psi) = C exp(-(eta - mu)^T A (eta - mu))`.
pub fn to_gaussian(fit: &QuadraticFit) -> Result<GaussianWeight> {
    let a = fit.a.clone();
    let chol_a = a.clone().cholesky().ok_or(DtqError::NotPositiveDefinite)?;
    let a_inv_d = chol_a.solve(&fit.d);
    let mu = -0.5 * &a_inv_d;
    let log_c = -fit.c + 0.25 * fit.d.dot(&a_inv_d);
    let sigma = chol_a.inverse();
    let sigma = 0.5 * (&sigma + sigma.transpose());
    let chol = sigma.cholesky().ok_or(DtqError::NotPositiveDefinite)?.l();
    if !log_c.is_finite() || !mu.iter().all(|v| v.is_finite()) {
        return Err(DtqError::NotPositiveDefinite);
    }
    Ok(GaussianWeight {
        mu,
        sigma_inv: a,
        chol,
        log_c,
    })
}

/// `N(x; mu, Sigma) = (pi^N |Sigma|)^{-1/2} exp(-(x - mu)^T Sigma^{-1} (x - mu))`.
pub fn weight_eval(w: &GaussianWeight, x: &[f64]) -> f64 {
    w.log_weight(x).exp()
}
