//! Least-squares kernel shared by the covariate-adjusted estimators.
//!
//! Householder QR, so coefficients come out of an orthogonalization instead
//! of normal equations; no covariance matrix is ever formed.

use crate::error::{Error, Result};

/// Pivot threshold, relative to the original column norm.
const PIVOT_TOL: f64 = 1e-10;

/// Result of an intercept-plus-covariates least-squares fit.
#[derive(Debug, Clone)]
pub struct OlsFit {
    /// Intercept first, then one coefficient per covariate column.
    pub coefficients: Vec<f64>,
    /// Predicted response for every input row.
    pub fitted: Vec<f64>,
    /// Sum of squared residuals.
    pub residual_ss: f64,
    /// n - p - 1.
    pub df: usize,
    pub rank_ok: bool,
}

impl OlsFit {
    /// Prediction at a covariate vector (same arity as the fit).
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut v = self.coefficients[0];
        for (b, xi) in self.coefficients[1..].iter().zip(x) {
            v += b * xi;
        }
        v
    }
}

/// Fit `response ~ 1 + covariates` by Householder QR.
///
/// `covariates` holds one row per observation (arity p, possibly 0). Needs
/// n >= p + 2 so at least one residual degree of freedom remains. A column
/// whose pivot falls below `1e-10` times its norm is reported as collinear;
/// column 0 is the intercept.
pub fn fit_ols(covariates: &[Vec<f64>], response: &[f64]) -> Result<OlsFit> {
    let n = response.len();
    if covariates.len() != n {
        return Err(Error::Schema(format!(
            "covariate rows ({}) and response length ({n}) differ",
            covariates.len()
        )));
    }
    let p = covariates.first().map_or(0, Vec::len);
    let m = p + 1;
    if n < m + 1 {
        return Err(Error::InsufficientData(format!(
            "need at least {} rows to fit {p} covariates, got {n}",
            m + 1
        )));
    }
    for (i, row) in covariates.iter().enumerate() {
        if row.len() != p {
            return Err(Error::Schema(format!(
                "covariate row {i} has arity {}, expected {p}",
                row.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("covariate row {i} is non-finite")));
        }
    }
    if response.iter().any(|y| !y.is_finite()) {
        return Err(Error::Data("non-finite response value".into()));
    }

    // column-major design matrix, intercept first
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    cols.push(vec![1.0; n]);
    for j in 0..p {
        cols.push(covariates.iter().map(|row| row[j]).collect());
    }
    let col_norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();

    let mut rhs = response.to_vec();

    // Householder reflections, applied in place to the trailing columns and
    // the right-hand side. After column k, cols[k][k] holds R[k][k].
    for k in 0..m {
        let norm_k = cols[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_k <= PIVOT_TOL * col_norms[k] {
            return Err(Error::Collinear { column: k });
        }
        let alpha = if cols[k][k] > 0.0 { -norm_k } else { norm_k };
        // reflection vector v = x - alpha * e_k, stored in cols[k][k..]
        cols[k][k] -= alpha;
        let vnorm2: f64 = cols[k][k..].iter().map(|v| v * v).sum();
        if vnorm2 > 0.0 {
            for j in (k + 1)..m {
                let dot: f64 = cols[k][k..]
                    .iter()
                    .zip(&cols[j][k..])
                    .map(|(v, a)| v * a)
                    .sum();
                let scale = 2.0 * dot / vnorm2;
                let (vk, cj) = {
                    let (a, b) = cols.split_at_mut(j);
                    (&a[k][k..], &mut b[0][k..])
                };
                for (c, v) in cj.iter_mut().zip(vk) {
                    *c -= scale * v;
                }
            }
            let dot: f64 = cols[k][k..]
                .iter()
                .zip(&rhs[k..])
                .map(|(v, b)| v * b)
                .sum();
            let scale = 2.0 * dot / vnorm2;
            for (b, v) in rhs[k..].iter_mut().zip(&cols[k][k..]) {
                *b -= scale * v;
            }
        }
        cols[k][k] = alpha;
    }

    // back-substitution on R x = (Q^T y)[0..m]
    let mut coefficients = vec![0.0; m];
    for i in (0..m).rev() {
        let mut v = rhs[i];
        for j in (i + 1)..m {
            v -= cols[j][i] * coefficients[j];
        }
        coefficients[i] = v / cols[i][i];
    }

    let fitted: Vec<f64> = covariates
        .iter()
        .map(|row| {
            let mut v = coefficients[0];
            for (b, xi) in coefficients[1..].iter().zip(row) {
                v += b * xi;
            }
            v
        })
        .collect();
    let residual_ss = response
        .iter()
        .zip(&fitted)
        .map(|(y, f)| (y - f) * (y - f))
        .sum();

    Ok(OlsFit {
        coefficients,
        fitted,
        residual_ss,
        df: n - m,
        rank_ok: true,
    })
}
