//! Reference estimators for checking generated benchmarks: difference of
//! means, linear outcome regression and (IPW-weighted) logistic regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::stats::expit;

/// Newton iterations before giving up.
pub const MAX_NEWTON_ITERATIONS: usize = 100;
/// A linear predictor beyond this magnitude signals (quasi-)separation.
pub const SEPARATION_THRESHOLD: f64 = 30.0;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub point: f64,
    pub stderr: f64,
    pub method: String,
    pub n: usize,
}

impl AteEstimate {
    /// `point ± 2·stderr`.
    pub fn interval(&self) -> (f64, f64) {
        (self.point - 2.0 * self.stderr, self.point + 2.0 * self.stderr)
    }

    pub fn covers(&self, value: f64) -> bool {
        let (lo, hi) = self.interval();
        lo <= value && value <= hi
    }
}

/// `mean(Y | T=1) - mean(Y | T=0)` with the pooled-variance standard error.
pub fn difference_of_means(ds: &Dataset) -> Result<AteEstimate> {
    let (mut s, mut ss, mut n) = ([0.0; 2], [0.0; 2], [0usize; 2]);
    for (&y, &t) in ds.y.iter().zip(&ds.t) {
        let k = t as usize;
        s[k] += y;
        n[k] += 1;
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::DegenerateTreatment("difference of means needs both arms".into()));
    }
    let mean = [s[0] / n[0] as f64, s[1] / n[1] as f64];
    for (&y, &t) in ds.y.iter().zip(&ds.t) {
        let k = t as usize;
        ss[k] += (y - mean[k]).powi(2);
    }
    let df = n[0] + n[1] - 2;
    let stderr = if df == 0 {
        f64::INFINITY
    } else {
        let pooled = (ss[0] + ss[1]) / df as f64;
        (pooled * (1.0 / n[0] as f64 + 1.0 / n[1] as f64)).sqrt()
    };
    Ok(AteEstimate { point: mean[1] - mean[0], stderr, method: "dom".into(), n: ds.n() })
}

/// `[1, t, z_covariates…]` design.
fn design(ds: &Dataset, covariates: &[usize]) -> DMatrix<f64> {
    let p = 2 + covariates.len();
    DMatrix::from_fn(ds.n(), p, |i, j| match j {
        0 => 1.0,
        1 => ds.t[i],
        _ => ds.z[covariates[j - 2]][i],
    })
}

/// Ordinary least squares with homoskedastic standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub stderr: Vec<f64>,
    pub residual_variance: f64,
}

pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("{n} design rows for {} outcomes", y.len())));
    }
    if n < p {
        return Err(Error::SingularDesign);
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || r.diagonal().iter().any(|v| v.abs() <= RANK_TOL * scale) {
        return Err(Error::SingularDesign);
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r.solve_upper_triangular(&qty).ok_or(Error::SingularDesign)?;
    let resid = &yv - x * &beta;
    let df = n - p;
    let sigma2 = if df == 0 { f64::INFINITY } else { resid.norm_squared() / df as f64 };
    let r_inv = r.solve_upper_triangular(&DMatrix::identity(p, p)).ok_or(Error::SingularDesign)?;
    let cov_unscaled = &r_inv * r_inv.transpose();
    let stderr = (0..p).map(|j| (sigma2 * cov_unscaled[(j, j)]).sqrt()).collect();
    Ok(OlsFit { coefficients: beta.iter().copied().collect(), stderr, residual_variance: sigma2 })
}

/// Coefficient on `T` from regressing `Y` on `T` and all covariates.
pub fn outcome_regression_ate(ds: &Dataset) -> Result<AteEstimate> {
    outcome_regression_with(ds, &(0..ds.n_covariates()).collect::<Vec<_>>())
}

/// Coefficient on `T` from regressing `Y` on `T` and the given covariates.
/// With no covariates this is the difference of means.
pub fn outcome_regression_with(ds: &Dataset, covariates: &[usize]) -> Result<AteEstimate> {
    if let Some(&j) = covariates.iter().find(|&&j| j >= ds.n_covariates()) {
        return Err(Error::Dimension(format!("covariate index {j} out of range")));
    }
    let fit = ols(&design(ds, covariates), &ds.y)?;
    Ok(AteEstimate { point: fit.coefficients[1], stderr: fit.stderr[1], method: "or".into(), n: ds.n() })
}

/// Logistic regression coefficients with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub stderr: Vec<f64>,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn covers(&self, j: usize, value: f64) -> bool {
        (self.coefficients[j] - value).abs() <= 2.0 * self.stderr[j]
    }
}

fn weighted_loglik(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &yi), &wi)| {
            // log(1 + exp(e)) without overflow
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            wi * (yi * e - softplus)
        })
        .sum()
}

/// Weighted logistic MLE by damped Newton. The step is halved while the
/// weighted log-likelihood fails to increase. With `robust` the standard
/// errors are the sandwich `A⁻¹ B A⁻¹`, otherwise the inverse information.
pub fn logistic_regression(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>, robust: bool) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    if y.len() != n || weights.is_some_and(|w| w.len() != n) {
        return Err(Error::Dimension("design, outcome and weight lengths differ".into()));
    }
    if let Some(&bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Domain(format!("logistic regression needs a binary outcome, found {bad}")));
    }
    let ones = vec![1.0; n];
    let w = weights.unwrap_or(&ones);
    if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain("weights must be positive and finite".into()));
    }
    let mut beta = DVector::zeros(p);
    let mut ll = weighted_loglik(x, y, w, &beta);
    let information = |beta: &DVector<f64>| -> (DMatrix<f64>, DVector<f64>) {
        let eta = x * beta;
        let mut a = DMatrix::zeros(p, p);
        let mut g = DVector::zeros(p);
        for i in 0..n {
            let mu = expit(eta[i]);
            let xi = x.row(i).transpose();
            g += &xi * (w[i] * (y[i] - mu));
            a += &xi * xi.transpose() * (w[i] * mu * (1.0 - mu));
        }
        (a, g)
    };
    for it in 1..=MAX_NEWTON_ITERATIONS {
        let (a, g) = information(&beta);
        let step = a.clone().cholesky().map(|c| c.solve(&g)).ok_or(Error::SingularDesign)?;
        let mut damp = 1.0;
        let mut next = &beta + &step;
        let mut next_ll = weighted_loglik(x, y, w, &next);
        while !(next_ll >= ll) && damp > 1e-10 {
            damp *= 0.5;
            next = &beta + &step * damp;
            next_ll = weighted_loglik(x, y, w, &next);
        }
        let moved = (&next - &beta).amax();
        beta = next;
        ll = next_ll;
        if (x * &beta).amax() > SEPARATION_THRESHOLD {
            return Err(Error::Separation);
        }
        if moved < 1e-10 || g.amax() < 1e-12 {
            let (a, _) = information(&beta);
            let a_inv = a.clone().try_inverse().ok_or(Error::SingularDesign)?;
            let cov = if robust {
                let eta = x * &beta;
                let mut b = DMatrix::zeros(p, p);
                for i in 0..n {
                    let r = w[i] * (y[i] - expit(eta[i]));
                    let xi = x.row(i).transpose();
                    b += &xi * xi.transpose() * (r * r);
                }
                &a_inv * b * &a_inv
            } else {
                a_inv
            };
            let stderr = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
            return Ok(LogisticFit { coefficients: beta.iter().copied().collect(), stderr, iterations: it });
        }
    }
    Err(Error::Convergence(MAX_NEWTON_ITERATIONS))
}

/// Marginal logistic model `logit P(Y=1 | do(T)) = c + β t` fitted with
/// inverse propensity weights `1/p` (treated) and `1/(1-p)` (controls);
/// returns `[c, β]` with sandwich standard errors.
pub fn ipw_logistic(ds: &Dataset, propensity: &[f64]) -> Result<LogisticFit> {
    if propensity.len() != ds.n() {
        return Err(Error::Dimension(format!("{} propensities for {} rows", propensity.len(), ds.n())));
    }
    if let Some(&p) = propensity.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Domain(format!("propensity {p} outside (0, 1)")));
    }
    let w: Vec<f64> = ds.t.iter().zip(propensity).map(|(&t, &p)| if t == 1.0 { 1.0 / p } else { 1.0 / (1.0 - p) }).collect();
    logistic_regression(&design(ds, &[]), &ds.y, Some(&w), true)
}

/// Conditional logistic outcome regression of `Y` on `[1, T, Z]`; the
/// coefficient on `T` is index 1.
pub fn logistic_outcome_regression(ds: &Dataset) -> Result<LogisticFit> {
    logistic_regression(&design(ds, &(0..ds.n_covariates()).collect::<Vec<_>>()), &ds.y, None, false)
}

/// Propensity scores from a logistic regression of `T` on `[1, Z]`.
pub fn logistic_propensity(ds: &Dataset) -> Result<Vec<f64>> {
    let d = ds.n_covariates();
    let x = DMatrix::from_fn(ds.n(), d + 1, |i, j| if j == 0 { 1.0 } else { ds.z[j - 1][i] });
    let fit = logistic_regression(&x, &ds.t, None, false)?;
    let beta = DVector::from_vec(fit.coefficients);
    Ok((x * beta).iter().map(|&e| expit(e)).collect())
}
