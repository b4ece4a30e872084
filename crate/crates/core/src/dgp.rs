//! Ground-truth data-generating processes with a Gaussian copula over the
//! covariate ranks and the causal-margin rank.
//!
//! Sampling follows the frugal construction: draw `(V_Z, V_Y)` from the
//! copula, map `V_Z` through the covariate quantile functions, draw `T`
//! from a sigmoid propensity in `Z`, and set
//! `Y = α + τ T + σ Φ⁻¹(V_Y)`. Then `Y | do(T = t) ~ N(α + τ t, σ²)`
//! exactly, while `Y | T` is confounded through `Z`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{self, norm_cdf, norm_ppf};

/// Eigenvalue floor used when the converted correlation matrix is not
/// positive definite.
pub const EIGEN_FLOOR: f64 = 1e-2;

/// Stream for the latent Gaussian draws.
const LATENT: &str = "dgp-latent";

/// Marginal law of one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateMargin {
    /// Mean/dispersion parameterisation: shape `1/φ`, rate `1/(μφ)`.
    Gamma { mean: f64, dispersion: f64 },
    Bernoulli { p: f64 },
    Normal { mean: f64, sd: f64 },
}

impl CovariateMargin {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Gamma { mean, dispersion } => mean > 0.0 && dispersion > 0.0,
            Self::Bernoulli { p } => p > 0.0 && p < 1.0,
            Self::Normal { mean, sd } => mean.is_finite() && sd > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Spec(format!("invalid covariate margin {self:?}")))
        }
    }

    fn shape_rate(mean: f64, dispersion: f64) -> (f64, f64) {
        (1.0 / dispersion, 1.0 / (mean * dispersion))
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::Bernoulli { .. })
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Gamma { mean, .. } => mean,
            Self::Bernoulli { p } => p,
            Self::Normal { mean, .. } => mean,
        }
    }

    pub fn quantile(&self, v: f64) -> f64 {
        match *self {
            Self::Gamma { mean, dispersion } => {
                let (shape, rate) = Self::shape_rate(mean, dispersion);
                if shape == 1.0 {
                    -(-v).ln_1p() / rate
                } else {
                    Gamma::new(shape, rate).expect("validated").inverse_cdf(v)
                }
            }
            Self::Bernoulli { p } => f64::from(v > 1.0 - p),
            Self::Normal { mean, sd } => mean + sd * norm_ppf(v),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Self::Gamma { mean, dispersion } => {
                let (shape, rate) = Self::shape_rate(mean, dispersion);
                if x <= 0.0 {
                    0.0
                } else if shape == 1.0 {
                    -(-rate * x).exp_m1()
                } else {
                    Gamma::new(shape, rate).expect("validated").cdf(x)
                }
            }
            Self::Bernoulli { p } => {
                if x < 0.0 {
                    0.0
                } else if x < 1.0 {
                    1.0 - p
                } else {
                    1.0
                }
            }
            Self::Normal { mean, sd } => norm_cdf((x - mean) / sd),
        }
    }

    /// Log density (log mass for Bernoulli columns).
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Self::Gamma { mean, dispersion } => {
                let (shape, rate) = Self::shape_rate(mean, dispersion);
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else if shape == 1.0 {
                    rate.ln() - rate * x
                } else {
                    Gamma::new(shape, rate).expect("validated").ln_pdf(x)
                }
            }
            Self::Bernoulli { p } => match x {
                v if v == 1.0 => p.ln(),
                v if v == 0.0 => (1.0 - p).ln(),
                _ => f64::NEG_INFINITY,
            },
            Self::Normal { mean, sd } => stats::norm_logpdf((x - mean) / sd) - sd.ln(),
        }
    }
}

/// `p(T = 1 | z) = expit(a + bᵀz + Σ c_jk z_j z_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidPropensity {
    pub intercept: f64,
    pub linear: Vec<f64>,
    pub interactions: Vec<(usize, usize, f64)>,
}

impl SigmoidPropensity {
    pub fn linear_predictor(&self, z: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(z).map(|(b, x)| b * x).sum();
        let inter: f64 = self.interactions.iter().map(|&(j, k, c)| c * z[j] * z[k]).sum();
        self.intercept + lin + inter
    }

    pub fn probability(&self, z: &[f64]) -> f64 {
        stats::expit(self.linear_predictor(z))
    }
}

/// A Gaussian-copula data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub margins: Vec<CovariateMargin>,
    /// Spearman correlations over `(V_Z1, …, V_ZD, V_Y)`.
    pub spearman: Vec<Vec<f64>>,
    pub intercept: f64,
    pub tau: f64,
    pub sigma: f64,
    pub propensity: SigmoidPropensity,
    /// `(covariate, δ)` pairs adding `δ·z·t` to the outcome. Their ranks
    /// must be uncorrelated with `V_Y`.
    pub effect_modifiers: Vec<(usize, f64)>,
}

/// `2 sin(π r / 6)`: the Pearson correlation of a Gaussian copula with
/// Spearman correlation `r`.
pub fn spearman_to_pearson(rs: f64) -> f64 {
    2.0 * (std::f64::consts::PI * rs / 6.0).sin()
}

/// Inverse of [`spearman_to_pearson`].
pub fn pearson_to_spearman(rho: f64) -> f64 {
    6.0 / std::f64::consts::PI * (rho / 2.0).asin()
}

/// Converts a Spearman matrix and repairs positive definiteness by clipping
/// eigenvalues at [`EIGEN_FLOOR`] and rescaling to a unit diagonal.
pub fn pearson_matrix(spearman: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let m = spearman.len();
    if m == 0 || spearman.iter().any(|r| r.len() != m) {
        return Err(Error::Spec("correlation matrix must be square".into()));
    }
    for i in 0..m {
        if spearman[i][i] != 1.0 {
            return Err(Error::Spec(format!("correlation diagonal entry {i} is not 1")));
        }
        for j in 0..m {
            let v = spearman[i][j];
            if !(v.abs() <= 1.0) || v != spearman[j][i] {
                return Err(Error::Spec(format!("correlation entry ({i}, {j}) is invalid or asymmetric")));
            }
        }
    }
    let p = DMatrix::from_fn(m, m, |i, j| spearman_to_pearson(spearman[i][j]));
    if p.clone().cholesky().is_some() {
        return Ok(p);
    }
    let eig = SymmetricEigen::new(p);
    let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..m).map(|i| rebuilt[(i, i)].sqrt()).collect();
    let repaired = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rebuilt[(i, j)] / (d[i] * d[j]) });
    if repaired.clone().cholesky().is_none() {
        return Err(Error::Spec("correlation matrix is not positive definite after repair".into()));
    }
    log::warn!("converted correlation matrix was not positive definite; eigenvalues clipped at {EIGEN_FLOOR}");
    Ok(repaired)
}

impl DgpSpec {
    pub fn dim(&self) -> usize {
        self.margins.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::Spec("at least one covariate is required".into()));
        }
        for m in &self.margins {
            m.validate()?;
        }
        if self.spearman.len() != d + 1 {
            return Err(Error::Spec(format!("correlation matrix must be {0} x {0}", d + 1)));
        }
        if !(self.sigma > 0.0) || !self.tau.is_finite() || !self.intercept.is_finite() {
            return Err(Error::Spec("outcome margin needs finite location and positive scale".into()));
        }
        if self.propensity.linear.len() > d || self.propensity.interactions.iter().any(|&(j, k, _)| j >= d || k >= d) {
            return Err(Error::Spec("propensity refers to a missing covariate".into()));
        }
        for &(j, _) in &self.effect_modifiers {
            if j >= d || self.spearman[j][d] != 0.0 {
                return Err(Error::Spec(format!(
                    "effect modifier {j} must be a covariate whose rank is uncorrelated with the outcome rank"
                )));
            }
        }
        pearson_matrix(&self.spearman).map(|_| ())
    }

    /// The exact average treatment effect `τ + Σ δ E[w]`.
    pub fn true_ate(&self) -> f64 {
        self.tau + self.effect_modifiers.iter().map(|&(j, d)| d * self.margins[j].mean()).sum::<f64>()
    }

    pub fn discrete(&self) -> Vec<bool> {
        self.margins.iter().map(CovariateMargin::is_discrete).collect()
    }
}

fn gamma11() -> CovariateMargin {
    CovariateMargin::Gamma { mean: 1.0, dispersion: 1.0 }
}

fn r4() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, 0.5, 0.3, 0.1, 0.8],
        vec![0.5, 1.0, 0.4, 0.1, 0.8],
        vec![0.3, 0.4, 1.0, 0.1, 0.8],
        vec![0.1, 0.1, 0.1, 1.0, 0.8],
        vec![0.8, 0.8, 0.8, 0.8, 1.0],
    ]
}

fn r10() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, 0.3, 0.4, 0.5, 0.1, 0.2, 0.7, 0.5, 0.4, 0.5, 0.5],
        vec![0.3, 1.0, 0.3, 0.6, 0.3, 0.4, 0.4, 0.6, 0.3, 0.2, 0.5],
        vec![0.4, 0.3, 1.0, 0.5, 0.2, 0.1, 0.1, 0.0, 0.4, 0.4, 0.5],
        vec![0.5, 0.6, 0.5, 1.0, 0.2, 0.2, 0.5, 0.5, 0.3, 0.4, 0.5],
        vec![0.1, 0.3, 0.2, 0.2, 1.0, 0.1, 0.5, 0.6, 0.2, 0.4, 0.5],
        vec![0.2, 0.4, 0.1, 0.2, 0.1, 1.0, 0.0, 0.4, 0.2, 0.5, 0.5],
        vec![0.7, 0.4, 0.1, 0.5, 0.5, 0.0, 1.0, 0.4, 0.4, 0.4, 0.5],
        vec![0.5, 0.6, 0.0, 0.5, 0.6, 0.4, 0.4, 1.0, 0.4, 0.4, 0.5],
        vec![0.4, 0.3, 0.4, 0.3, 0.2, 0.2, 0.4, 0.4, 1.0, 0.4, 0.5],
        vec![0.5, 0.2, 0.4, 0.4, 0.4, 0.5, 0.4, 0.4, 0.4, 1.0, 0.5],
        vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0],
    ]
}

fn m12_propensity() -> SigmoidPropensity {
    SigmoidPropensity { intercept: -0.3, linear: vec![0.1, 0.2, -0.2, 1.0], interactions: vec![(0, 1, 0.5)] }
}

/// Four Gamma(1, 1) covariates, outcome `N(1 + τ T, 1)`.
pub fn m1(tau: f64) -> DgpSpec {
    DgpSpec {
        margins: vec![gamma11(); 4],
        spearman: r4(),
        intercept: 1.0,
        tau,
        sigma: 1.0,
        propensity: m12_propensity(),
        effect_modifiers: Vec::new(),
    }
}

/// As [`m1`] with `z3`, `z4` Bernoulli(0.5).
pub fn m2(tau: f64) -> DgpSpec {
    let b = CovariateMargin::Bernoulli { p: 0.5 };
    DgpSpec { margins: vec![gamma11(), gamma11(), b.clone(), b], ..m1(tau) }
}

/// Five Gamma(1, 1) then five Bernoulli(0.5) covariates.
pub fn m3(tau: f64) -> DgpSpec {
    let mut margins = vec![gamma11(); 5];
    margins.extend(vec![CovariateMargin::Bernoulli { p: 0.5 }; 5]);
    DgpSpec {
        margins,
        spearman: r10(),
        intercept: 1.0,
        tau,
        sigma: 1.0,
        propensity: SigmoidPropensity {
            intercept: -0.3,
            linear: vec![0.1, 0.2, 0.5, -0.2, 1.0, 0.3, -0.4, 0.7, -0.1, 0.9],
            interactions: Vec::new(),
        },
        effect_modifiers: Vec::new(),
    }
}

/// One `N(0, 2²)` covariate whose rank has Gaussian-copula correlation 0.8
/// with the outcome rank; outcome `N(2T, 1)`; propensity `expit(z / 2)`.
pub fn logistic_source() -> DgpSpec {
    let rs = pearson_to_spearman(0.8);
    DgpSpec {
        margins: vec![CovariateMargin::Normal { mean: 0.0, sd: 2.0 }],
        spearman: vec![vec![1.0, rs], vec![rs, 1.0]],
        intercept: 0.0,
        tau: 2.0,
        sigma: 1.0,
        propensity: SigmoidPropensity { intercept: 0.0, linear: vec![0.5], interactions: Vec::new() },
        effect_modifiers: Vec::new(),
    }
}

/// A binary effect modifier `w` (rank independent of the outcome rank) and
/// one continuous covariate tied to the outcome:
/// `Y | W = w, do(T = t) ~ N(t (1 + w), 1)`.
pub fn heterogeneous(tau: f64, delta: f64) -> DgpSpec {
    DgpSpec {
        margins: vec![CovariateMargin::Bernoulli { p: 0.5 }, CovariateMargin::Normal { mean: 0.0, sd: 1.0 }],
        spearman: vec![vec![1.0, 0.3, 0.0], vec![0.3, 1.0, 0.6], vec![0.0, 0.6, 1.0]],
        intercept: 0.0,
        tau,
        sigma: 1.0,
        propensity: SigmoidPropensity { intercept: -0.2, linear: vec![0.4, 0.8], interactions: Vec::new() },
        effect_modifiers: vec![(0, delta)],
    }
}

/// Built-in specifications by name; `tau` sets the treatment effect.
pub fn builtin(name: &str, tau: f64) -> Result<DgpSpec> {
    match name {
        "m1" => Ok(m1(tau)),
        "m2" => Ok(m2(tau)),
        "m3" => Ok(m3(tau)),
        "logistic-source" => Ok(DgpSpec { tau, ..logistic_source() }),
        "heterogeneous" => Ok(heterogeneous(tau, 1.0)),
        other => Err(Error::Spec(format!("unknown built-in DGP `{other}`"))),
    }
}

/// Exact density evaluator for a specification.
#[derive(Debug, Clone)]
pub struct DgpTruth {
    pub spec: DgpSpec,
    pearson: DMatrix<f64>,
    precision_minus_identity: DMatrix<f64>,
    log_det: f64,
}

impl DgpTruth {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let pearson = pearson_matrix(&spec.spearman)?;
        let chol = pearson.clone().cholesky().ok_or_else(|| Error::Spec("singular correlation".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let m = pearson.nrows();
        let precision_minus_identity = chol.inverse() - DMatrix::identity(m, m);
        Ok(Self { spec, pearson, precision_minus_identity, log_det })
    }

    pub fn pearson(&self) -> &DMatrix<f64> {
        &self.pearson
    }

    /// Log density of the full Gaussian copula at `(v_Z, v_Y)`.
    pub fn log_copula(&self, v: &[f64]) -> f64 {
        let x = DVector::from_iterator(v.len(), v.iter().map(|&u| norm_ppf(u)));
        -0.5 * self.log_det - 0.5 * x.dot(&(&self.precision_minus_identity * &x))
    }

    fn outcome_mean(&self, z: &[f64], t: f64) -> f64 {
        let s = &self.spec;
        s.intercept + t * (s.tau + s.effect_modifiers.iter().map(|&(j, d)| d * z[j]).sum::<f64>())
    }

    /// `log p_{Y|do(T)}(y | t)`; with effect modifiers the margin is
    /// conditional on them.
    pub fn log_causal_margin(&self, z: &[f64], t: f64, y: f64) -> f64 {
        let s = &self.spec;
        stats::norm_logpdf((y - self.outcome_mean(z, t)) / s.sigma) - s.sigma.ln()
    }

    /// Rank of `y` under the causal margin.
    pub fn causal_margin_rank(&self, z: &[f64], t: f64, y: f64) -> f64 {
        norm_cdf((y - self.outcome_mean(z, t)) / self.spec.sigma)
    }

    fn check_continuous(&self) -> Result<()> {
        if self.spec.margins.iter().any(CovariateMargin::is_discrete) {
            return Err(Error::Spec("exact densities need continuous covariates".into()));
        }
        Ok(())
    }

    /// `log p(z, y | do(t))` for a specification with continuous covariates.
    pub fn log_interventional_density(&self, z: &[f64], t: f64, y: f64) -> Result<f64> {
        self.check_continuous()?;
        let s = &self.spec;
        let mut v: Vec<f64> = z.iter().zip(&s.margins).map(|(&x, m)| m.cdf(x)).collect();
        v.push(self.causal_margin_rank(z, t, y));
        let margins: f64 = z.iter().zip(&s.margins).map(|(&x, m)| m.log_density(x)).sum();
        Ok(margins + self.log_causal_margin(z, t, y) + self.log_copula(&v))
    }

    /// Observational `log p(z, t, y)`: the interventional density times the
    /// propensity of the observed arm.
    pub fn log_observational_density(&self, z: &[f64], t: f64, y: f64) -> Result<f64> {
        let p = self.spec.propensity.probability(z);
        let lp = if t == 1.0 { p.ln() } else { (1.0 - p).ln() };
        Ok(self.log_interventional_density(z, t, y)? + lp)
    }
}

/// A simulated dataset with its oracle.
#[derive(Debug, Clone)]
pub struct DgpSample {
    pub data: Dataset,
    pub true_ate: f64,
    /// Latent ranks `(V_Z, V_Y)` per row, row-major `n × (D + 1)`.
    pub latent_ranks: Vec<f64>,
    pub truth: DgpTruth,
}

impl DgpSample {
    pub fn outcome_ranks(&self) -> Vec<f64> {
        let m = self.truth.spec.dim() + 1;
        self.latent_ranks.chunks(m).map(|r| r[m - 1]).collect()
    }
}

/// Draws `n` rows from `spec`.
pub fn simulate_dgp(spec: &DgpSpec, n: usize, seed: u64) -> Result<DgpSample> {
    let truth = DgpTruth::new(spec.clone())?;
    if n == 0 {
        return Err(Error::Spec("sample size must be positive".into()));
    }
    let d = spec.dim();
    let m = d + 1;
    let chol = truth.pearson.clone().cholesky().expect("validated").l();
    let mut latent = rng::stream(seed, LATENT);
    let mut treat = rng::stream(seed, rng::PROPENSITY);
    let mut z = vec![Vec::with_capacity(n); d];
    let (mut t, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut ranks = Vec::with_capacity(n * m);
    let mut row = vec![0.0; d];
    for _ in 0..n {
        let g = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut latent)));
        let x = &chol * g;
        for j in 0..d {
            let v = norm_cdf(x[j]);
            ranks.push(v);
            row[j] = spec.margins[j].quantile(v);
            z[j].push(row[j]);
        }
        ranks.push(norm_cdf(x[d]));
        let p = spec.propensity.probability(&row);
        let ti = f64::from(rng::open_uniform(&mut treat) < p);
        t.push(ti);
        y.push(truth.outcome_mean(&row, ti) + spec.sigma * x[d]);
    }
    let data = Dataset::new(z, t, y, spec.discrete())?;
    Ok(DgpSample { data, true_ate: spec.true_ate(), latent_ranks: ranks, truth })
}

const DGP_KEYS: &[&str] = &[
    "builtin",
    "margins",
    "spearman",
    "intercept",
    "tau",
    "sigma",
    "propensity_intercept",
    "propensity_linear",
    "propensity_interactions",
    "effect_modifiers",
];

fn parse_margin(token: &str) -> Result<CovariateMargin> {
    let bad = || Error::Spec(format!("cannot parse covariate margin `{token}`"));
    let (name, rest) = token.split_once('(').ok_or_else(bad)?;
    let args: Vec<f64> = rest
        .strip_suffix(')')
        .ok_or_else(bad)?
        .split(',')
        .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match (name.trim(), args.as_slice()) {
        ("gamma", &[mean, dispersion]) => Ok(CovariateMargin::Gamma { mean, dispersion }),
        ("bernoulli", &[p]) => Ok(CovariateMargin::Bernoulli { p }),
        ("normal", &[mean, sd]) => Ok(CovariateMargin::Normal { mean, sd }),
        _ => Err(bad()),
    }
}

/// `a:b:…` groups separated by whitespace.
fn parse_groups(raw: &str, arity: usize) -> Result<Vec<Vec<f64>>> {
    raw.split_whitespace()
        .map(|g| {
            let parts: Vec<f64> = g
                .split(':')
                .map(|x| x.parse::<f64>().map_err(|_| Error::Spec(format!("cannot parse `{g}`"))))
                .collect::<Result<_>>()?;
            if parts.len() != arity {
                return Err(Error::Spec(format!("`{g}` needs {arity} colon-separated values")));
            }
            Ok(parts)
        })
        .collect()
}

fn index(x: f64) -> Result<usize> {
    if x >= 0.0 && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(Error::Spec(format!("`{x}` is not a covariate index")))
    }
}

impl DgpSpec {
    /// Reads a `[dgp]` section. `builtin = m1` (or `m2`, `m3`,
    /// `logistic-source`, `heterogeneous`) starts from a built-in; every
    /// other key overrides a field:
    ///
    /// ```text
    /// margins = gamma(1, 1) bernoulli(0.5) normal(0, 2)
    /// spearman = 1 0.3 0.5; 0.3 1 0.2; 0.5 0.2 1
    /// propensity_linear = 0.1 0.2 -0.2
    /// propensity_interactions = 0:1:0.5
    /// effect_modifiers = 0:1.0
    /// ```
    pub fn from_section(s: &crate::config::Section) -> Result<Self> {
        s.check_keys(DGP_KEYS)?;
        let tau: Option<f64> = s.get("tau")?;
        let mut spec = match s.raw("builtin") {
            Some(name) => builtin(name, tau.unwrap_or(1.0))?,
            None => DgpSpec {
                margins: Vec::new(),
                spearman: Vec::new(),
                intercept: 0.0,
                tau: tau.ok_or_else(|| Error::Spec("[dgp] needs `tau` or `builtin`".into()))?,
                sigma: 1.0,
                propensity: SigmoidPropensity { intercept: 0.0, linear: Vec::new(), interactions: Vec::new() },
                effect_modifiers: Vec::new(),
            },
        };
        if let Some(raw) = s.raw("margins") {
            spec.margins = raw
                .split_inclusive(')')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(parse_margin)
                .collect::<Result<_>>()?;
        }
        if let Some(m) = s.matrix("spearman")? {
            spec.spearman = m;
        }
        spec.intercept = s.get_or("intercept", spec.intercept)?;
        spec.sigma = s.get_or("sigma", spec.sigma)?;
        spec.propensity.intercept = s.get_or("propensity_intercept", spec.propensity.intercept)?;
        if let Some(l) = s.list("propensity_linear")? {
            spec.propensity.linear = l;
        }
        if let Some(raw) = s.raw("propensity_interactions") {
            spec.propensity.interactions = parse_groups(raw, 3)?
                .into_iter()
                .map(|g| Ok((index(g[0])?, index(g[1])?, g[2])))
                .collect::<Result<_>>()?;
        }
        if let Some(raw) = s.raw("effect_modifiers") {
            spec.effect_modifiers =
                parse_groups(raw, 2)?.into_iter().map(|g| Ok((index(g[0])?, g[1]))).collect::<Result<_>>()?;
        }
        spec.validate()?;
        Ok(spec)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_statistic, spearman};

    #[test]
    fn spearman_conversion_examples() {
        assert_eq!(spearman_to_pearson(0.0), 0.0);
        assert!((spearman_to_pearson(1.0) - 1.0).abs() < 1e-15);
        assert!((spearman_to_pearson(0.5) - 0.517_638_090_205_041_5).abs() < 1e-12);
        assert!((pearson_to_spearman(spearman_to_pearson(0.37)) - 0.37).abs() < 1e-12);
    }

    #[test]
    fn builtins_validate_and_report_exact_ate() {
        for name in ["m1", "m2", "m3", "logistic-source", "heterogeneous"] {
            builtin(name, 1.0).unwrap().validate().unwrap();
        }
        let s = simulate_dgp(&m1(1.0), 100, 1).unwrap();
        assert_eq!(s.true_ate, 1.0);
        assert_eq!(simulate_dgp(&m2(5.0), 10, 1).unwrap().true_ate, 5.0);
        assert_eq!(heterogeneous(1.0, 1.0).true_ate(), 1.5);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = m1(1.0);
        s.spearman[0][1] = 0.9;
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
        let mut s = m1(1.0);
        s.sigma = 0.0;
        assert!(s.validate().is_err());
        let mut s = m1(1.0);
        s.effect_modifiers = vec![(0, 1.0)];
        assert!(s.validate().is_err());
        assert!(builtin("m9", 1.0).is_err());
    }

    #[test]
    fn non_pd_matrix_is_repaired() {
        let r = vec![vec![1.0, 0.95, -0.95], vec![0.95, 1.0, 0.95], vec![-0.95, 0.95, 1.0]];
        let p = pearson_matrix(&r).unwrap();
        assert!(p.clone().cholesky().is_some());
        for i in 0..3 {
            assert!((p[(i, i)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn margins_and_rank_correlations_match_spec() {
        let spec = m2(1.0);
        let s = simulate_dgp(&spec, 100_000, 3).unwrap();
        let ks = ks_statistic(&s.data.z[0], |x| spec.margins[0].cdf(x));
        assert!(ks < 0.01, "KS {ks}");
        let frac: f64 = s.data.z[2].iter().sum::<f64>() / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01);
        // the published four-covariate matrix is not positive definite, so
        // rank correlations are checked on a valid one
        let spec = DgpSpec {
            spearman: vec![
                vec![1.0, 0.5, 0.3, 0.1, 0.6],
                vec![0.5, 1.0, 0.4, 0.1, 0.5],
                vec![0.3, 0.4, 1.0, 0.1, -0.2],
                vec![0.1, 0.1, 0.1, 1.0, 0.4],
                vec![0.6, 0.5, -0.2, 0.4, 1.0],
            ],
            ..m2(1.0)
        };
        let s = simulate_dgp(&spec, 100_000, 4).unwrap();
        let m = spec.dim() + 1;
        let cols: Vec<Vec<f64>> = (0..m).map(|j| s.latent_ranks.iter().skip(j).step_by(m).copied().collect()).collect();
        for i in 0..m {
            for j in 0..i {
                let rs = spearman(&cols[i], &cols[j]);
                assert!((rs - spec.spearman[i][j]).abs() < 0.02, "({i},{j}) {rs}");
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = simulate_dgp(&m1(1.0), 500, 9).unwrap();
        let b = simulate_dgp(&m1(1.0), 500, 9).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn density_integrates_to_one() {
        // two Exponential(1) covariates and the outcome; substitute
        // z = -ln(1 - u) so the integral runs over the unit cube in u
        let spec = DgpSpec {
            margins: vec![gamma11(), gamma11()],
            spearman: vec![vec![1.0, 0.4, 0.6], vec![0.4, 1.0, -0.3], vec![0.6, -0.3, 1.0]],
            intercept: 0.5,
            tau: 1.0,
            sigma: 1.3,
            propensity: SigmoidPropensity { intercept: 0.2, linear: vec![0.5, -0.4], interactions: vec![(0, 1, 0.3)] },
            effect_modifiers: Vec::new(),
        };
        let truth = DgpTruth::new(spec).unwrap();
        let m = 60;
        let h = 1.0 / m as f64;
        let (ylo, yhi, my) = (-8.0, 10.0, 180);
        let hy = (yhi - ylo) / my as f64;
        let mut total = 0.0;
        for i in 0..m {
            let u1 = (i as f64 + 0.5) * h;
            let z1 = -(-u1).ln_1p();
            for j in 0..m {
                let u2 = (j as f64 + 0.5) * h;
                let z2 = -(-u2).ln_1p();
                // dz/du = 1 / (1 - u)
                let jac = 1.0 / ((1.0 - u1) * (1.0 - u2));
                for k in 0..my {
                    let y = ylo + (k as f64 + 0.5) * hy;
                    for t in [0.0, 1.0] {
                        total += truth.log_observational_density(&[z1, z2], t, y).unwrap().exp() * jac;
                    }
                }
            }
        }
        total *= h * h * hy;
        assert!((total - 1.0).abs() < 1e-2, "mass {total}");
    }

    #[test]
    fn discrete_specs_have_no_exact_density() {
        let truth = DgpTruth::new(m2(1.0)).unwrap();
        assert!(truth.log_interventional_density(&[1.0, 1.0, 0.0, 1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn specs_load_from_config() {
        let text = "[dgp]\nbuiltin = m2\ntau = 5\n";
        let c = crate::config::Config::parse(text).unwrap();
        assert_eq!(DgpSpec::from_section(c.section("dgp").unwrap()).unwrap(), m2(5.0));
        let text = "[dgp]\ntau = 1\nmargins = gamma(1, 2) bernoulli(0.3)\nspearman = 1 0 0.2; 0 1 0; 0.2 0 1\n\
                    propensity_linear = 0.5 -1\npropensity_interactions = 0:1:0.25\neffect_modifiers = 1:2\n";
        let c = crate::config::Config::parse(text).unwrap();
        let spec = DgpSpec::from_section(c.section("dgp").unwrap()).unwrap();
        assert_eq!(spec.margins[0], CovariateMargin::Gamma { mean: 1.0, dispersion: 2.0 });
        assert_eq!(spec.propensity.interactions, vec![(0, 1, 0.25)]);
        assert_eq!(spec.effect_modifiers, vec![(1, 2.0)]);
        let bad = crate::config::Config::parse("[dgp]\nbuiltin = m9\n").unwrap();
        assert!(matches!(DgpSpec::from_section(bad.section("dgp").unwrap()), Err(Error::Spec(_))));
    }
}
