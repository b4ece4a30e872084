//! Trainable univariate spline CDFs.
//!
//! A [`SquashedSplineCdf`] maps the real line to `(0, 1)` through a fixed
//! standardisation, `tanh`, a stack of unconditional splines on `[-1, 1]`
//! and the affine map back to the unit interval. It backs both covariate
//! marginal flows and the spline-based causal margins.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};
use crate::bijector::{self, spline, Bijector, RqsSpline};
use crate::error::{Error, Result};
use crate::stats;
use crate::train::{self, Objective, Split, TrainConfig, TrainReport};

/// Ranks are kept inside `[RANK_EPS, 1 - RANK_EPS]`.
pub const RANK_EPS: f64 = 1e-6;

pub fn clamp_rank(u: f64) -> f64 {
    u.clamp(RANK_EPS, 1.0 - RANK_EPS)
}

/// Stack of unconditional splines on `[-1, 1]`, one shared parameter row
/// per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineStack {
    layers: Vec<ParamId>,
    knots: usize,
}

impl SplineStack {
    /// Every layer starts as the identity.
    pub fn new(store: &mut ParamStore, n_layers: usize, knots: usize) -> Self {
        let p = spline::raw_len(knots);
        let layers = (0..n_layers).map(|_| store.add(vec![1, p], vec![0.0; p])).collect();
        Self { layers, knots }
    }

    /// Returns `(y, summed logdet)` for a column `x` inside `[-1, 1]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<(Var, Option<Var>)> {
        let mut h = x;
        let mut total: Option<Var> = None;
        for &id in &self.layers {
            let p = g.param(id);
            let (y, l) = g.spline(h, p, self.knots, 1.0)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
            h = y;
        }
        Ok((h, total))
    }

    pub fn freeze(&self, store: &ParamStore) -> Vec<RqsSpline> {
        self.layers
            .iter()
            .map(|&id| RqsSpline::from_raw(&store.get(id).values, self.knots, 1.0))
            .collect()
    }
}

/// `u = (S(tanh((x - loc) / scale)) + 1) / 2` with `S` a spline stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquashedSplineCdf {
    pub loc: f64,
    pub scale: f64,
    pub stack: SplineStack,
}

impl SquashedSplineCdf {
    /// Standardisation uses the sample mean and twice the sample standard
    /// deviation so the bulk of the data stays clear of tanh saturation.
    pub fn new(store: &mut ParamStore, samples: &[f64], n_layers: usize, knots: usize) -> Self {
        let loc = stats::mean(samples);
        let sd = stats::std_dev(samples);
        let scale = if sd > 0.0 && sd.is_finite() { 2.0 * sd } else { 1.0 };
        Self { loc, scale, stack: SplineStack::new(store, n_layers, knots) }
    }

    /// Records `(u, log p(x))` for a column `x`.
    pub fn cdf_and_logpdf<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<(Var, Var)> {
        let shifted = g.add_scalar(x, -self.loc);
        let z = g.scale(shifted, 1.0 / self.scale);
        let squashed = g.tanh(z);
        let ld_tanh = g.log_dtanh(z);
        let (s, ld_spline) = self.stack.forward(g, squashed)?;
        let half = g.add_scalar(s, 1.0);
        let u = g.scale(half, 0.5);
        let mut logpdf = g.add_scalar(ld_tanh, -(self.scale.ln()) - std::f64::consts::LN_2);
        if let Some(l) = ld_spline {
            logpdf = g.add(logpdf, l)?;
        }
        Ok((u, logpdf))
    }

    /// Frozen bijector from the real line onto `(0, 1)`.
    pub fn freeze(&self, store: &ParamStore) -> Result<Bijector> {
        let mut parts = vec![bijector::affine_bijector(1.0 / self.scale, -self.loc / self.scale)?, Bijector::Tanh];
        parts.extend(self.stack.freeze(store).into_iter().map(Bijector::Spline));
        parts.push(bijector::affine_bijector(0.5, 0.5)?);
        Bijector::compose(parts)
    }
}

/// A fitted continuous marginal: its CDF and inverse CDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateFlow {
    cdf: SquashedSplineCdf,
    params: ParamStore,
    frozen: Bijector,
    pub report: TrainReport,
}

struct MarginalObjective<'d> {
    cdf: &'d SquashedSplineCdf,
    samples: &'d [f64],
}

impl Objective for MarginalObjective<'_> {
    fn loss<'a>(&'a self, g: &mut Graph<'a>, rows: &[usize]) -> Result<Var> {
        let x: Vec<f64> = rows.iter().map(|&r| self.samples[r]).collect();
        let xv = g.constant(Mat::column(&x));
        let (_, logpdf) = self.cdf.cdf_and_logpdf(g, xv)?;
        let m = g.mean(logpdf);
        Ok(g.scale(m, -1.0))
    }
}

pub const MIN_MARGINAL_SAMPLES: usize = 50;

/// Fits a univariate flow to `samples` by maximum likelihood.
pub fn fit_marginal_flow(samples: &[f64], cfg: &TrainConfig, name: &str) -> Result<UnivariateFlow> {
    if samples.len() < MIN_MARGINAL_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "column `{name}` has {} rows; marginal flows need at least {MIN_MARGINAL_SAMPLES}",
            samples.len()
        )));
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericRow { what: "covariate value", row: i });
    }
    if samples.iter().all(|&v| v == samples[0]) {
        return Err(Error::DegenerateColumn(name.to_string()));
    }
    let mut params = ParamStore::new();
    let cdf = SquashedSplineCdf::new(&mut params, samples, cfg.flow_layers, cfg.knots);
    let split = Split::new(samples.len(), None, cfg.train_fraction, cfg.seed);
    let report = {
        let obj = MarginalObjective { cdf: &cdf, samples };
        train::train(&mut params, &obj, &split, cfg)?
    };
    let frozen = cdf.freeze(&params)?;
    Ok(UnivariateFlow { cdf, params, frozen, report })
}

impl UnivariateFlow {
    /// Ranks in `[ε, 1-ε]`, monotone in `x`.
    pub fn to_ranks(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| clamp_rank(self.frozen.forward_scalar(v).0)).collect()
    }

    pub fn from_ranks(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&v| self.frozen.inverse_scalar(clamp_rank(v)).0).collect()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        self.frozen.forward_scalar(x).1
    }

    /// Mean log-likelihood of `x` under the flow.
    pub fn mean_log_likelihood(&self, x: &[f64]) -> f64 {
        x.iter().map(|&v| self.log_density(v)).sum::<f64>() / x.len() as f64
    }

    pub fn bijector(&self) -> &Bijector {
        &self.frozen
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}
