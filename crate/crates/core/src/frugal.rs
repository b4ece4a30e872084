//! Frugal flows: the causal margin of `Y | do(T)` learnt jointly with the
//! copula of the covariate ranks conditional on the causal-margin rank.
//!
//! The outcome is pushed through a margin conditioned on `T` to its rank
//! `V_Y`. That rank is the pinned first dimension of a copula flow over
//! `(V_Y, V_Z)`, so the flow can only model `c(v_Z | v_Y)` and `V_Y` is
//! forced to be uniform. The training objective is
//! `log p_{Y|do(T)}(y | t) + log c(v_Z | v_Y)`.
//!
//! With effect modifiers `W`, the copula layout becomes `[V_W, V_Y, V_W̄]`
//! and the margin is conditioned on `(W, T)`; the prefix block only
//! conditions on itself, which keeps `V_Y` independent of `V_W`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, ParamId, ParamStore, Var};
use crate::copula::CopulaFlow;
use crate::data::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::marginal::{clamp_rank, MarginalTransform, SquashedSplineCdf, RANK_EPS};
use crate::rng;
use crate::stats;
use crate::train::{self, Objective, Split, TrainConfig, TrainReport};

/// Minimum number of rows for a frugal fit.
pub const MIN_FRUGAL_ROWS: usize = 100;

const CHUNK: usize = 4096;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Which family models `Y | do(T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MarginVariant {
    /// `N(α + τ t, σ²)`.
    ParametricGaussian,
    /// A spline CDF of `y - τ t`.
    NsfWithAteShift,
    /// A spline CDF of `y`, ignoring `T`.
    NsfUnconditional,
}

impl MarginVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::ParametricGaussian => "parametric-gaussian",
            Self::NsfWithAteShift => "nsf-with-ate-shift",
            Self::NsfUnconditional => "nsf-unconditional",
        }
    }
}

impl fmt::Display for MarginVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MarginVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "parametric-gaussian" | "gaussian" => Ok(Self::ParametricGaussian),
            "nsf-with-ate-shift" => Ok(Self::NsfWithAteShift),
            "nsf-unconditional" => Ok(Self::NsfUnconditional),
            other => Err(Error::UnsupportedVariant(format!("unknown margin variant `{other}`"))),
        }
    }
}

/// Parameterisation of the causal margin. Parameters live in the model's
/// store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CausalMargin {
    /// `y = α + xᵀβ + σ(t) ε` with design `x = [t, w, t·w]`, so `β[0]` is
    /// the treatment coefficient. `log_scale` holds one value, or one per
    /// arm when the scale is arm-specific.
    Gaussian { intercept: ParamId, coef: ParamId, log_scale: ParamId, arm_specific_scale: bool, n_modifiers: usize },
    Shifted { cdf: SquashedSplineCdf, shift: ParamId },
    Unconditional { cdf: SquashedSplineCdf },
}

/// Row data the margin needs besides the outcome.
struct MarginInputs {
    design: Mat,
    t: Vec<f64>,
}

impl CausalMargin {
    fn variant(&self) -> MarginVariant {
        match self {
            Self::Gaussian { .. } => MarginVariant::ParametricGaussian,
            Self::Shifted { .. } => MarginVariant::NsfWithAteShift,
            Self::Unconditional { .. } => MarginVariant::NsfUnconditional,
        }
    }

    /// Records `(v, log p(y | t, w))` as `n × 1` columns.
    fn forward<'a>(&'a self, g: &mut Graph<'a>, y: Var, inputs: &MarginInputs) -> Result<(Var, Var)> {
        let n = inputs.t.len();
        match self {
            Self::Gaussian { intercept, coef, log_scale, arm_specific_scale, .. } => {
                let x = g.constant(inputs.design.clone());
                let (b, a) = (g.param(*coef), g.param(*intercept));
                let mu = g.linear(x, b, a, None)?;
                let ls = g.param(*log_scale);
                let ls_row = if *arm_specific_scale {
                    let arms: Vec<f64> = inputs.t.iter().flat_map(|&t| [1.0 - t, t]).collect();
                    let arms = g.constant(Mat::from_vec(n, 2, arms));
                    let zero = g.constant(Mat::zeros(1, 1));
                    g.linear(arms, ls, zero, None)?
                } else {
                    g.broadcast_rows(ls, n)?
                };
                let resid = g.sub(y, mu)?;
                let neg = g.scale(ls_row, -1.0);
                let inv_scale = g.exp(neg);
                let z = g.mul(resid, inv_scale)?;
                let cdf = g.norm_cdf(z);
                let v = g.clamp(cdf, RANK_EPS, 1.0 - RANK_EPS);
                let sq = g.square(z);
                let half = g.scale(sq, -0.5);
                let lp = g.sub(half, ls_row)?;
                Ok((v, g.add_scalar(lp, -HALF_LN_2PI)))
            }
            Self::Shifted { cdf, shift } => {
                let s = g.param(*shift);
                let sb = g.broadcast_rows(s, n)?;
                let tv = g.constant(Mat::column(&inputs.t));
                let st = g.mul(sb, tv)?;
                let y0 = g.sub(y, st)?;
                let (u, lp) = cdf.cdf_and_logpdf(g, y0)?;
                Ok((g.clamp(u, RANK_EPS, 1.0 - RANK_EPS), lp))
            }
            Self::Unconditional { cdf } => {
                let (u, lp) = cdf.cdf_and_logpdf(g, y)?;
                Ok((g.clamp(u, RANK_EPS, 1.0 - RANK_EPS), lp))
            }
        }
    }

    fn scalar(store: &ParamStore, id: ParamId, i: usize) -> f64 {
        store.get(id).values[i]
    }

    /// Quantile function: `y` with rank `v` under treatment `t` and
    /// modifiers given by the design rows.
    fn quantiles(&self, store: &ParamStore, v: &[f64], inputs: &MarginInputs) -> Result<Vec<f64>> {
        match self {
            Self::Gaussian { intercept, coef, log_scale, arm_specific_scale, .. } => {
                let a = Self::scalar(store, *intercept, 0);
                let b = &store.get(*coef).values;
                let ls = &store.get(*log_scale).values;
                Ok(v.iter()
                    .enumerate()
                    .map(|(i, &vi)| {
                        let row = inputs.design.row(i);
                        let mu = a + row.iter().zip(b).map(|(x, c)| x * c).sum::<f64>();
                        let sigma = if *arm_specific_scale { ls[inputs.t[i] as usize].exp() } else { ls[0].exp() };
                        mu + sigma * stats::norm_ppf(clamp_rank(vi))
                    })
                    .collect())
            }
            Self::Shifted { cdf, shift } => {
                let tau = Self::scalar(store, *shift, 0);
                let frozen = cdf.freeze(store)?;
                Ok(v.iter()
                    .zip(&inputs.t)
                    .map(|(&vi, &t)| frozen.inverse_scalar(clamp_rank(vi)).0 + tau * t)
                    .collect())
            }
            Self::Unconditional { cdf } => {
                let frozen = cdf.freeze(store)?;
                Ok(v.iter().map(|&vi| frozen.inverse_scalar(clamp_rank(vi)).0).collect())
            }
        }
    }
}

/// Validation-set decomposition of the frugal log-likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodTerms {
    /// Mean `log p_{Y|do(T)}(y | t)`.
    pub margin: f64,
    /// Mean `log c(v_Z | v_Y)`.
    pub copula: f64,
}

impl LikelihoodTerms {
    pub fn total(&self) -> f64 {
        self.margin + self.copula
    }
}

/// Knobs of a frugal fit beyond the shared training configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrugalOptions {
    /// Separate Gaussian scales for the two treatment arms.
    pub arm_specific_scale: bool,
}

/// A trained frugal flow together with the covariate rank transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrugalFlowModel {
    pub schema: Schema,
    pub covariates: Vec<MarginalTransform>,
    pub margin: CausalMargin,
    pub copula: CopulaFlow,
    /// Covariate index of each non-pinned copula column, in copula order.
    copula_columns: Vec<usize>,
    /// Covariates the margin is conditioned on (empty for a plain fit).
    pub effect_modifiers: Vec<usize>,
    pub params: ParamStore,
    pub config: TrainConfig,
    pub options: FrugalOptions,
    pub report: TrainReport,
    /// Held-out likelihood terms at the restored epoch.
    pub validation: LikelihoodTerms,
}

#[derive(Clone, Copy)]
struct FrugalObjective<'m> {
    margin: &'m CausalMargin,
    copula: &'m CopulaFlow,
    pinned: usize,
    y: &'m [f64],
    t: &'m [f64],
    design: &'m Mat,
    /// Covariate ranks in copula order (without the outcome column).
    ranks: &'m Mat,
    /// When set, the margin is trained alone.
    margin_only: bool,
    /// When set, outcome ranks are fixed and only the copula is trained.
    fixed_outcome_ranks: Option<&'m [f64]>,
}

impl FrugalObjective<'_> {
    fn inputs(&self, rows: &[usize]) -> MarginInputs {
        MarginInputs { design: self.design.select_rows(rows), t: rows.iter().map(|&r| self.t[r]).collect() }
    }

    /// `(log p, log c)` per row as `n × 1` columns.
    fn terms<'a>(&'a self, g: &mut Graph<'a>, rows: &[usize]) -> Result<(Var, Option<Var>)> {
        let y: Vec<f64> = rows.iter().map(|&r| self.y[r]).collect();
        let yv = g.constant(Mat::column(&y));
        let (v, logp) = match self.fixed_outcome_ranks {
            Some(fixed) => {
                let v: Vec<f64> = rows.iter().map(|&r| fixed[r]).collect();
                (g.constant(Mat::column(&v)), g.constant(Mat::zeros(rows.len(), 1)))
            }
            None => self.margin.forward(g, yv, &self.inputs(rows))?,
        };
        if self.margin_only {
            return Ok((logp, None));
        }
        let ranks = self.ranks.select_rows(rows);
        let cols = ranks.cols;
        let joined = if cols == 0 {
            v
        } else if self.pinned == 0 {
            let rest = g.constant(ranks);
            g.concat(&[v, rest])?
        } else if self.pinned == cols {
            let rest = g.constant(ranks);
            g.concat(&[rest, v])?
        } else {
            let (a, b) = split_cols(&ranks, self.pinned);
            let (a, b) = (g.constant(a), g.constant(b));
            g.concat(&[a, v, b])?
        };
        let (_, logc) = self.copula.forward(g, joined)?;
        Ok((logp, Some(logc)))
    }
}

impl Objective for FrugalObjective<'_> {
    fn loss<'a>(&'a self, g: &mut Graph<'a>, rows: &[usize]) -> Result<Var> {
        let (logp, logc) = self.terms(g, rows)?;
        let total = match logc {
            Some(c) => g.add(logp, c)?,
            None => logp,
        };
        let m = g.mean(total);
        Ok(g.scale(m, -1.0))
    }
}

fn split_cols(m: &Mat, at: usize) -> (Mat, Mat) {
    let mut a = Vec::with_capacity(m.rows * at);
    let mut b = Vec::with_capacity(m.rows * (m.cols - at));
    for r in 0..m.rows {
        a.extend_from_slice(&m.row(r)[..at]);
        b.extend_from_slice(&m.row(r)[at..]);
    }
    (Mat::from_vec(m.rows, at, a), Mat::from_vec(m.rows, m.cols - at, b))
}

/// Design rows `[t, w, t·w]` for the Gaussian margin.
fn design_matrix(t: &[f64], modifiers: &[&[f64]]) -> Mat {
    let d = modifiers.len();
    let mut data = Vec::with_capacity(t.len() * (1 + 2 * d));
    for (i, &ti) in t.iter().enumerate() {
        data.push(ti);
        data.extend(modifiers.iter().map(|w| w[i]));
        data.extend(modifiers.iter().map(|w| ti * w[i]));
    }
    Mat::from_vec(t.len(), 1 + 2 * d, data)
}

/// Fits one rank transform per covariate column.
pub fn fit_covariate_transforms(data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MarginalTransform>> {
    data.z
        .iter()
        .zip(&data.discrete)
        .zip(&data.covariate_names)
        .enumerate()
        .map(|(j, ((col, &discrete), name))| {
            let col_cfg = TrainConfig { seed: cfg.seed.wrapping_add(1 + j as u64), ..cfg.clone() };
            MarginalTransform::fit(col, discrete, &col_cfg, name)
        })
        .collect()
}

fn check_data(data: &Dataset) -> Result<()> {
    if data.n() < MIN_FRUGAL_ROWS {
        return Err(Error::InsufficientData(format!(
            "frugal flows need at least {MIN_FRUGAL_ROWS} rows, got {}",
            data.n()
        )));
    }
    let treated = data.n_treated();
    if treated == 0 || treated == data.n() {
        return Err(Error::DegenerateTreatment("both treatment arms must be present".into()));
    }
    Ok(())
}

/// Covariate ranks, with discrete columns dequantised from `rng`.
fn covariate_ranks<R: rand::Rng>(
    transforms: &[MarginalTransform],
    data: &Dataset,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if transforms.len() != data.n_covariates() {
        return Err(Error::Schema(format!(
            "model has {} covariates, data has {}",
            transforms.len(),
            data.n_covariates()
        )));
    }
    transforms.iter().zip(&data.z).map(|(tr, col)| tr.to_ranks(col, rng)).collect()
}

fn ranks_in_order(ranks: &[Vec<f64>], columns: &[usize], n: usize) -> Mat {
    let mut data = Vec::with_capacity(n * columns.len());
    for i in 0..n {
        data.extend(columns.iter().map(|&c| ranks[c][i]));
    }
    Mat::from_vec(n, columns.len(), data)
}

fn difference_of_means(y: &[f64], t: &[f64]) -> (f64, f64) {
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0.0, 0.0, 0.0);
    for (&yi, &ti) in y.iter().zip(t) {
        if ti == 1.0 {
            s1 += yi;
            n1 += 1.0;
        } else {
            s0 += yi;
            n0 += 1.0;
        }
    }
    (s0 / n0, s1 / n1 - s0 / n0)
}

fn build_margin(
    store: &mut ParamStore,
    variant: MarginVariant,
    data: &Dataset,
    n_modifiers: usize,
    cfg: &TrainConfig,
    opts: &FrugalOptions,
) -> CausalMargin {
    let (base, tau) = difference_of_means(&data.y, &data.t);
    match variant {
        MarginVariant::ParametricGaussian => {
            let resid: Vec<f64> = data.y.iter().zip(&data.t).map(|(&y, &t)| y - base - tau * t).collect();
            let sd = stats::std_dev(&resid).max(1e-3);
            let intercept = store.add(vec![1, 1], vec![base]);
            let mut beta = vec![0.0; 1 + 2 * n_modifiers];
            beta[0] = tau;
            let coef = store.add(vec![1 + 2 * n_modifiers, 1], beta);
            let n_scales = if opts.arm_specific_scale { 2 } else { 1 };
            let log_scale = store.add(vec![n_scales, 1], vec![sd.ln(); n_scales]);
            CausalMargin::Gaussian {
                intercept,
                coef,
                log_scale,
                arm_specific_scale: opts.arm_specific_scale,
                n_modifiers,
            }
        }
        MarginVariant::NsfWithAteShift => {
            let shifted: Vec<f64> = data.y.iter().zip(&data.t).map(|(&y, &t)| y - tau * t).collect();
            let cdf = SquashedSplineCdf::new(store, &shifted, cfg.flow_layers, cfg.knots);
            let shift = store.add(vec![1, 1], vec![tau]);
            CausalMargin::Shifted { cdf, shift }
        }
        MarginVariant::NsfUnconditional => {
            CausalMargin::Unconditional { cdf: SquashedSplineCdf::new(store, &data.y, cfg.flow_layers, cfg.knots) }
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stages {
    Joint,
    /// Margin first, then the copula with the margin frozen.
    Sequential,
}

fn fit_inner(
    data: &Dataset,
    covariates: Vec<MarginalTransform>,
    variant: MarginVariant,
    modifiers: &[usize],
    cfg: &TrainConfig,
    opts: &FrugalOptions,
    stages: Stages,
) -> Result<FrugalFlowModel> {
    check_data(data)?;
    cfg.validate()?;
    let d = data.n_covariates();
    let n = data.n();
    let mut deq = rng::stream(cfg.seed, rng::DEQUANTISATION);
    let ranks = covariate_ranks(&covariates, data, &mut deq)?;

    let mut copula_columns: Vec<usize> = modifiers.to_vec();
    copula_columns.extend((0..d).filter(|j| !modifiers.contains(j)));
    let pinned = modifiers.len();
    let ordered = ranks_in_order(&ranks, &copula_columns, n);
    let w_cols: Vec<&[f64]> = modifiers.iter().map(|&j| data.z[j].as_slice()).collect();
    let design = design_matrix(&data.t, &w_cols);

    let mut params = ParamStore::new();
    let margin = build_margin(&mut params, variant, data, modifiers.len(), cfg, opts);
    let copula = CopulaFlow::new(&mut params, d + 1, pinned, cfg)?;
    let strata = data.treatment_strata();
    let split = Split::new(n, Some(&strata), cfg.train_fraction, cfg.seed);

    let joint = FrugalObjective {
        margin: &margin,
        copula: &copula,
        pinned,
        y: &data.y,
        t: &data.t,
        design: &design,
        ranks: &ordered,
        margin_only: false,
        fixed_outcome_ranks: None,
    };
    let report = match stages {
        Stages::Joint => train::train(&mut params, &joint, &split, cfg)?,
        Stages::Sequential => {
            train::train(&mut params, &FrugalObjective { margin_only: true, ..joint }, &split, cfg)?;
            let inputs = MarginInputs { design: design.clone(), t: data.t.clone() };
            let v = margin_ranks(&margin, &params, &data.y, &inputs)?;
            train::train(&mut params, &FrugalObjective { fixed_outcome_ranks: Some(&v), ..joint }, &split, cfg)?
        }
    };
    let validation = held_out_terms(&joint, &params, &split.val)?;
    log::info!(
        "frugal fit ({variant}): best epoch {} of {}, validation margin {:.4}, copula {:.4}",
        report.best_epoch,
        report.val_loss.len(),
        validation.margin,
        validation.copula
    );
    Ok(FrugalFlowModel {
        schema: data.schema(),
        covariates,
        margin,
        copula,
        copula_columns,
        effect_modifiers: modifiers.to_vec(),
        params,
        config: cfg.clone(),
        options: opts.clone(),
        report,
        validation,
    })
}

fn held_out_terms(obj: &FrugalObjective<'_>, store: &ParamStore, rows: &[usize]) -> Result<LikelihoodTerms> {
    let (mut margin, mut copula) = (0.0, 0.0);
    for chunk in rows.chunks(CHUNK) {
        let mut g = Graph::new(store);
        let (lp, lc) = obj.terms(&mut g, chunk)?;
        margin += g.value(lp).data.iter().sum::<f64>();
        if let Some(lc) = lc {
            copula += g.value(lc).data.iter().sum::<f64>();
        }
    }
    let n = rows.len().max(1) as f64;
    Ok(LikelihoodTerms { margin: margin / n, copula: copula / n })
}

fn margin_ranks(margin: &CausalMargin, store: &ParamStore, y: &[f64], inputs: &MarginInputs) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(y.len());
    for start in (0..y.len()).step_by(CHUNK) {
        let rows: Vec<usize> = (start..(start + CHUNK).min(y.len())).collect();
        let sub = MarginInputs { design: inputs.design.select_rows(&rows), t: rows.iter().map(|&r| inputs.t[r]).collect() };
        let mut g = Graph::new(store);
        let yv = g.constant(Mat::column(&y[start..start + rows.len()]));
        let (v, _) = margin.forward(&mut g, yv, &sub)?;
        out.extend_from_slice(&g.value(v).data);
    }
    Ok(out)
}

/// Fits covariate transforms, then the frugal flow.
pub fn fit_frugal_flow(data: &Dataset, variant: MarginVariant, cfg: &TrainConfig) -> Result<FrugalFlowModel> {
    check_data(data)?;
    let covariates = fit_covariate_transforms(data, cfg)?;
    fit_frugal_flow_with(data, covariates, variant, cfg, &FrugalOptions::default())
}

/// Fits the frugal flow on top of already fitted covariate transforms.
pub fn fit_frugal_flow_with(
    data: &Dataset,
    covariates: Vec<MarginalTransform>,
    variant: MarginVariant,
    cfg: &TrainConfig,
    opts: &FrugalOptions,
) -> Result<FrugalFlowModel> {
    fit_inner(data, covariates, variant, &[], cfg, opts, Stages::Joint)
}

/// The sequential alternative: the margin is fitted to `Y | T` alone and
/// the copula afterwards. It targets the conditional `p(y | t)` rather than
/// the causal margin and exists for comparison.
pub fn fit_two_stage(
    data: &Dataset,
    covariates: Vec<MarginalTransform>,
    variant: MarginVariant,
    cfg: &TrainConfig,
) -> Result<FrugalFlowModel> {
    fit_inner(data, covariates, variant, &[], cfg, &FrugalOptions::default(), Stages::Sequential)
}

/// Frugal flow whose Gaussian margin is conditioned on the covariates in
/// `w_columns` as well as `T`, giving conditional effects `τ + δᵀw`.
pub fn fit_heterogeneous_frugal_flow(
    data: &Dataset,
    w_columns: &[usize],
    cfg: &TrainConfig,
) -> Result<FrugalFlowModel> {
    let d = data.n_covariates();
    let mut sorted = w_columns.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() || sorted.len() >= d {
        return Err(Error::Spec(format!(
            "effect modifiers must be a non-empty proper subset of the {d} covariates; use fit_frugal_flow instead"
        )));
    }
    if sorted.len() != w_columns.len() || sorted.iter().any(|&j| j >= d) {
        return Err(Error::Spec("effect modifier columns must be distinct covariate indices".into()));
    }
    check_data(data)?;
    let covariates = fit_covariate_transforms(data, cfg)?;
    fit_inner(
        data,
        covariates,
        MarginVariant::ParametricGaussian,
        &sorted,
        cfg,
        &FrugalOptions::default(),
        Stages::Joint,
    )
}

impl FrugalFlowModel {
    pub fn variant(&self) -> MarginVariant {
        self.margin.variant()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_heterogeneous(&self) -> bool {
        !self.effect_modifiers.is_empty()
    }

    fn pinned(&self) -> usize {
        self.effect_modifiers.len()
    }

    /// The learnt average treatment effect.
    pub fn estimated_ate(&self) -> Result<f64> {
        match &self.margin {
            CausalMargin::Gaussian { coef, .. } => Ok(self.params.get(*coef).values[0]),
            CausalMargin::Shifted { shift, .. } => Ok(self.params.get(*shift).values[0]),
            CausalMargin::Unconditional { .. } => Err(Error::UnsupportedVariant(
                "nsf-unconditional does not learn a treatment effect during training".into(),
            )),
        }
    }

    /// Sets the Gaussian treatment coefficient or the location shift.
    pub fn set_ate(&mut self, tau: f64) -> Result<()> {
        let id = match &self.margin {
            CausalMargin::Gaussian { coef, .. } => *coef,
            CausalMargin::Shifted { shift, .. } => *shift,
            CausalMargin::Unconditional { .. } => {
                return Err(Error::UnsupportedVariant("nsf-unconditional has no treatment effect".into()))
            }
        };
        self.params.get_mut(id).values[0] = tau;
        Ok(())
    }

    /// Gaussian margin parameters `(intercept, treatment coefficient, scale)`
    /// (the control-arm scale when scales are arm-specific).
    pub fn gaussian_parameters(&self) -> Option<(f64, f64, f64)> {
        match &self.margin {
            CausalMargin::Gaussian { intercept, coef, log_scale, .. } => Some((
                self.params.get(*intercept).values[0],
                self.params.get(*coef).values[0],
                self.params.get(*log_scale).values[0].exp(),
            )),
            _ => None,
        }
    }

    pub fn set_gaussian_parameters(&mut self, intercept: f64, tau: f64, scale: f64) -> Result<()> {
        if !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        match &self.margin {
            CausalMargin::Gaussian { intercept: a, coef, log_scale, .. } => {
                let (a, coef, log_scale) = (*a, *coef, *log_scale);
                self.params.get_mut(a).values[0] = intercept;
                self.params.get_mut(coef).values[0] = tau;
                self.params.get_mut(log_scale).values.iter_mut().for_each(|v| *v = scale.ln());
                Ok(())
            }
            _ => Err(Error::UnsupportedVariant("not a parametric-gaussian margin".into())),
        }
    }

    /// Conditional effect `τ + δᵀw` of a heterogeneous fit.
    pub fn conditional_ate(&self, w: &[f64]) -> Result<f64> {
        let (coef, k) = match &self.margin {
            CausalMargin::Gaussian { coef, n_modifiers, .. } if *n_modifiers > 0 => (*coef, *n_modifiers),
            _ => return Err(Error::UnsupportedVariant("conditional effects need a heterogeneous fit".into())),
        };
        if w.len() != k {
            return Err(Error::Dimension(format!("expected {k} effect-modifier values, got {}", w.len())));
        }
        let b = &self.params.get(coef).values;
        Ok(b[0] + w.iter().zip(&b[1 + k..]).map(|(wi, d)| wi * d).sum::<f64>())
    }

    fn inputs(&self, t: &[f64], w: Option<&[Vec<f64>]>) -> Result<MarginInputs> {
        let k = self.effect_modifiers.len();
        let cols: Vec<&[f64]> = match w {
            Some(w) if w.len() == k && w.iter().all(|c| c.len() == t.len()) => w.iter().map(Vec::as_slice).collect(),
            None if k == 0 => Vec::new(),
            _ => {
                return Err(Error::Dimension(format!(
                    "margin needs {k} effect-modifier columns of length {}",
                    t.len()
                )))
            }
        };
        if let Some(i) = t.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!("treatment {} at row {i} is not binary", t[i])));
        }
        Ok(MarginInputs { design: design_matrix(t, &cols), t: t.to_vec() })
    }

    /// Ranks `V_{Y|do(T)}` of outcomes `y` under treatments `t`.
    pub fn causal_margin_ranks(&self, y: &[f64], t: &[f64]) -> Result<Vec<f64>> {
        self.conditional_margin_ranks(y, t, None)
    }

    /// As [`Self::causal_margin_ranks`], with effect-modifier columns for a
    /// heterogeneous fit.
    pub fn conditional_margin_ranks(&self, y: &[f64], t: &[f64], w: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        if y.len() != t.len() {
            return Err(Error::Dimension("outcome and treatment lengths differ".into()));
        }
        margin_ranks(&self.margin, &self.params, y, &self.inputs(t, w)?)
    }

    /// Outcomes with causal-margin rank `v` under treatments `t`.
    pub fn outcome_quantiles(&self, v: &[f64], t: &[f64], w: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        if v.len() != t.len() {
            return Err(Error::Dimension("rank and treatment lengths differ".into()));
        }
        self.margin.quantiles(&self.params, v, &self.inputs(t, w)?)
    }

    /// Control-arm quantiles `F⁻¹_{Y|do(T=0)}(v)`; only defined for margins
    /// that condition on `T` without effect modifiers.
    pub fn baseline_quantiles(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.is_heterogeneous() || self.variant() == MarginVariant::NsfUnconditional {
            return Err(Error::UnsupportedVariant(format!(
                "{} has no control-arm baseline margin",
                if self.is_heterogeneous() { "a heterogeneous fit" } else { "nsf-unconditional" }
            )));
        }
        self.outcome_quantiles(v, &vec![0.0; v.len()], None)
    }

    /// Covariate ranks of `data` in covariate order, `n × D`.
    pub fn covariate_ranks<R: rand::Rng>(&self, data: &Dataset, rng: &mut R) -> Result<Mat> {
        let ranks = covariate_ranks(&self.covariates, data, rng)?;
        Ok(ranks_in_order(&ranks, &(0..self.n_covariates()).collect::<Vec<_>>(), data.n()))
    }

    /// Copula-ordered matrix from outcome ranks and covariate ranks.
    fn assemble(&self, v_y: &[f64], v_z: &Mat) -> Result<Mat> {
        let d = self.n_covariates();
        if v_z.cols != d || v_z.rows != v_y.len() {
            return Err(Error::Dimension(format!(
                "expected {} x {d} covariate ranks, got {} x {}",
                v_y.len(),
                v_z.rows,
                v_z.cols
            )));
        }
        let pinned = self.pinned();
        let mut data = Vec::with_capacity(v_y.len() * (d + 1));
        for (i, &vy) in v_y.iter().enumerate() {
            let row = v_z.row(i);
            for (k, &c) in self.copula_columns.iter().enumerate() {
                if k == pinned {
                    data.push(vy);
                }
                data.push(row[c]);
            }
            if pinned == d {
                data.push(vy);
            }
        }
        Ok(Mat::from_vec(v_y.len(), d + 1, data))
    }

    /// Per-row `(log p_{Y|do(T)}(y | t), log c(v_Z | v_Y))`.
    pub fn log_likelihood_rows(
        &self,
        y: &[f64],
        t: &[f64],
        v_z: &Mat,
        w: Option<&[Vec<f64>]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if y.len() != t.len() {
            return Err(Error::Dimension("outcome and treatment lengths differ".into()));
        }
        if let Some(i) = v_z.data.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain(format!("covariate rank {} at row {}", v_z.data[i], i / v_z.cols.max(1))));
        }
        let inputs = self.inputs(t, w)?;
        let mut margin = Vec::with_capacity(y.len());
        let mut v_y = Vec::with_capacity(y.len());
        for start in (0..y.len()).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(y.len())).collect();
            let sub = MarginInputs { design: inputs.design.select_rows(&rows), t: rows.iter().map(|&r| t[r]).collect() };
            let mut g = Graph::new(&self.params);
            let yv = g.constant(Mat::column(&y[start..start + rows.len()]));
            let (v, lp) = self.margin.forward(&mut g, yv, &sub)?;
            v_y.extend_from_slice(&g.value(v).data);
            margin.extend_from_slice(&g.value(lp).data);
        }
        let copula = self.copula.log_density(&self.params, &self.assemble(&v_y, v_z)?)?;
        if let Some(row) = margin.iter().zip(&copula).position(|(a, b)| !(a + b).is_finite()) {
            return Err(Error::NumericRow { what: "frugal log-likelihood", row });
        }
        Ok((margin, copula))
    }

    /// Mean frugal log-likelihood of the rows, split into its two terms.
    pub fn frugal_log_likelihood(&self, y: &[f64], t: &[f64], v_z: &Mat) -> Result<LikelihoodTerms> {
        let w = self.modifier_values_from_ranks(v_z);
        let (m, c) = self.log_likelihood_rows(y, t, v_z, w.as_deref())?;
        Ok(LikelihoodTerms { margin: stats::mean(&m), copula: stats::mean(&c) })
    }

    /// Mean frugal log-likelihood of a dataset; discrete covariates are
    /// dequantised from `seed`.
    pub fn dataset_log_likelihood(&self, data: &Dataset, seed: u64) -> Result<LikelihoodTerms> {
        let mut r = rng::stream(seed, rng::DEQUANTISATION);
        let v_z = self.covariate_ranks(data, &mut r)?;
        let w = self.modifier_values(data);
        let (m, c) = self.log_likelihood_rows(&data.y, &data.t, &v_z, w.as_deref())?;
        Ok(LikelihoodTerms { margin: stats::mean(&m), copula: stats::mean(&c) })
    }

    /// Effect-modifier columns of `data`, if the fit has any.
    pub fn modifier_values(&self, data: &Dataset) -> Option<Vec<Vec<f64>>> {
        self.is_heterogeneous().then(|| self.effect_modifiers.iter().map(|&j| data.z[j].clone()).collect())
    }

    fn modifier_values_from_ranks(&self, v_z: &Mat) -> Option<Vec<Vec<f64>>> {
        self.is_heterogeneous().then(|| {
            self.effect_modifiers.iter().map(|&j| self.covariates[j].from_ranks(&v_z.col_vec(j))).collect()
        })
    }

    /// Pushes base uniforms `u_z` (`n × D`) through the inverse copula given
    /// outcome ranks `v_y`; returns covariate ranks in covariate order.
    pub fn sample_covariate_ranks(&self, v_y: &[f64], u_z: &Mat) -> Result<Mat> {
        let base = self.assemble(v_y, u_z)?;
        let v = self.copula.sample(&self.params, &base)?;
        let d = self.n_covariates();
        let pinned = self.pinned();
        let mut out = Mat::zeros(v.rows, d);
        for r in 0..v.rows {
            let row = v.row(r);
            for (k, &c) in self.copula_columns.iter().enumerate() {
                let pos = if k < pinned { k } else { k + 1 };
                out.data[r * d + c] = row[pos];
            }
        }
        Ok(out)
    }

    /// Covariate values from ranks, column-major.
    pub fn covariates_from_ranks(&self, v_z: &Mat) -> Result<Vec<Vec<f64>>> {
        if v_z.cols != self.n_covariates() {
            return Err(Error::Dimension(format!("expected {} rank columns, got {}", self.n_covariates(), v_z.cols)));
        }
        Ok(self.covariates.iter().enumerate().map(|(j, tr)| tr.from_ranks(&v_z.col_vec(j))).collect())
    }
}
