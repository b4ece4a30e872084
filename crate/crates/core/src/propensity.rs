//! Propensity flows: the conditional copula of the treatment given the
//! covariates.
//!
//! The binary treatment is dequantised through its empirical CDF to a rank
//! `V_T`, and a stack of spline layers on `[-1, 1]` maps `V_T` to a
//! uniform `V_{T|Z}`. Every layer's spline parameters are emitted by a
//! network that sees only the standardised covariates, so for fixed `z` the
//! whole stack is a monotone bijection `C(· | z)` of the unit interval.
//!
//! The implied propensity is the mass of ranks that land on `T = 1`:
//! `p̂(T=1 | z) = 1 - C(F(0) | z)`, where `F(0)` is the empirical share of
//! controls. Sampling draws `u` and sets `T = 1` exactly when
//! `u > C(F(0) | z)`, which is the inverse-CDF step applied to
//! `C⁻¹(u | z)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, MaskedMlp, ParamStore, Var};
use crate::bijector::{spline, RqsSpline};
use crate::error::{Error, Result};
use crate::marginal::{clamp_rank, dequantise, StepCdf};
use crate::rng;
use crate::stats;
use crate::train::{self, Objective, Split, TrainConfig, TrainReport};

const CHUNK: usize = 4096;
/// Rows sampled when checking an override for positivity.
pub const OVERRIDE_CHECK_ROWS: usize = 1000;

/// A user-chosen treatment mechanism replacing the learnt one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityOverride {
    /// `p(T=1 | z) = p` for every row.
    Constant(f64),
    /// `p(T=1 | z) = expit(intercept + coefficientsᵀ z)`.
    LogisticLinear { intercept: f64, coefficients: Vec<f64> },
}

impl PropensityOverride {
    pub fn probability(&self, z: &[f64]) -> f64 {
        match self {
            Self::Constant(p) => *p,
            Self::LogisticLinear { intercept, coefficients } => {
                stats::expit(intercept + coefficients.iter().zip(z).map(|(b, x)| b * x).sum::<f64>())
            }
        }
    }

    /// Checks the shape against `d` covariates and evaluates the override on
    /// up to [`OVERRIDE_CHECK_ROWS`] evenly spaced rows of `z`
    /// (column-major); every value must lie strictly inside `(0, 1)`.
    pub fn validate(&self, z: &[Vec<f64>]) -> Result<()> {
        if let Self::LogisticLinear { coefficients, .. } = self {
            if coefficients.len() != z.len() {
                return Err(Error::Spec(format!(
                    "propensity override has {} coefficients for {} covariates",
                    coefficients.len(),
                    z.len()
                )));
            }
        }
        let n = z.first().map_or(0, Vec::len);
        let rows = n.min(OVERRIDE_CHECK_ROWS);
        let mut row = vec![0.0; z.len()];
        for k in 0..rows.max(1) {
            let i = if n == 0 { None } else { Some(k * n / rows) };
            if let Some(i) = i {
                for (slot, col) in row.iter_mut().zip(z) {
                    *slot = col[i];
                }
            }
            let p = self.probability(&row);
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Spec(format!("propensity override gives p = {p}, outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Learnt conditional copula of `T` given `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFlowModel {
    pub covariate_names: Vec<String>,
    pub treatment: StepCdf,
    /// Standardisation of the conditioner context.
    z_mean: Vec<f64>,
    z_scale: Vec<f64>,
    knots: usize,
    layers: Vec<MaskedMlp>,
    pub params: ParamStore,
    pub report: TrainReport,
}

struct PropensityObjective<'m> {
    model: &'m PropensityFlowModel,
    v: &'m [f64],
    context: &'m Mat,
}

impl Objective for PropensityObjective<'_> {
    fn loss<'a>(&'a self, g: &mut Graph<'a>, rows: &[usize]) -> Result<Var> {
        let v: Vec<f64> = rows.iter().map(|&r| self.v[r]).collect();
        let ctx = g.constant(self.context.select_rows(rows));
        let vv = g.constant(Mat::column(&v));
        let (_, logp) = self.model.forward(g, vv, ctx)?;
        let m = g.mean(logp);
        Ok(g.scale(m, -1.0))
    }
}

fn check_treatment(t: &[f64]) -> Result<usize> {
    if let Some(&bad) = t.iter().find(|&&x| x != 0.0 && x != 1.0) {
        return Err(Error::Schema(format!("treatment must be 0/1, found {bad}")));
    }
    let treated = t.iter().filter(|&&x| x == 1.0).count();
    if treated == 0 || treated == t.len() {
        return Err(Error::DegenerateTreatment("both treatment arms must be present".into()));
    }
    Ok(treated)
}

/// Fits the conditional treatment copula by maximum likelihood.
/// `z` is column-major with one vector per covariate.
pub fn fit_propensity_flow(
    t: &[f64],
    z: &[Vec<f64>],
    covariate_names: &[String],
    cfg: &TrainConfig,
) -> Result<PropensityFlowModel> {
    cfg.validate()?;
    check_treatment(t)?;
    if z.is_empty() || z.iter().any(|c| c.len() != t.len()) || covariate_names.len() != z.len() {
        return Err(Error::Dimension("covariate columns must match the treatment length and names".into()));
    }
    let treatment = StepCdf::fit(t)?;
    let z_mean: Vec<f64> = z.iter().map(|c| stats::mean(c)).collect();
    let z_scale: Vec<f64> =
        z.iter().map(|c| stats::std_dev(c)).map(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 }).collect();

    let mut params = ParamStore::new();
    let mut init = rng::stream(cfg.seed, rng::INIT);
    let p = spline::raw_len_free(cfg.knots);
    let layers = (0..cfg.flow_layers)
        .map(|_| MaskedMlp::new(&mut params, &mut init, &[1], z.len(), cfg.nn_width, cfg.nn_depth, &vec![1; p]))
        .collect();
    let mut model = PropensityFlowModel {
        covariate_names: covariate_names.to_vec(),
        treatment,
        z_mean,
        z_scale,
        knots: cfg.knots,
        layers,
        params: ParamStore::new(),
        report: TrainReport::default(),
    };

    let mut deq = rng::stream(cfg.seed, rng::DEQUANTISATION);
    let v = dequantise(t, &model.treatment, &mut deq)?;
    let context = model.context(z)?;
    let strata: Vec<u8> = t.iter().map(|&x| x as u8).collect();
    let split = Split::new(t.len(), Some(&strata), cfg.train_fraction, cfg.seed);
    let report = train::train(&mut params, &PropensityObjective { model: &model, v: &v, context: &context }, &split, cfg)?;
    log::info!(
        "propensity fit: best epoch {} of {}, validation loss {:.4}",
        report.best_epoch,
        report.val_loss.len(),
        report.best_val_loss
    );
    model.params = params;
    model.report = report;
    Ok(model)
}

impl PropensityFlowModel {
    pub fn n_covariates(&self) -> usize {
        self.z_mean.len()
    }

    /// Standardised covariates as an `n × D` row-major matrix.
    fn context(&self, z: &[Vec<f64>]) -> Result<Mat> {
        if z.len() != self.n_covariates() {
            return Err(Error::Schema(format!(
                "propensity model has {} covariates, got {}",
                self.n_covariates(),
                z.len()
            )));
        }
        let n = z.first().map_or(0, Vec::len);
        if z.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension("covariate columns differ in length".into()));
        }
        let mut data = Vec::with_capacity(n * z.len());
        for i in 0..n {
            for (j, col) in z.iter().enumerate() {
                data.push((col[i] - self.z_mean[j]) / self.z_scale[j]);
            }
        }
        Ok(Mat::from_vec(n, z.len(), data))
    }

    /// Records `v ↦ C(v | z)` and `log ∂C/∂v` for an `n × 1` rank column.
    fn forward<'a>(&'a self, g: &mut Graph<'a>, v: Var, ctx: Var) -> Result<(Var, Var)> {
        let shifted = g.scale(v, 2.0);
        let mut x = g.add_scalar(shifted, -1.0);
        let mut total: Option<Var> = None;
        for net in &self.layers {
            let params = net.forward(g, x, Some(ctx))?;
            let (y, ld) = g.spline(x, params, self.knots, 1.0)?;
            x = y;
            total = Some(match total {
                Some(t) => g.add(t, ld)?,
                None => ld,
            });
        }
        let half = g.add_scalar(x, 1.0);
        let u = g.scale(half, 0.5);
        let logp = match total {
            Some(t) => t,
            None => g.constant(Mat::zeros(g.value(v).rows, 1)),
        };
        Ok((u, logp))
    }

    fn check_ranks(v: &[f64], n: usize) -> Result<()> {
        if v.len() != n {
            return Err(Error::Dimension(format!("{} ranks for {n} covariate rows", v.len())));
        }
        if let Some(i) = v.iter().position(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::Domain(format!("rank {} at row {i}", v[i])));
        }
        Ok(())
    }

    /// `(C(v | z), log c(v | z))` per row.
    pub fn conditional_ranks_with_density(&self, v: &[f64], z: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ctx = self.context(z)?;
        Self::check_ranks(v, ctx.rows)?;
        let mut u = Vec::with_capacity(v.len());
        let mut logp = Vec::with_capacity(v.len());
        for start in (0..v.len()).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(v.len())).collect();
            let mut g = Graph::new(&self.params);
            let c = g.constant(ctx.select_rows(&rows));
            let vv = g.constant(Mat::column(&v[start..start + rows.len()]));
            let (uu, lp) = self.forward(&mut g, vv, c)?;
            u.extend(g.value(uu).data.iter().map(|&x| x.clamp(0.0, 1.0)));
            logp.extend_from_slice(&g.value(lp).data);
        }
        Ok((u, logp))
    }

    /// Treatment ranks `V_T` to conditional ranks `V_{T|Z}`.
    pub fn conditional_ranks(&self, v: &[f64], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.conditional_ranks_with_density(v, z)?.0)
    }

    /// Inverse of [`Self::conditional_ranks`]: `V_T = C⁻¹(u | z)`.
    pub fn treatment_ranks(&self, u: &[f64], z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let ctx = self.context(z)?;
        Self::check_ranks(u, ctx.rows)?;
        let p = spline::raw_len_free(self.knots);
        let mut out = Vec::with_capacity(u.len());
        for start in (0..u.len()).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(u.len())).collect();
            let c = ctx.select_rows(&rows);
            let mut x: Vec<f64> = u[start..start + rows.len()].iter().map(|&v| 2.0 * v - 1.0).collect();
            // conditioner outputs do not depend on x, so any input will do
            let dummy = Mat::zeros(rows.len(), 1);
            for net in self.layers.iter().rev() {
                let params = net.eval(&self.params, &dummy, Some(&c))?;
                for (r, xr) in x.iter_mut().enumerate() {
                    *xr = RqsSpline::from_raw(&params.row(r)[..p], self.knots, 1.0).inverse(*xr).0;
                }
            }
            out.extend(x.iter().map(|&xr| clamp_rank(0.5 * (xr + 1.0))));
        }
        Ok(out)
    }

    /// Conditional rank of the control cut `F(0)`: treatment is assigned when
    /// a uniform draw exceeds it.
    fn control_cut(&self, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let f0 = self.treatment.values()[0];
        let n = z.first().map_or(0, Vec::len);
        self.conditional_ranks(&vec![f0; n], z)
    }

    /// Implied `p̂(T = 1 | z)` per row.
    pub fn propensity(&self, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.control_cut(z)?.into_iter().map(|c| 1.0 - c).collect())
    }

    /// Treatments from uniforms `u`: `T = 1` iff `u > C(F(0) | z)`.
    pub fn sample_treatment(&self, z: &[Vec<f64>], u: &[f64]) -> Result<Vec<f64>> {
        let cut = self.control_cut(z)?;
        Self::check_ranks(u, cut.len())?;
        Ok(u.iter().zip(&cut).map(|(&ui, &c)| if ui > c { 1.0 } else { 0.0 }).collect())
    }

    /// Mean held-out log-density of dequantised treatment ranks.
    pub fn mean_log_likelihood(&self, t: &[f64], z: &[Vec<f64>], seed: u64) -> Result<f64> {
        let mut deq = rng::stream(seed, rng::DEQUANTISATION);
        let v = dequantise(t, &self.treatment, &mut deq)?;
        Ok(stats::mean(&self.conditional_ranks_with_density(&v, z)?.1))
    }
}

/// Treatments from a fixed probability per row: `T = 1` iff `u > 1 - p`.
/// Larger `p` never turns a treated row into a control.
pub fn sample_with_probabilities(p: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if p.len() != u.len() {
        return Err(Error::Dimension(format!("{} probabilities for {} uniforms", p.len(), u.len())));
    }
    Ok(p.iter().zip(u).map(|(&pi, &ui)| if ui > 1.0 - pi { 1.0 } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            flow_layers: 2,
            nn_width: 16,
            nn_depth: 2,
            batch_size: 256,
            patience: 10,
            lr_decay_patience: 4,
            max_epochs: 60,
            seed,
            ..Default::default()
        }
    }

    fn logistic_data(n: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let mut r = rng::stream(seed, "prop-test");
        let z: Vec<f64> = (0..n).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
        let p: Vec<f64> = z.iter().map(|&x| stats::expit(1.5 * x - 0.3)).collect();
        let t = p.iter().map(|&pi| if r.random::<f64>() < pi { 1.0 } else { 0.0 }).collect();
        (t, vec![z], p)
    }

    #[test]
    fn single_arm_is_rejected() {
        let z = vec![vec![0.0; 10]];
        let err = fit_propensity_flow(&[1.0; 10], &z, &["z1".into()], &quick(1)).unwrap_err();
        assert!(matches!(err, Error::DegenerateTreatment(_)));
    }

    #[test]
    fn learns_a_logistic_propensity_and_round_trips_ranks() {
        let (t, z, p) = logistic_data(4000, 2);
        let m = fit_propensity_flow(&t, &z, &["z1".into()], &quick(3)).unwrap();
        let ph = m.propensity(&z).unwrap();
        let mae = ph.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        assert!(mae < 0.05, "propensity MAE {mae}");

        let v: Vec<f64> = (1..200).map(|i| i as f64 / 200.0).collect();
        let zz = vec![(0..199).map(|i| -2.0 + 0.02 * i as f64).collect::<Vec<_>>()];
        let u = m.conditional_ranks(&v, &zz).unwrap();
        let back = m.treatment_ranks(&u, &zz).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sampling_is_monotone_in_probability() {
        let u: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        let lo = sample_with_probabilities(&vec![0.3; 100], &u).unwrap();
        let hi = sample_with_probabilities(&vec![0.6; 100], &u).unwrap();
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
        assert_eq!(lo.iter().sum::<f64>(), 30.0);
    }

    #[test]
    fn override_validation() {
        let z = vec![vec![0.0, 1.0, 2.0]];
        assert!(PropensityOverride::Constant(0.5).validate(&z).is_ok());
        assert!(PropensityOverride::Constant(1.0).validate(&z).is_err());
        let steep = PropensityOverride::LogisticLinear { intercept: 0.0, coefficients: vec![500.0] };
        assert!(steep.validate(&z).is_err());
        let wrong = PropensityOverride::LogisticLinear { intercept: 0.0, coefficients: vec![1.0, 1.0] };
        assert!(matches!(wrong.validate(&z), Err(Error::Spec(_))));
    }
}
