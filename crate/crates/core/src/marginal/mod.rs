//! Marginal transforms from covariate columns to copula ranks.
//!
//! Continuous columns get a fitted [`UnivariateFlow`]; discrete columns use
//! an empirical [`StepCdf`] with randomised dequantisation.

mod ecdf;
mod flow;

pub use ecdf::{dequantise, distributional_transform, inverse_distributional_transform, StepCdf};
pub use flow::{
    clamp_rank, fit_marginal_flow, SplineStack, SquashedSplineCdf, UnivariateFlow, MIN_MARGINAL_SAMPLES, RANK_EPS,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::train::TrainConfig;

/// Rank transform for one covariate column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MarginalTransform {
    Continuous(UnivariateFlow),
    Discrete(StepCdf),
}

impl MarginalTransform {
    pub fn fit(values: &[f64], discrete: bool, cfg: &TrainConfig, name: &str) -> Result<Self> {
        if discrete {
            StepCdf::fit(values).map(Self::Discrete)
        } else {
            fit_marginal_flow(values, cfg, name).map(Self::Continuous)
        }
    }

    /// Ranks in `[ε, 1-ε]`; discrete columns draw dequantisation noise from `rng`.
    pub fn to_ranks<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Self::Continuous(f) => Ok(f.to_ranks(x)),
            Self::Discrete(c) => dequantise(x, c, rng),
        }
    }

    pub fn from_ranks(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Self::Continuous(f) => f.from_ranks(u),
            Self::Discrete(c) => inverse_distributional_transform(u, c),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::Discrete(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng;
    use crate::stats::{ks_pvalue, ks_uniform};
    use rand_distr::{Distribution, Exp, Normal};

    fn quick_cfg() -> TrainConfig {
        TrainConfig { max_epochs: 300, patience: 30, batch_size: 256, flow_layers: 2, knots: 8, ..Default::default() }
    }

    #[test]
    fn normal_flow_gives_uniform_ranks_and_round_trips() {
        let mut r = rng::stream(5, "marginal-normal");
        let d = Normal::new(2.0, 3.0).unwrap();
        let x: Vec<f64> = (0..4000).map(|_| d.sample(&mut r)).collect();
        let flow = fit_marginal_flow(&x, &quick_cfg(), "x").unwrap();
        let fresh: Vec<f64> = (0..4000).map(|_| d.sample(&mut r)).collect();
        let u = flow.to_ranks(&fresh);
        assert!(u.iter().all(|&v| (RANK_EPS..=1.0 - RANK_EPS).contains(&v)));
        let ks = ks_uniform(&u);
        assert!(ks_pvalue(ks, u.len()) > 0.001, "KS {ks}");
        let back = flow.from_ranks(&u[..100]);
        for (a, b) in fresh[..100].iter().zip(&back) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
        // ranks are monotone in x
        let mut sorted = fresh.clone();
        sorted.sort_by(f64::total_cmp);
        let us = flow.to_ranks(&sorted);
        assert!(us.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn skewed_flow_beats_gaussian_fit() {
        let mut r = rng::stream(6, "marginal-exp");
        let d = Exp::new(1.0).unwrap();
        let x: Vec<f64> = (0..3000).map(|_| d.sample(&mut r)).collect();
        let flow = fit_marginal_flow(&x, &quick_cfg(), "x").unwrap();
        let m = crate::stats::mean(&x);
        let s = crate::stats::std_dev(&x);
        let gauss: f64 = x.iter().map(|&v| crate::stats::norm_logpdf((v - m) / s) - s.ln()).sum::<f64>() / x.len() as f64;
        assert!(flow.mean_log_likelihood(&x) > gauss + 0.05);
    }

    #[test]
    fn preconditions() {
        let cfg = quick_cfg();
        assert!(matches!(fit_marginal_flow(&[1.0; 10], &cfg, "x"), Err(Error::InsufficientData(_))));
        assert!(matches!(fit_marginal_flow(&[1.0; 60], &cfg, "age"), Err(Error::DegenerateColumn(n)) if n == "age"));
        let mut x: Vec<f64> = (0..60).map(f64::from).collect();
        x[7] = f64::NAN;
        assert!(matches!(fit_marginal_flow(&x, &cfg, "x"), Err(Error::NumericRow { row: 7, .. })));
    }

    #[test]
    fn discrete_handler_round_trips() {
        let x: Vec<f64> = (0..200).map(|i| f64::from(i % 3)).collect();
        let h = MarginalTransform::fit(&x, true, &quick_cfg(), "x").unwrap();
        let mut r = rng::stream(1, rng::DEQUANTISATION);
        let u = h.to_ranks(&x, &mut r).unwrap();
        assert_eq!(h.from_ranks(&u), x);
    }
}
