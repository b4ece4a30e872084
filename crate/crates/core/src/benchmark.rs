//! Benchmark generation from a trained frugal flow.
//!
//! The pipeline runs in a fixed order, each step on its own random stream:
//!
//! 1. a Gaussian-copula pair `(V_{Y|do(T)}, U_{T|Z})` with correlation `ρ`,
//! 2. independent uniforms `U_Z`,
//! 3. the inverse copula flow turns `U_Z` into covariate ranks given `V_Y`,
//! 4. covariate values through the marginal inverses,
//! 5. treatments from `U_{T|Z}` and the chosen propensity,
//! 6. outcomes from `V_Y`, `T` and the chosen causal margin.
//!
//! `ρ ≠ 0` links treatment assignment to the outcome rank without passing
//! through `Z`, which is exactly unobserved confounding. Because the margin
//! only enters at step 6, swapping it leaves `(Z, T)` bit-identical, and the
//! propensity only enters at step 5.

use std::fmt;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::config::{Config, Section};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::frugal::FrugalFlowModel;
use crate::marginal::clamp_rank;
use crate::propensity::{sample_with_probabilities, PropensityFlowModel, PropensityOverride};
use crate::rng;
use crate::stats::{self, expit, norm_cdf, norm_ppf};

/// Version of the metadata sidecar layout.
pub const METADATA_VERSION: u16 = 1;

/// Causal margin used to turn `V_{Y|do(T)}` into outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeMargin {
    /// `y = intercept + τ t + σ Φ⁻¹(v)`.
    Gaussian { tau: f64, intercept: f64, sigma: f64 },
    /// `y = 1{v < expit(β t + c)}`.
    Logistic { beta: f64, c: f64 },
    /// `y = 1{v < Φ(β t + c)}`.
    Probit { beta: f64, c: f64 },
    /// The fitted control-arm margin shifted by `τ` under treatment.
    LearnedNsf { tau: f64 },
}

impl OutcomeMargin {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Logistic { .. } => "logistic",
            Self::Probit { .. } => "probit",
            Self::LearnedNsf { .. } => "learned-nsf",
        }
    }
}

/// How treatments are assigned at step 5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreatmentMechanism {
    /// The trained propensity flow.
    Learned,
    Override(PropensityOverride),
    /// `p(T = 1) = p` regardless of the covariates.
    Randomized(f64),
}

/// Linear effect modification: under treatment the Gaussian outcome gains
/// `Σ δ_k w_k` on top of `τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub w_columns: Vec<usize>,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub n: usize,
    pub seed: u64,
    /// Gaussian-copula correlation between the outcome rank and the
    /// treatment-assignment uniform.
    pub rho: f64,
    pub margin: OutcomeMargin,
    pub propensity: TreatmentMechanism,
    pub heterogeneity: Option<Heterogeneity>,
}

impl BenchmarkSpec {
    pub fn new(n: usize, seed: u64, rho: f64, margin: OutcomeMargin, propensity: TreatmentMechanism) -> Self {
        Self { n, seed, rho, margin, propensity, heterogeneity: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Spec("benchmark needs n >= 1".into()));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::Spec(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match &self.margin {
            OutcomeMargin::Gaussian { tau, intercept, sigma } => {
                if !(*sigma > 0.0) || !finite(&[*tau, *intercept, *sigma]) {
                    return Err(Error::Spec("gaussian margin needs finite τ, intercept and σ > 0".into()));
                }
            }
            OutcomeMargin::Logistic { beta, c } | OutcomeMargin::Probit { beta, c } => {
                if !finite(&[*beta, *c]) {
                    return Err(Error::Spec("binary margin needs finite β and c".into()));
                }
            }
            OutcomeMargin::LearnedNsf { tau } => {
                if !tau.is_finite() {
                    return Err(Error::Spec("learned-nsf margin needs a finite τ".into()));
                }
            }
        }
        match &self.propensity {
            TreatmentMechanism::Randomized(p) if !(*p > 0.0 && *p < 1.0) => {
                return Err(Error::Spec(format!("randomized propensity must lie in (0, 1), got {p}")));
            }
            TreatmentMechanism::Override(PropensityOverride::Constant(p)) if !(*p > 0.0 && *p < 1.0) => {
                return Err(Error::Spec(format!("constant propensity must lie in (0, 1), got {p}")));
            }
            _ => {}
        }
        if let Some(h) = &self.heterogeneity {
            if !matches!(self.margin, OutcomeMargin::Gaussian { .. }) {
                return Err(Error::Spec(format!(
                    "effect modification needs the gaussian margin, not {}",
                    self.margin.tag()
                )));
            }
            if h.w_columns.is_empty() || h.w_columns.len() != h.deltas.len() {
                return Err(Error::Spec("heterogeneity needs one δ per modifier column".into()));
            }
        }
        Ok(())
    }
}

/// A generated benchmark with its latent ranks.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub data: Dataset,
    /// `V_{Y|do(T)}` per row.
    pub outcome_ranks: Vec<f64>,
    /// `U_{T|Z}` per row.
    pub treatment_uniforms: Vec<f64>,
    /// Covariate ranks `V_Z`, `n × D`.
    pub covariate_ranks: Mat,
    /// ATE of the generator, computed from its parameters.
    pub generation_ate: f64,
}

/// `n` pairs from a bivariate Gaussian copula with correlation `rho`.
pub fn gaussian_copula_pair(rho: f64, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("copula correlation must lie in (-1, 1), got {rho}")));
    }
    let mut r = rng::stream(seed, rng::COPULA_PAIR);
    let s = (1.0 - rho * rho).sqrt();
    let mut u1 = Vec::with_capacity(n);
    let mut u2 = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut r);
        let b: f64 = StandardNormal.sample(&mut r);
        u1.push(clamp_rank(norm_cdf(a)));
        u2.push(clamp_rank(norm_cdf(rho * a + s * b)));
    }
    Ok((u1, u2))
}

/// Outcomes from causal-margin ranks. `baseline` maps ranks to control-arm
/// outcomes and is only needed by [`OutcomeMargin::LearnedNsf`]; `modifiers`
/// are the effect-modifier columns for heterogeneous Gaussian margins.
pub fn outcome_from_margin(
    v: &[f64],
    t: &[f64],
    margin: &OutcomeMargin,
    baseline: Option<&dyn Fn(&[f64]) -> Result<Vec<f64>>>,
    modifiers: Option<(&[Vec<f64>], &[f64])>,
) -> Result<Vec<f64>> {
    if v.len() != t.len() {
        return Err(Error::Dimension(format!("{} ranks for {} treatments", v.len(), t.len())));
    }
    if let Some(i) = v.iter().position(|&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Domain(format!("rank {} at row {i}", v[i])));
    }
    let modification = |i: usize| -> f64 {
        modifiers.map_or(0.0, |(w, d)| w.iter().zip(d).map(|(col, delta)| delta * col[i]).sum())
    };
    Ok(match margin {
        OutcomeMargin::Gaussian { tau, intercept, sigma } => (0..v.len())
            .map(|i| intercept + (tau + modification(i)) * t[i] + sigma * norm_ppf(v[i]))
            .collect(),
        OutcomeMargin::Logistic { beta, c } => {
            v.iter().zip(t).map(|(&vi, &ti)| if vi < expit(beta * ti + c) { 1.0 } else { 0.0 }).collect()
        }
        OutcomeMargin::Probit { beta, c } => {
            v.iter().zip(t).map(|(&vi, &ti)| if vi < norm_cdf(beta * ti + c) { 1.0 } else { 0.0 }).collect()
        }
        OutcomeMargin::LearnedNsf { tau } => {
            let base = baseline.ok_or_else(|| Error::Spec("learned-nsf margin needs a fitted baseline".into()))?(v)?;
            base.iter().zip(t).map(|(&b, &ti)| b + tau * ti).collect()
        }
    })
}

/// `E[Y | do(T=1)] - E[Y | do(T=0)]` of a margin. Location-shift margins
/// share everything but the shift `τ t` between arms, so the difference is
/// `τ` itself; `modifier_means` adds the averaged effect modification.
pub fn generation_ate(margin: &OutcomeMargin, modifier_means: Option<(&[f64], &[f64])>) -> f64 {
    match margin {
        OutcomeMargin::Gaussian { tau, .. } => match modifier_means {
            None => *tau,
            Some((m, d)) => tau + m.iter().zip(d).map(|(a, b)| a * b).sum::<f64>(),
        },
        OutcomeMargin::LearnedNsf { tau } => *tau,
        OutcomeMargin::Logistic { beta, c } => expit(beta + c) - expit(*c),
        OutcomeMargin::Probit { beta, c } => norm_cdf(beta + c) - norm_cdf(*c),
    }
}

fn check_models(ff: &FrugalFlowModel, pf: Option<&PropensityFlowModel>, spec: &BenchmarkSpec) -> Result<()> {
    let d = ff.n_covariates();
    match (&spec.propensity, pf) {
        (TreatmentMechanism::Learned, None) => {
            return Err(Error::Spec("learned propensity requested but no propensity model given".into()))
        }
        (TreatmentMechanism::Learned, Some(p)) => {
            let names: Vec<&str> = ff.schema.covariates().map(|c| c.name.as_str()).collect();
            let theirs: Vec<&str> = p.covariate_names.iter().map(String::as_str).collect();
            if names != theirs {
                return Err(Error::Schema(format!(
                    "frugal flow covariates {names:?} differ from propensity covariates {theirs:?}"
                )));
            }
        }
        (TreatmentMechanism::Override(PropensityOverride::LogisticLinear { coefficients, .. }), _)
            if coefficients.len() != d =>
        {
            return Err(Error::Schema(format!("propensity override has {} coefficients for {d} covariates", coefficients.len())));
        }
        _ => {}
    }
    if let Some(h) = &spec.heterogeneity {
        if h.w_columns != ff.effect_modifiers {
            return Err(Error::Spec(format!(
                "effect modifiers {:?} need a frugal flow fitted with the same modifiers, got {:?}",
                h.w_columns, ff.effect_modifiers
            )));
        }
    }
    Ok(())
}

/// Runs the six-step pipeline.
pub fn generate_benchmark(
    ff: &FrugalFlowModel,
    pf: Option<&PropensityFlowModel>,
    spec: &BenchmarkSpec,
) -> Result<Benchmark> {
    spec.validate()?;
    check_models(ff, pf, spec)?;
    let (n, d) = (spec.n, ff.n_covariates());

    // 1. confounded rank pair
    let (v_y, u_t) = gaussian_copula_pair(spec.rho, n, spec.seed)?;
    // 2. independent covariate uniforms
    let mut r = rng::stream(spec.seed, rng::UNIFORM_Z);
    let u_z = Mat::from_vec(n, d, (0..n * d).map(|_| rng::open_uniform(&mut r)).collect());
    // 3. correlated covariate ranks
    let v_z = ff.sample_covariate_ranks(&v_y, &u_z)?;
    // 4. covariate values
    let z = ff.covariates_from_ranks(&v_z)?;
    // 5. treatments
    let t = match &spec.propensity {
        TreatmentMechanism::Learned => pf.expect("checked above").sample_treatment(&z, &u_t)?,
        TreatmentMechanism::Override(o) => {
            o.validate(&z)?;
            let p: Vec<f64> = (0..n).map(|i| o.probability(&z.iter().map(|c| c[i]).collect::<Vec<_>>())).collect();
            sample_with_probabilities(&p, &u_t)?
        }
        TreatmentMechanism::Randomized(p) => sample_with_probabilities(&vec![*p; n], &u_t)?,
    };
    // 6. outcomes
    let modifiers: Option<(Vec<Vec<f64>>, Vec<f64>)> =
        spec.heterogeneity.as_ref().map(|h| (h.w_columns.iter().map(|&j| z[j].clone()).collect(), h.deltas.clone()));
    let baseline = |v: &[f64]| ff.baseline_quantiles(v);
    let y = outcome_from_margin(
        &v_y,
        &t,
        &spec.margin,
        Some(&baseline),
        modifiers.as_ref().map(|(w, dl)| (w.as_slice(), dl.as_slice())),
    )?;
    let means: Option<Vec<f64>> = modifiers.as_ref().map(|(w, _)| w.iter().map(|c| stats::mean(c)).collect());
    let ate = generation_ate(
        &spec.margin,
        means.as_ref().zip(modifiers.as_ref()).map(|(m, (_, dl))| (m.as_slice(), dl.as_slice())),
    );

    let names: Vec<String> = ff.schema.covariates().map(|c| c.name.clone()).collect();
    let discrete: Vec<bool> = ff.covariates.iter().map(|c| c.is_discrete()).collect();
    let data = Dataset::with_names(
        names,
        z,
        t,
        y,
        discrete,
        ff.schema.treatment().to_string(),
        ff.schema.outcome().to_string(),
    )?;
    Ok(Benchmark { data, outcome_ranks: v_y, treatment_uniforms: u_t, covariate_ranks: v_z, generation_ate: ate })
}

/// One row of a confounding sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    /// Mean of `DoM - ATE` over the replicates.
    pub bias: f64,
    /// Mean of `|DoM - ATE|` over the replicates.
    pub mean_abs_error: f64,
    /// Monte-Carlo standard error of `bias`.
    pub stderr: f64,
}

/// Difference-of-means bias at each correlation, over `repeats` replicates
/// seeded `base.seed, base.seed + 1, …`.
pub fn confounding_sweep(
    ff: &FrugalFlowModel,
    pf: Option<&PropensityFlowModel>,
    base: &BenchmarkSpec,
    rhos: &[f64],
    repeats: usize,
) -> Result<Vec<SweepRow>> {
    if !rhos.windows(2).all(|w| w[0] <= w[1]) {
        return Err(Error::Spec("confounding sweep needs a sorted list of correlations".into()));
    }
    if repeats == 0 {
        return Err(Error::Spec("confounding sweep needs at least one replicate".into()));
    }
    rhos.iter()
        .map(|&rho| {
            let errors = (0..repeats)
                .map(|k| {
                    let spec = BenchmarkSpec { rho, seed: base.seed.wrapping_add(k as u64), ..base.clone() };
                    let b = generate_benchmark(ff, pf, &spec)?;
                    Ok(crate::estimators::difference_of_means(&b.data)?.point - b.generation_ate)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SweepRow {
                rho,
                bias: stats::mean(&errors),
                mean_abs_error: errors.iter().map(|e| e.abs()).sum::<f64>() / repeats as f64,
                stderr: if repeats > 1 { stats::std_dev(&errors) / (repeats as f64).sqrt() } else { 0.0 },
            })
        })
        .collect()
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

const BENCHMARK_KEYS: &[&str] = &[
    "n",
    "seed",
    "rho",
    "margin",
    "tau",
    "intercept",
    "sigma",
    "beta",
    "c",
    "propensity",
    "p",
    "propensity_intercept",
    "propensity_coefficients",
    "w_columns",
    "deltas",
];

impl BenchmarkSpec {
    /// The spec as a `[benchmark]` section. Floats use Rust's shortest
    /// round-tripping representation, so parsing the section back gives
    /// identical values.
    pub fn to_section(&self) -> Section {
        let mut s = Section::new("benchmark");
        s.set("n", self.n);
        s.set("seed", self.seed);
        s.set("rho", self.rho);
        s.set("margin", self.margin.tag());
        match &self.margin {
            OutcomeMargin::Gaussian { tau, intercept, sigma } => {
                s.set("tau", tau);
                s.set("intercept", intercept);
                s.set("sigma", sigma);
            }
            OutcomeMargin::Logistic { beta, c } | OutcomeMargin::Probit { beta, c } => {
                s.set("beta", beta);
                s.set("c", c);
            }
            OutcomeMargin::LearnedNsf { tau } => s.set("tau", tau),
        }
        match &self.propensity {
            TreatmentMechanism::Learned => s.set("propensity", "learned"),
            TreatmentMechanism::Randomized(p) => {
                s.set("propensity", "randomized");
                s.set("p", p);
            }
            TreatmentMechanism::Override(PropensityOverride::Constant(p)) => {
                s.set("propensity", "constant");
                s.set("p", p);
            }
            TreatmentMechanism::Override(PropensityOverride::LogisticLinear { intercept, coefficients }) => {
                s.set("propensity", "logistic-linear");
                s.set("propensity_intercept", intercept);
                s.set("propensity_coefficients", join(coefficients));
            }
        }
        if let Some(h) = &self.heterogeneity {
            s.set("w_columns", join(&h.w_columns));
            s.set("deltas", join(&h.deltas));
        }
        s
    }

    pub fn from_section(s: &Section) -> Result<Self> {
        s.check_keys(BENCHMARK_KEYS)?;
        let margin = match s.get_or("margin", "gaussian".to_string())?.as_str() {
            "gaussian" => OutcomeMargin::Gaussian {
                tau: s.require("tau")?,
                intercept: s.get_or("intercept", 0.0)?,
                sigma: s.get_or("sigma", 1.0)?,
            },
            "logistic" => OutcomeMargin::Logistic { beta: s.require("beta")?, c: s.require("c")? },
            "probit" => OutcomeMargin::Probit { beta: s.require("beta")?, c: s.require("c")? },
            "learned-nsf" => OutcomeMargin::LearnedNsf { tau: s.require("tau")? },
            other => return Err(Error::Spec(format!("unknown margin `{other}`"))),
        };
        let propensity = match s.get_or("propensity", "learned".to_string())?.as_str() {
            "learned" => TreatmentMechanism::Learned,
            "randomized" => TreatmentMechanism::Randomized(s.get_or("p", 0.5)?),
            "constant" => TreatmentMechanism::Override(PropensityOverride::Constant(s.require("p")?)),
            "logistic-linear" => TreatmentMechanism::Override(PropensityOverride::LogisticLinear {
                intercept: s.get_or("propensity_intercept", 0.0)?,
                coefficients: s
                    .list("propensity_coefficients")?
                    .ok_or_else(|| Error::Spec("logistic-linear propensity needs coefficients".into()))?,
            }),
            other => return Err(Error::Spec(format!("unknown propensity `{other}`"))),
        };
        let heterogeneity = match (s.list::<usize>("w_columns")?, s.list::<f64>("deltas")?) {
            (None, None) => None,
            (Some(w_columns), Some(deltas)) => Some(Heterogeneity { w_columns, deltas }),
            _ => return Err(Error::Spec("w_columns and deltas must be given together".into())),
        };
        let spec = Self { n: s.require("n")?, seed: s.get_or("seed", 0)?, rho: s.get_or("rho", 0.0)?, margin, propensity, heterogeneity };
        spec.validate()?;
        Ok(spec)
    }
}

/// Sidecar recording everything needed to regenerate a benchmark:
/// the spec, and SHA-256 fingerprints of the model files used.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub spec: BenchmarkSpec,
    pub frugal_fingerprint: String,
    pub propensity_fingerprint: Option<String>,
    pub generation_ate: f64,
}

impl Metadata {
    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        let mut f = Section::new("format");
        f.set("kind", "frugal-benchmark-metadata");
        f.set("version", METADATA_VERSION);
        c.push(f);
        c.push(self.spec.to_section());
        let mut m = Section::new("models");
        m.set("frugal_sha256", &self.frugal_fingerprint);
        if let Some(p) = &self.propensity_fingerprint {
            m.set("propensity_sha256", p);
        }
        c.push(m);
        let mut r = Section::new("result");
        r.set("generation_ate", self.generation_ate);
        c.push(r);
        c
    }

    pub fn from_config(c: &Config) -> Result<Self> {
        let f = c.section("format").ok_or_else(|| Error::Corrupt("metadata has no [format] section".into()))?;
        let version: u16 = f.require("version")?;
        if version != METADATA_VERSION {
            return Err(Error::Version { found: version, expected: METADATA_VERSION });
        }
        let spec = BenchmarkSpec::from_section(
            c.section("benchmark").ok_or_else(|| Error::Corrupt("metadata has no [benchmark] section".into()))?,
        )?;
        let m = c.section("models").ok_or_else(|| Error::Corrupt("metadata has no [models] section".into()))?;
        let r = c.section("result");
        Ok(Self {
            spec,
            frugal_fingerprint: m.require("frugal_sha256")?,
            propensity_fingerprint: m.get("propensity_sha256")?,
            generation_ate: r.map(|r| r.get_or("generation_ate", f64::NAN)).transpose()?.unwrap_or(f64::NAN),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;

    #[test]
    fn copula_pair_correlation() {
        assert!(gaussian_copula_pair(1.0, 10, 0).is_err());
        for (rho, tol) in [(0.0, 0.01), (0.5, 0.01)] {
            let (a, b) = gaussian_copula_pair(rho, 100_000, 4).unwrap();
            let na: Vec<f64> = a.iter().map(|&u| norm_ppf(u)).collect();
            let nb: Vec<f64> = b.iter().map(|&u| norm_ppf(u)).collect();
            let r = pearson(&na, &nb);
            assert!((r - rho).abs() < tol, "rho {rho}: {r}");
        }
        let (a, b) = gaussian_copula_pair(0.999, 10_000, 1).unwrap();
        let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 0.15, "{max}");
    }

    #[test]
    fn margin_examples() {
        let g = OutcomeMargin::Gaussian { tau: 2.0, intercept: 0.0, sigma: 1.0 };
        assert_eq!(outcome_from_margin(&[0.5], &[1.0], &g, None, None).unwrap(), vec![2.0]);
        let l = OutcomeMargin::Logistic { beta: 2.0, c: -1.0 };
        assert_eq!(outcome_from_margin(&[0.2], &[1.0], &l, None, None).unwrap(), vec![1.0]);
        assert_eq!(outcome_from_margin(&[0.3], &[0.0], &l, None, None).unwrap(), vec![0.0]);
        let learned = OutcomeMargin::LearnedNsf { tau: 1.0 };
        assert!(matches!(outcome_from_margin(&[0.5], &[1.0], &learned, None, None), Err(Error::Spec(_))));
        assert_eq!(generation_ate(&g, None), 2.0);
        assert_eq!(generation_ate(&learned, None), 1.0);
    }

    #[test]
    fn spec_validation() {
        let g = OutcomeMargin::Gaussian { tau: 1.0, intercept: 0.0, sigma: 1.0 };
        let ok = BenchmarkSpec::new(10, 0, 0.0, g.clone(), TreatmentMechanism::Randomized(0.5));
        assert!(ok.validate().is_ok());
        assert!(BenchmarkSpec { n: 0, ..ok.clone() }.validate().is_err());
        assert!(BenchmarkSpec { rho: 1.0, ..ok.clone() }.validate().is_err());
        let het = Heterogeneity { w_columns: vec![0], deltas: vec![1.0] };
        let bad = BenchmarkSpec {
            margin: OutcomeMargin::Logistic { beta: 1.0, c: 0.0 },
            heterogeneity: Some(het),
            ..ok.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn spec_section_round_trips() {
        let spec = BenchmarkSpec {
            n: 123,
            seed: 9,
            rho: 0.1 + 0.2,
            margin: OutcomeMargin::Probit { beta: 1.0 / 3.0, c: -0.7 },
            propensity: TreatmentMechanism::Override(PropensityOverride::LogisticLinear {
                intercept: 0.25,
                coefficients: vec![0.1, -2.0 / 3.0],
            }),
            heterogeneity: None,
        };
        let text = {
            let mut c = Config::default();
            c.push(spec.to_section());
            c.render()
        };
        let back = BenchmarkSpec::from_section(Config::parse(&text).unwrap().section("benchmark").unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
