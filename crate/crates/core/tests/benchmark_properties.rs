//! Invariants of benchmark generation, the model file format and the
//! reference estimators.

use std::sync::OnceLock;

use frugal_core::benchmark::{
    gaussian_copula_pair, generate_benchmark, generation_ate, outcome_from_margin, BenchmarkSpec, Metadata,
    OutcomeMargin, TreatmentMechanism,
};
use frugal_core::config::Config;
use frugal_core::data::Dataset;
use frugal_core::dgp::{self, simulate_dgp};
use frugal_core::estimators::{difference_of_means, outcome_regression_ate};
use frugal_core::frugal::{fit_frugal_flow, FrugalFlowModel, MarginVariant};
use frugal_core::propensity::{fit_propensity_flow, PropensityFlowModel, PropensityOverride};
use frugal_core::serialize::{self, ModelBundle};
use frugal_core::train::TrainConfig;
use frugal_core::Error;
use proptest::prelude::*;

fn quick_cfg() -> TrainConfig {
    TrainConfig { flow_layers: 1, nn_width: 8, nn_depth: 1, max_epochs: 10, batch_size: 256, seed: 3, ..Default::default() }
}

fn models() -> &'static (FrugalFlowModel, PropensityFlowModel) {
    static MODELS: OnceLock<(FrugalFlowModel, PropensityFlowModel)> = OnceLock::new();
    MODELS.get_or_init(|| {
        let s = simulate_dgp(&dgp::m2(1.0), 600, 8).unwrap();
        let ff = fit_frugal_flow(&s.data, MarginVariant::ParametricGaussian, &quick_cfg()).unwrap();
        let d = &s.data;
        let pf = fit_propensity_flow(&d.t, &d.z, &d.covariate_names, &quick_cfg()).unwrap();
        (ff, pf)
    })
}

fn arb_margin() -> impl Strategy<Value = OutcomeMargin> {
    prop_oneof![
        (-10.0f64..10.0, -5.0f64..5.0, 0.1f64..5.0)
            .prop_map(|(tau, intercept, sigma)| OutcomeMargin::Gaussian { tau, intercept, sigma }),
        (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(beta, c)| OutcomeMargin::Logistic { beta, c }),
        (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(beta, c)| OutcomeMargin::Probit { beta, c }),
        (-10.0f64..10.0).prop_map(|tau| OutcomeMargin::LearnedNsf { tau }),
    ]
}

fn arb_mechanism() -> impl Strategy<Value = TreatmentMechanism> {
    prop_oneof![
        Just(TreatmentMechanism::Learned),
        (0.01f64..0.99).prop_map(TreatmentMechanism::Randomized),
        (0.01f64..0.99).prop_map(|p| TreatmentMechanism::Override(PropensityOverride::Constant(p))),
        (-1.0f64..1.0, prop::collection::vec(-0.5f64..0.5, 4)).prop_map(|(intercept, coefficients)| {
            TreatmentMechanism::Override(PropensityOverride::LogisticLinear { intercept, coefficients })
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn specs_survive_the_config_format(
        n in 1usize..100_000,
        seed in any::<u64>(),
        rho in -0.99f64..0.99,
        margin in arb_margin(),
        propensity in arb_mechanism(),
    ) {
        let spec = BenchmarkSpec::new(n, seed, rho, margin, propensity);
        let meta = Metadata {
            spec: spec.clone(),
            frugal_fingerprint: "ab".repeat(32),
            propensity_fingerprint: None,
            generation_ate: generation_ate(&spec.margin, None),
        };
        let back = Metadata::from_config(&Config::parse(&meta.to_config().render()).unwrap()).unwrap();
        prop_assert_eq!(back, meta);
    }

    #[test]
    fn gaussian_generation_ate_is_tau(tau in -1e6f64..1e6, intercept in -10.0f64..10.0, sigma in 1e-3f64..10.0) {
        prop_assert_eq!(generation_ate(&OutcomeMargin::Gaussian { tau, intercept, sigma }, None), tau);
    }

    #[test]
    fn binary_margins_have_the_stated_effect(beta in -3.0f64..3.0, c in -3.0f64..3.0) {
        let l = generation_ate(&OutcomeMargin::Logistic { beta, c }, None);
        let p = generation_ate(&OutcomeMargin::Probit { beta, c }, None);
        prop_assert!(l.abs() <= 1.0 && p.abs() <= 1.0);
        prop_assert_eq!(l.signum() * beta.signum() >= 0.0, true);
        prop_assert_eq!(p.signum() * beta.signum() >= 0.0, true);
    }

    #[test]
    fn gaussian_outcomes_are_monotone_in_the_rank(
        mut v in prop::collection::vec(0.001f64..0.999, 2..40),
        t in 0u8..2,
        tau in -5.0f64..5.0,
    ) {
        v.sort_by(f64::total_cmp);
        let t = vec![f64::from(t); v.len()];
        let y = outcome_from_margin(&v, &t, &OutcomeMargin::Gaussian { tau, intercept: 0.0, sigma: 1.0 }, None, None).unwrap();
        prop_assert!(y.windows(2).all(|w| w[0] <= w[1]));
        let b = outcome_from_margin(&v, &t, &OutcomeMargin::Logistic { beta: tau, c: 0.0 }, None, None).unwrap();
        prop_assert!(b.iter().all(|&x| x == 0.0 || x == 1.0));
        // higher ranks never switch a success off
        prop_assert!(b.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn copula_pairs_are_open_ranks(rho in -0.99f64..0.99, n in 1usize..200, seed in any::<u64>()) {
        let (a, b) = gaussian_copula_pair(rho, n, seed).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().chain(&b).all(|&u| u > 0.0 && u < 1.0));
    }

    #[test]
    fn dom_is_affine_equivariant(
        y in prop::collection::vec(-10.0f64..10.0, 8..60),
        scale in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let n = y.len();
        let t: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let z = vec![(0..n).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()];
        let base = Dataset::new(z.clone(), t.clone(), y.clone(), vec![false]).unwrap();
        let moved = Dataset::new(z, t, y.iter().map(|v| scale * v + shift).collect(), vec![false]).unwrap();
        let (a, b) = (difference_of_means(&base).unwrap(), difference_of_means(&moved).unwrap());
        prop_assert!((b.point - scale * a.point).abs() < 1e-9 * (1.0 + a.point.abs() * scale));
        prop_assert!((b.stderr - scale * a.stderr).abs() < 1e-9 * (1.0 + a.stderr * scale));
        let (a, b) = (outcome_regression_ate(&base).unwrap(), outcome_regression_ate(&moved).unwrap());
        prop_assert!((b.point - scale * a.point).abs() < 1e-8 * (1.0 + a.point.abs() * scale));
    }
}

#[test]
fn saved_models_regenerate_identical_benchmarks() {
    let (ff, pf) = models();
    let dir = std::env::temp_dir().join(format!("frugal-core-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ffm");
    let bundle = ModelBundle { frugal: ff.clone(), propensity: Some(pf.clone()) };
    let bytes = serialize::save(&bundle, &path).unwrap();
    let (loaded, read): (ModelBundle, Vec<u8>) = serialize::load(&path).unwrap();
    assert_eq!(bytes, read);
    assert_eq!(serialize::to_bytes(&loaded).unwrap(), bytes);

    let spec = BenchmarkSpec::new(
        500,
        21,
        0.3,
        OutcomeMargin::Gaussian { tau: 2.0, intercept: 1.0, sigma: 0.5 },
        TreatmentMechanism::Learned,
    );
    let a = generate_benchmark(ff, Some(pf), &spec).unwrap();
    let b = generate_benchmark(&loaded.frugal, loaded.propensity.as_ref(), &spec).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(a.generation_ate, 2.0);

    let c = generate_benchmark(ff, Some(pf), &BenchmarkSpec { seed: 22, ..spec }).unwrap();
    assert_ne!(a.data.y, c.data.y);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn damaged_model_files_are_rejected() {
    let (ff, _) = models();
    let bytes = serialize::to_bytes(ff).unwrap();
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x20;
    assert!(matches!(serialize::from_bytes::<FrugalFlowModel>(&flipped), Err(Error::Corrupt(_))));
    let mut versioned = bytes.clone();
    versioned[8] = 9;
    assert!(matches!(serialize::from_bytes::<FrugalFlowModel>(&versioned), Err(Error::Version { .. })));
    assert!(serialize::from_bytes::<FrugalFlowModel>(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn mismatched_models_and_specs_are_rejected() {
    let (ff, pf) = models();
    let gaussian = OutcomeMargin::Gaussian { tau: 1.0, intercept: 0.0, sigma: 1.0 };
    let learned = BenchmarkSpec::new(10, 1, 0.0, gaussian.clone(), TreatmentMechanism::Learned);
    assert!(matches!(generate_benchmark(ff, None, &learned), Err(Error::Spec(_))));
    let short = TreatmentMechanism::Override(PropensityOverride::LogisticLinear { intercept: 0.0, coefficients: vec![1.0] });
    assert!(generate_benchmark(ff, Some(pf), &BenchmarkSpec::new(10, 1, 0.0, gaussian.clone(), short)).is_err());
    for bad in [
        BenchmarkSpec::new(0, 1, 0.0, gaussian.clone(), TreatmentMechanism::Randomized(0.5)),
        BenchmarkSpec::new(10, 1, 1.0, gaussian.clone(), TreatmentMechanism::Randomized(0.5)),
        BenchmarkSpec::new(10, 1, 0.0, gaussian.clone(), TreatmentMechanism::Randomized(1.0)),
        BenchmarkSpec::new(10, 1, 0.0, OutcomeMargin::Gaussian { tau: 1.0, intercept: 0.0, sigma: 0.0 }, TreatmentMechanism::Learned),
    ] {
        assert!(matches!(generate_benchmark(ff, Some(pf), &bad), Err(Error::Spec(_) | Error::InvalidParameter(_))), "{bad:?}");
    }
}
