//! Invertible transforms with forward, inverse and log-|det J|.
//!
//! Univariate kinds act elementwise on every coordinate; permutations act
//! on the whole vector. [`Bijector::compose`] applies parts left to right
//! and checks that each part's image lies inside the next part's domain.

pub mod spline;

use serde::{Deserialize, Serialize};

pub use spline::RqsSpline;

use crate::autodiff::tape::log_dtanh;
use crate::error::{Error, Result};

/// Closed interval, possibly unbounded. Infinite ends are stored as
/// `null` since JSON has no infinities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    #[serde(with = "end::lo")]
    pub lo: f64,
    #[serde(with = "end::hi")]
    pub hi: f64,
}

mod end {
    macro_rules! bound {
        ($name:ident, $inf:expr) => {
            pub mod $name {
                use serde::{Deserialize, Deserializer, Serialize, Serializer};

                pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
                    (if v.is_finite() { Some(*v) } else { None }).serialize(s)
                }

                pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
                    Ok(Option::<f64>::deserialize(d)?.unwrap_or($inf))
                }
            }
        };
    }
    bound!(lo, f64::NEG_INFINITY);
    bound!(hi, f64::INFINITY);
}

impl Interval {
    pub const REAL: Interval = Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, other: &Interval) -> bool {
        other.lo >= self.lo && other.hi <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bijector {
    Identity,
    /// `y = scale * x + shift`, declared on `domain`.
    Affine { scale: f64, shift: f64, domain: Interval },
    Tanh,
    Permutation(Vec<usize>),
    Spline(RqsSpline),
    Compose(Vec<Bijector>),
}

pub fn tanh_bijector() -> Bijector {
    Bijector::Tanh
}

pub fn affine_bijector(scale: f64, shift: f64) -> Result<Bijector> {
    affine_on(scale, shift, Interval::REAL)
}

/// Affine map restricted to `domain`, e.g. the `[0,1] -> [-1,1]` wrapper.
pub fn affine_on(scale: f64, shift: f64, domain: Interval) -> Result<Bijector> {
    if scale == 0.0 || !scale.is_finite() || !shift.is_finite() {
        return Err(Error::InvalidParameter(format!("affine scale {scale}, shift {shift}")));
    }
    Ok(Bijector::Affine { scale, shift, domain })
}

pub fn permutation_bijector(perm: Vec<usize>) -> Result<Bijector> {
    let mut seen = vec![false; perm.len()];
    for &p in &perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::InvalidParameter(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(Bijector::Permutation(perm))
}

impl Bijector {
    pub fn compose(parts: Vec<Bijector>) -> Result<Bijector> {
        for (i, w) in parts.windows(2).enumerate() {
            let image = w[0].codomain();
            if !w[1].domain().contains(&image) {
                return Err(Error::Composition(format!(
                    "part {i} maps into [{}, {}] but part {} accepts [{}, {}]",
                    image.lo,
                    image.hi,
                    i + 1,
                    w[1].domain().lo,
                    w[1].domain().hi
                )));
            }
        }
        Ok(Bijector::Compose(parts))
    }

    pub fn domain(&self) -> Interval {
        match self {
            Bijector::Affine { domain, .. } => *domain,
            Bijector::Compose(parts) => parts.first().map(|p| p.domain()).unwrap_or(Interval::REAL),
            _ => Interval::REAL,
        }
    }

    pub fn codomain(&self) -> Interval {
        match self {
            Bijector::Identity | Bijector::Permutation(_) | Bijector::Spline(_) => Interval::REAL,
            Bijector::Tanh => Interval::new(-1.0, 1.0),
            Bijector::Affine { scale, shift, domain } => {
                let a = scale * domain.lo + shift;
                let b = scale * domain.hi + shift;
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                Interval::new(if lo.is_nan() { f64::NEG_INFINITY } else { lo }, if hi.is_nan() { f64::INFINITY } else { hi })
            }
            Bijector::Compose(parts) => parts.last().map(|p| p.codomain()).unwrap_or(Interval::REAL),
        }
    }

    /// Scalar forward map for univariate kinds.
    pub fn forward_scalar(&self, x: f64) -> (f64, f64) {
        match self {
            Bijector::Identity | Bijector::Permutation(_) => (x, 0.0),
            Bijector::Affine { scale, shift, .. } => (scale * x + shift, scale.abs().ln()),
            Bijector::Tanh => (x.tanh(), log_dtanh(x)),
            Bijector::Spline(s) => s.forward(x),
            Bijector::Compose(parts) => parts.iter().fold((x, 0.0), |(v, l), p| {
                let (v2, l2) = p.forward_scalar(v);
                (v2, l + l2)
            }),
        }
    }

    pub fn inverse_scalar(&self, y: f64) -> (f64, f64) {
        match self {
            Bijector::Identity | Bijector::Permutation(_) => (y, 0.0),
            Bijector::Affine { scale, shift, .. } => ((y - shift) / scale, -scale.abs().ln()),
            Bijector::Tanh => {
                let y = y.clamp(-1.0 + f64::EPSILON, 1.0 - f64::EPSILON);
                let x = y.atanh();
                (x, -log_dtanh(x))
            }
            Bijector::Spline(s) => s.inverse(y),
            Bijector::Compose(parts) => parts.iter().rev().fold((y, 0.0), |(v, l), p| {
                let (v2, l2) = p.inverse_scalar(v);
                (v2, l + l2)
            }),
        }
    }

    /// Applies to a whole vector; returns the total log-determinant.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        match self {
            Bijector::Permutation(p) => (p.iter().map(|&i| x[i]).collect(), 0.0),
            Bijector::Compose(parts) => parts.iter().fold((x.to_vec(), 0.0), |(v, l), p| {
                let (v2, l2) = p.forward(&v);
                (v2, l + l2)
            }),
            _ => {
                let mut total = 0.0;
                let y = x
                    .iter()
                    .map(|&xi| {
                        let (yi, li) = self.forward_scalar(xi);
                        total += li;
                        yi
                    })
                    .collect();
                (y, total)
            }
        }
    }

    pub fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        match self {
            Bijector::Permutation(p) => {
                let mut x = vec![0.0; y.len()];
                for (k, &i) in p.iter().enumerate() {
                    x[i] = y[k];
                }
                (x, 0.0)
            }
            Bijector::Compose(parts) => parts.iter().rev().fold((y.to_vec(), 0.0), |(v, l), p| {
                let (v2, l2) = p.inverse(&v);
                (v2, l + l2)
            }),
            _ => {
                let mut total = 0.0;
                let x = y
                    .iter()
                    .map(|&yi| {
                        let (xi, li) = self.inverse_scalar(yi);
                        total += li;
                        xi
                    })
                    .collect();
                (x, total)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        assert_eq!(tanh_bijector().forward_scalar(0.0), (0.0, 0.0));
        let a = affine_bijector(2.0, 1.0).unwrap();
        let (y, l) = a.forward_scalar(3.0);
        assert_eq!(y, 7.0);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!(affine_bijector(0.0, 1.0).is_err());
        assert!(permutation_bijector(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn inverse_pairs_cancel() {
        let id = Bijector::compose(vec![Bijector::Identity, Bijector::Identity]).unwrap();
        assert_eq!(id.forward(&[1.5, -2.0]), (vec![1.5, -2.0], 0.0));
        let pair = Bijector::compose(vec![affine_bijector(2.0, 0.0).unwrap(), affine_bijector(0.5, 0.0).unwrap()]).unwrap();
        let (y, l) = pair.forward_scalar(1.234);
        assert_eq!(y, 1.234);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn incompatible_composition_is_rejected() {
        let unit = affine_on(2.0, -1.0, Interval::new(0.0, 1.0)).unwrap();
        assert!(matches!(Bijector::compose(vec![tanh_bijector(), unit.clone()]), Err(Error::Composition(_))));
        let to_unit = affine_on(0.5, 0.5, Interval::new(-1.0, 1.0)).unwrap();
        assert!(Bijector::compose(vec![tanh_bijector(), to_unit, unit]).is_ok());
    }

    #[test]
    fn composed_logdet_is_sum_of_parts() {
        let t = tanh_bijector();
        let a = affine_bijector(-3.0, 0.25).unwrap();
        let c = Bijector::compose(vec![t.clone(), a.clone()]).unwrap();
        for &x in &[-2.0, -0.3, 0.0, 0.9, 4.0] {
            let (y1, l1) = t.forward_scalar(x);
            let (y2, l2) = a.forward_scalar(y1);
            let (y, l) = c.forward_scalar(x);
            assert_eq!(y, y2);
            assert!((l - (l1 + l2)).abs() < 1e-14);
        }
    }

    #[test]
    fn permutation_round_trip() {
        let p = permutation_bijector(vec![2, 0, 3, 1]).unwrap();
        let x = vec![0.1, 0.2, 0.3, 0.4];
        let (y, l) = p.forward(&x);
        assert_eq!(y, vec![0.3, 0.1, 0.4, 0.2]);
        assert_eq!(l, 0.0);
        assert_eq!(p.inverse(&y).0, x);
    }

    fn arb_univariate() -> impl Strategy<Value = Bijector> {
        let spline = (2usize..9, prop::collection::vec(-3.0f64..3.0, 26), 0.5f64..3.0).prop_map(|(k, raw, b)| {
            Bijector::Spline(RqsSpline::from_raw(&raw[..spline::raw_len(k)], k, b))
        });
        let affine = (prop_oneof![-3.0f64..-0.2, 0.2f64..3.0], -2.0f64..2.0)
            .prop_map(|(s, t)| affine_bijector(s, t).unwrap());
        let leaf = prop_oneof![spline, affine, Just(Bijector::Tanh), Just(Bijector::Identity)];
        prop::collection::vec(leaf, 1..4).prop_map(|parts| {
            // tanh only first so later parts stay well inside double range
            let mut parts: Vec<Bijector> = parts.into_iter().filter(|p| !matches!(p, Bijector::Tanh)).collect();
            parts.insert(0, Bijector::Tanh);
            Bijector::compose(parts).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn round_trip_and_jacobian_consistency(b in arb_univariate(), x in -3.0f64..3.0) {
            let (y, l) = b.forward_scalar(x);
            let (xb, li) = b.inverse_scalar(y);
            prop_assert!((xb - x).abs() < 1e-6, "round trip {} -> {} -> {}", x, y, xb);
            prop_assert!((l + li).abs() < 1e-8);
        }

        #[test]
        fn monotone(b in arb_univariate(), x1 in -3.0f64..3.0, dx in 1e-3f64..2.0) {
            let a = b.forward_scalar(x1).0;
            let c = b.forward_scalar(x1 + dx).0;
            let increasing = a < c;
            let decreasing = a > c;
            prop_assert!(increasing || decreasing);
        }

        #[test]
        fn pushforward_density_integrates_to_one(b in arb_univariate()) {
            // standard normal base pushed through b; trapezoid in output
            // space with p_Y(y) = p_X(x) |dx/dy| on the union of an
            // input-uniform and an output-uniform grid
            let n = 50_000;
            let lo = b.forward_scalar(-8.0).0;
            let hi = b.forward_scalar(8.0).0;
            let (lo, hi) = if lo < hi { (lo, hi) } else { (hi, lo) };
            let mut ys: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
            ys.extend((0..=n).map(|i| b.forward_scalar(-8.0 + 16.0 * i as f64 / n as f64).0));
            ys.sort_by(|a, c| a.total_cmp(c));
            let density = |y: f64| {
                let (x, l) = b.inverse_scalar(y);
                crate::stats::norm_pdf(x) * l.exp()
            };
            let ps: Vec<f64> = ys.iter().map(|&y| density(y)).collect();
            let mut mass = 0.0;
            for i in 1..ys.len() {
                mass += 0.5 * (ps[i] + ps[i - 1]) * (ys[i] - ys[i - 1]);
            }
            prop_assert!((mass - 1.0).abs() < 1e-3, "mass {}", mass);
        }
    }
}
