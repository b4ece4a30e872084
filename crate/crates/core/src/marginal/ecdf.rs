//! Empirical step CDFs and the generalised distributional transform
//! `U = F(X-) + V (F(X) - F(X-))` for discrete columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::flow::clamp_rank;
use crate::error::{Error, Result};
use crate::rng::open_uniform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCdf {
    support: Vec<f64>,
    /// `F(x-)` per support point.
    left: Vec<f64>,
    /// `F(x)` per support point.
    right: Vec<f64>,
}

impl StepCdf {
    /// Empirical CDF of `values`.
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InsufficientData("empirical CDF of an empty column".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite value in discrete column".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let mut support = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for v in sorted {
            if support.last() == Some(&v) {
                *counts.last_mut().unwrap() += 1;
            } else {
                support.push(v);
                counts.push(1);
            }
        }
        let mut left = Vec::with_capacity(support.len());
        let mut right = Vec::with_capacity(support.len());
        let mut acc = 0usize;
        for c in counts {
            left.push(acc as f64 / n as f64);
            acc += c;
            right.push(acc as f64 / n as f64);
        }
        Ok(Self { support, left, right })
    }

    /// CDF with the given support and point masses (normalised).
    pub fn from_probabilities(support: Vec<f64>, probs: &[f64]) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::InvalidParameter("support and probabilities differ in length".into()));
        }
        if !support.windows(2).all(|w| w[1] > w[0]) || probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidParameter("support must increase and masses be positive".into()));
        }
        let total: f64 = probs.iter().sum();
        let mut left = Vec::with_capacity(probs.len());
        let mut right = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in probs {
            left.push(acc);
            acc += p / total;
            right.push(acc);
        }
        *right.last_mut().unwrap() = 1.0;
        Ok(Self { support, left, right })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn left_limits(&self) -> &[f64] {
        &self.left
    }

    pub fn values(&self) -> &[f64] {
        &self.right
    }

    pub fn level(&self, x: f64) -> Result<usize> {
        self.support
            .binary_search_by(|s| s.total_cmp(&x))
            .map_err(|_| Error::UnknownLevel(x))
    }

    pub fn mass(&self, level: usize) -> f64 {
        self.right[level] - self.left[level]
    }

    /// `F(x-) + v (F(x) - F(x-))`.
    pub fn transform(&self, x: f64, v: f64) -> Result<f64> {
        let k = self.level(x)?;
        Ok(self.left[k] + v * (self.right[k] - self.left[k]))
    }

    /// The support value `x` with `F(x-) < u <= F(x)`.
    pub fn inverse(&self, u: f64) -> f64 {
        let k = self.right.partition_point(|&r| r < u).min(self.support.len() - 1);
        self.support[k]
    }
}

/// Exact distributional transform with caller-supplied noise `v`.
pub fn distributional_transform(x: &[f64], cdf: &StepCdf, v: &[f64]) -> Result<Vec<f64>> {
    if x.len() != v.len() {
        return Err(Error::Dimension(format!("{} values but {} noise draws", x.len(), v.len())));
    }
    x.iter().zip(v).map(|(&xi, &vi)| cdf.transform(xi, vi)).collect()
}

/// Distributional transform with fresh open-uniform noise, clamped to the
/// rank interval used by the copula.
pub fn dequantise<R: Rng>(x: &[f64], cdf: &StepCdf, rng: &mut R) -> Result<Vec<f64>> {
    x.iter().map(|&xi| Ok(clamp_rank(cdf.transform(xi, open_uniform(rng))?))).collect()
}

pub fn inverse_distributional_transform(u: &[f64], cdf: &StepCdf) -> Vec<f64> {
    u.iter().map(|&ui| cdf.inverse(ui)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::stats::{ks_pvalue, ks_uniform};

    fn bernoulli_half() -> StepCdf {
        StepCdf::from_probabilities(vec![0.0, 1.0], &[0.5, 0.5]).unwrap()
    }

    #[test]
    fn bernoulli_examples() {
        let cdf = bernoulli_half();
        assert_eq!(cdf.transform(0.0, 0.4).unwrap(), 0.2);
        assert_eq!(cdf.transform(1.0, 0.5).unwrap(), 0.75);
        assert_eq!(cdf.inverse(0.2), 0.0);
        assert_eq!(cdf.inverse(0.75), 1.0);
        assert_eq!(cdf.inverse(0.5), 0.0);
    }

    #[test]
    fn unknown_level_is_rejected() {
        let cdf = bernoulli_half();
        assert!(matches!(cdf.transform(2.0, 0.5), Err(Error::UnknownLevel(_))));
    }

    #[test]
    fn empirical_fit() {
        let cdf = StepCdf::fit(&[3.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(cdf.support(), &[1.0, 2.0, 3.0]);
        assert_eq!(cdf.left_limits(), &[0.0, 0.25, 0.5]);
        assert_eq!(cdf.values(), &[0.25, 0.5, 1.0]);
    }

    #[test]
    fn bernoulli_ranks_are_uniform() {
        let mut r = rng::stream(1, "test-bernoulli");
        let cdf = StepCdf::from_probabilities(vec![0.0, 1.0], &[0.7, 0.3]).unwrap();
        let x: Vec<f64> = (0..10_000).map(|_| f64::from(r.random::<f64>() < 0.3)).collect();
        let v: Vec<f64> = (0..10_000).map(|_| open_uniform(&mut r)).collect();
        let u = distributional_transform(&x, &cdf, &v).unwrap();
        let d = ks_uniform(&u);
        assert!(ks_pvalue(d, u.len()) > 0.01, "KS {d}");
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_exact(values in proptest::collection::vec(0i32..6, 1..200), seed in 0u64..1000) {
            let x: Vec<f64> = values.iter().map(|&v| v as f64 * 1.5).collect();
            let cdf = StepCdf::fit(&x).unwrap();
            let mut r = rng::stream(seed, "round-trip");
            let u = dequantise(&x, &cdf, &mut r).unwrap();
            proptest::prop_assert_eq!(inverse_distributional_transform(&u, &cdf), x);
        }
    }
}
