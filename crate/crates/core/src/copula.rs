//! Copula flow over rank space.
//!
//! Ranks in `(0, 1)^m` are mapped affinely to `(-1, 1)^m`, pushed through a
//! stack of masked autoregressive spline layers and mapped back. One
//! *pinned* dimension passes through every layer unchanged; every other
//! dimension is transformed by a spline whose parameters depend on the
//! dimensions earlier in that layer's conditioning order. The affine
//! wrappers cancel in the Jacobian, so the copula log-density is the sum of
//! the spline log-determinants.
//!
//! Copula splines never see inputs outside `[-1, 1]`, so their boundary
//! derivatives are learnt rather than pinned to 1; pinned boundaries force
//! the density to 1 along every edge of the unit cube.
//!
//! Dimensions before the pinned one form a prefix block that only
//! conditions on itself; dimensions after it see the prefix and the pinned
//! rank. Each layer re-shuffles the order within both blocks.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, MaskedMlp, ParamStore, Var};
use crate::bijector::{spline, RqsSpline};
use crate::error::{Error, Result};
use crate::marginal::clamp_rank;
use crate::rng;
use crate::train::{self, Objective, Split, TrainConfig, TrainReport};

const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CopulaLayer {
    /// Autoregressive degree of each dimension (1-based).
    degrees: Vec<usize>,
    conditioner: MaskedMlp,
}

/// Architecture of a copula flow; parameters live in an external store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaFlow {
    dim: usize,
    pinned: usize,
    knots: usize,
    layers: Vec<CopulaLayer>,
}

impl CopulaFlow {
    /// Builds an identity-initialised flow over `dim` ranks whose dimension
    /// `pinned` passes through unchanged.
    pub fn new(store: &mut ParamStore, dim: usize, pinned: usize, cfg: &TrainConfig) -> Result<Self> {
        if dim < 2 || pinned >= dim {
            return Err(Error::InvalidParameter(format!(
                "copula flow needs at least 2 dimensions and a pinned index below {dim}, got {pinned}"
            )));
        }
        let mut order_rng = rng::stream(cfg.seed, rng::PERMUTATION);
        let mut init_rng = rng::stream(cfg.seed, rng::INIT);
        let p = spline::raw_len_free(cfg.knots);
        let mut prefix: Vec<usize> = (0..pinned).collect();
        let mut suffix: Vec<usize> = (pinned + 1..dim).collect();
        let mut layers = Vec::with_capacity(cfg.flow_layers);
        for l in 0..cfg.flow_layers {
            if l > 0 {
                prefix.shuffle(&mut order_rng);
                suffix.shuffle(&mut order_rng);
            }
            let mut degrees = vec![0; dim];
            for (rank, &d) in prefix.iter().chain(std::iter::once(&pinned)).chain(&suffix).enumerate() {
                degrees[d] = rank + 1;
            }
            let out_degrees: Vec<usize> =
                (0..dim).filter(|&d| d != pinned).flat_map(|d| std::iter::repeat_n(degrees[d], p)).collect();
            let conditioner =
                MaskedMlp::new(store, &mut init_rng, &degrees, 0, cfg.nn_width, cfg.nn_depth, &out_degrees);
            layers.push(CopulaLayer { degrees, conditioner });
        }
        Ok(Self { dim, pinned, knots: cfg.knots, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pinned(&self) -> usize {
        self.pinned
    }

    fn raw_len(&self) -> usize {
        spline::raw_len_free(self.knots)
    }

    /// Conditioner input: `atanh(x)`, half the logit of the rank. The
    /// splines act on `x` itself; only the network sees the unbounded
    /// features, which keeps conditional parameters smooth near the edges.
    fn features<'a>(&self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let up = g.add_scalar(x, 1.0);
        let neg = g.scale(x, -1.0);
        let down = g.add_scalar(neg, 1.0);
        let lu = g.log(up);
        let ld = g.log(down);
        let diff = g.sub(lu, ld)?;
        Ok(g.scale(diff, 0.5))
    }

    fn split_pinned<'a>(&self, g: &mut Graph<'a>, x: Var) -> Result<(Var, Var)> {
        let (pinned, dim) = (self.pinned, self.dim);
        let mid = g.slice_cols(x, pinned, 1)?;
        let rest = match (pinned, dim - pinned - 1) {
            (0, n) => g.slice_cols(x, 1, n)?,
            (p, 0) => g.slice_cols(x, 0, p)?,
            (p, n) => {
                let a = g.slice_cols(x, 0, p)?;
                let b = g.slice_cols(x, p + 1, n)?;
                g.concat(&[a, b])?
            }
        };
        Ok((mid, rest))
    }

    fn join_pinned<'a>(&self, g: &mut Graph<'a>, mid: Var, rest: Var) -> Result<Var> {
        let (pinned, dim) = (self.pinned, self.dim);
        match (pinned, dim - pinned - 1) {
            (0, _) => g.concat(&[mid, rest]),
            (_, 0) => g.concat(&[rest, mid]),
            (p, n) => {
                let a = g.slice_cols(rest, 0, p)?;
                let b = g.slice_cols(rest, p, n)?;
                g.concat(&[a, mid, b])
            }
        }
    }

    /// Records the map from ranks `v` (`n × dim`) to base uniforms and
    /// returns `(u, log c(v))`, the latter as an `n × 1` column.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, v: Var) -> Result<(Var, Var)> {
        if g.value(v).cols != self.dim {
            return Err(Error::Dimension(format!("copula expects {} ranks, got {}", self.dim, g.value(v).cols)));
        }
        let shifted = g.scale(v, 2.0);
        let mut x = g.add_scalar(shifted, -1.0);
        let mut total: Option<Var> = None;
        for layer in &self.layers {
            let feats = self.features(g, x)?;
            let params = layer.conditioner.forward(g, feats, None)?;
            let (mid, rest) = self.split_pinned(g, x)?;
            let (y, ld) = g.spline(rest, params, self.knots, 1.0)?;
            x = self.join_pinned(g, mid, y)?;
            let ld = g.sum_cols(ld);
            total = Some(match total {
                Some(t) => g.add(t, ld)?,
                None => ld,
            });
        }
        let half = g.add_scalar(x, 1.0);
        let mapped = g.scale(half, 0.5);
        // splice the input column back so the pinned rank is bit-exact
        let (_, rest) = self.split_pinned(g, mapped)?;
        let kept = g.slice_cols(v, self.pinned, 1)?;
        let u = self.join_pinned(g, kept, rest)?;
        let logc = match total {
            Some(t) => t,
            None => g.constant(Mat::zeros(g.value(v).rows, 1)),
        };
        Ok((u, logc))
    }

    fn check_ranks(&self, v: &Mat) -> Result<()> {
        if v.cols != self.dim {
            return Err(Error::Dimension(format!("copula expects {} ranks, got {}", self.dim, v.cols)));
        }
        if let Some(i) = v.data.iter().position(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::Domain(format!("rank {} at row {}", v.data[i], i / self.dim)));
        }
        Ok(())
    }

    /// `log c(v)` per row; every rank must lie strictly inside `(0, 1)`.
    pub fn log_density(&self, store: &ParamStore, v: &Mat) -> Result<Vec<f64>> {
        self.check_ranks(v)?;
        let mut out = Vec::with_capacity(v.rows);
        for start in (0..v.rows).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(v.rows)).collect();
            let mut g = Graph::new(store);
            let vv = g.constant(v.select_rows(&rows));
            let (_, logc) = self.forward(&mut g, vv)?;
            out.extend_from_slice(&g.value(logc).data);
        }
        Ok(out)
    }

    /// Ranks to base uniforms.
    pub fn to_base(&self, store: &ParamStore, v: &Mat) -> Result<Mat> {
        self.check_ranks(v)?;
        let mut out = Mat::zeros(v.rows, self.dim);
        for start in (0..v.rows).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(v.rows)).collect();
            let mut g = Graph::new(store);
            let vv = g.constant(v.select_rows(&rows));
            let (u, _) = self.forward(&mut g, vv)?;
            out.data[start * self.dim..(start + rows.len()) * self.dim].copy_from_slice(&g.value(u).data);
        }
        Ok(out)
    }

    /// Pushes base uniforms `u` through the inverse flow. The pinned column
    /// of `u` carries the conditioning rank and is returned unchanged.
    pub fn sample(&self, store: &ParamStore, u: &Mat) -> Result<Mat> {
        if u.cols != self.dim {
            return Err(Error::Dimension(format!("copula expects {} columns, got {}", self.dim, u.cols)));
        }
        let mut out = Mat::zeros(u.rows, self.dim);
        for start in (0..u.rows).step_by(CHUNK) {
            let rows: Vec<usize> = (start..(start + CHUNK).min(u.rows)).collect();
            let mut x = u.select_rows(&rows);
            for (i, val) in x.data.iter_mut().enumerate() {
                if i % self.dim != self.pinned {
                    *val = 2.0 * *val - 1.0;
                }
            }
            for layer in self.layers.iter().rev() {
                self.invert_layer(store, layer, &mut x)?;
            }
            for (i, val) in x.data.iter_mut().enumerate() {
                if i % self.dim != self.pinned {
                    *val = clamp_rank(0.5 * (*val + 1.0));
                }
            }
            out.data[start * self.dim..(start + rows.len()) * self.dim].copy_from_slice(&x.data);
        }
        Ok(out)
    }

    /// Solves `layer(x) = y` in place, one dimension at a time in degree
    /// order. The pinned column of `y` holds the rank in `(0, 1)` rather than
    /// its `[-1, 1]` image, so it is mapped here and restored afterwards.
    fn invert_layer(&self, store: &ParamStore, layer: &CopulaLayer, y: &mut Mat) -> Result<()> {
        let (dim, pinned, p) = (self.dim, self.pinned, self.raw_len());
        let target = y.clone();
        let rank_pinned: Vec<f64> = y.col_vec(pinned);
        for r in 0..y.rows {
            y.data[r * dim + pinned] = 2.0 * rank_pinned[r] - 1.0;
        }
        let mut order: Vec<usize> = (0..dim).filter(|&d| d != pinned).collect();
        order.sort_by_key(|&d| layer.degrees[d]);
        for d in order {
            let feats = Mat::from_vec(y.rows, dim, y.data.iter().map(|v| v.atanh()).collect());
            let params = layer.conditioner.eval(store, &feats, None)?;
            let slot = if d < pinned { d } else { d - 1 };
            for r in 0..y.rows {
                let raw = &params.row(r)[slot * p..(slot + 1) * p];
                let s = RqsSpline::from_raw(raw, self.knots, 1.0);
                y.data[r * dim + d] = s.inverse(target.get(r, d)).0;
            }
        }
        for r in 0..y.rows {
            y.data[r * dim + pinned] = rank_pinned[r];
        }
        Ok(())
    }
}

/// A copula flow with its own trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCopula {
    pub flow: CopulaFlow,
    pub params: ParamStore,
    pub report: TrainReport,
}

struct CopulaObjective<'d> {
    flow: &'d CopulaFlow,
    ranks: &'d Mat,
}

impl Objective for CopulaObjective<'_> {
    fn loss<'a>(&'a self, g: &mut Graph<'a>, rows: &[usize]) -> Result<Var> {
        let v = g.constant(self.ranks.select_rows(rows));
        let (_, logc) = self.flow.forward(g, v)?;
        let m = g.mean(logc);
        Ok(g.scale(m, -1.0))
    }
}

/// Fits a copula flow to pseudo-observations `ranks` (`n × dim`).
pub fn fit_copula_flow(ranks: &Mat, pinned: usize, cfg: &TrainConfig) -> Result<FittedCopula> {
    let mut params = ParamStore::new();
    let flow = CopulaFlow::new(&mut params, ranks.cols, pinned, cfg)?;
    flow.check_ranks(ranks)?;
    let split = Split::new(ranks.rows, None, cfg.train_fraction, cfg.seed);
    let report = train::train(&mut params, &CopulaObjective { flow: &flow, ranks }, &split, cfg)?;
    Ok(FittedCopula { flow, params, report })
}

impl FittedCopula {
    pub fn log_density(&self, v: &Mat) -> Result<Vec<f64>> {
        self.flow.log_density(&self.params, v)
    }

    pub fn sample(&self, u: &Mat) -> Result<Mat> {
        self.flow.sample(&self.params, u)
    }

    /// Draws `n` rows from the learnt copula.
    pub fn sample_fresh<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Mat> {
        let data = (0..n * self.flow.dim).map(|_| rng::open_uniform(rng)).collect();
        self.sample(&Mat::from_vec(n, self.flow.dim, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig { flow_layers: 3, nn_width: 8, nn_depth: 2, knots: 6, seed, ..Default::default() }
    }

    fn perturbed(dim: usize, pinned: usize, seed: u64, scale: f64) -> (CopulaFlow, ParamStore) {
        let mut store = ParamStore::new();
        let flow = CopulaFlow::new(&mut store, dim, pinned, &small_cfg(seed)).unwrap();
        let mut r = rng::stream(seed, "perturb");
        for t in store.tensors_mut() {
            for v in &mut t.values {
                *v += scale * (r.random::<f64>() - 0.5);
            }
        }
        (flow, store)
    }

    fn uniform_mat(n: usize, dim: usize, seed: u64) -> Mat {
        let mut r = rng::stream(seed, "ranks");
        Mat::from_vec(n, dim, (0..n * dim).map(|_| rng::open_uniform(&mut r)).collect())
    }

    #[test]
    fn identity_initialisation() {
        let mut store = ParamStore::new();
        let flow = CopulaFlow::new(&mut store, 4, 0, &small_cfg(1)).unwrap();
        let v = uniform_mat(50, 4, 2);
        assert!(flow.log_density(&store, &v).unwrap().iter().all(|&l| l.abs() < 1e-12));
        let s = flow.sample(&store, &v).unwrap();
        for (a, b) in s.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_and_shape_errors() {
        let mut store = ParamStore::new();
        let flow = CopulaFlow::new(&mut store, 3, 0, &small_cfg(1)).unwrap();
        let v = Mat::from_vec(1, 3, vec![0.5, 0.0, 0.2]);
        assert!(matches!(flow.log_density(&store, &v), Err(Error::Domain(_))));
        let v = Mat::from_vec(1, 2, vec![0.5, 0.2]);
        assert!(matches!(flow.log_density(&store, &v), Err(Error::Dimension(_))));
        assert!(matches!(flow.sample(&store, &v), Err(Error::Dimension(_))));
        assert!(CopulaFlow::new(&mut store, 1, 0, &small_cfg(1)).is_err());
    }

    #[test]
    fn density_integrates_to_one_in_two_dimensions() {
        let (flow, store) = perturbed(2, 0, 7, 0.8);
        let n = 200;
        let h = 1.0 / n as f64;
        let mut grid = Vec::with_capacity(2 * n * n);
        for i in 0..n {
            for j in 0..n {
                grid.push((i as f64 + 0.5) * h);
                grid.push((j as f64 + 0.5) * h);
            }
        }
        let logc = flow.log_density(&store, &Mat::from_vec(n * n, 2, grid)).unwrap();
        assert!(logc.iter().any(|l| l.abs() > 0.05), "perturbation should produce dependence");
        let mass: f64 = logc.iter().map(|l| l.exp()).sum::<f64>() * h * h;
        assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
    }

    #[test]
    fn prefix_block_ignores_pinned_and_suffix() {
        // with pinned index 2, dimensions 0 and 1 must not depend on 2 or 3
        let (flow, store) = perturbed(4, 2, 3, 2.0);
        let a = Mat::from_vec(1, 4, vec![0.3, 0.6, 0.2, 0.7]);
        let b = Mat::from_vec(1, 4, vec![0.3, 0.6, 0.9, 0.1]);
        let ua = flow.to_base(&store, &a).unwrap();
        let ub = flow.to_base(&store, &b).unwrap();
        assert_eq!(&ua.data[..2], &ub.data[..2]);
        assert_ne!(ua.data[3], ub.data[3]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn pinned_dimension_passes_through(seed in 0u64..500, dim in 2usize..5, pinned_raw in 0usize..5) {
            let pinned = pinned_raw % dim;
            let (flow, store) = perturbed(dim, pinned, seed, 3.0);
            let v = uniform_mat(16, dim, seed + 1);
            let u = flow.to_base(&store, &v).unwrap();
            let s = flow.sample(&store, &v).unwrap();
            for r in 0..16 {
                let want = v.get(r, pinned);
                prop_assert_eq!(u.get(r, pinned).to_bits(), want.to_bits());
                prop_assert_eq!(s.get(r, pinned).to_bits(), want.to_bits());
            }
        }

        #[test]
        fn sample_then_forward_recovers_base(seed in 0u64..500, dim in 2usize..5) {
            let (flow, store) = perturbed(dim, 0, seed, 2.0);
            let u = uniform_mat(32, dim, seed + 2);
            let v = flow.sample(&store, &u).unwrap();
            let back = flow.to_base(&store, &v).unwrap();
            for (a, b) in back.data.iter().zip(&u.data) {
                prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
            }
        }
    }
}
