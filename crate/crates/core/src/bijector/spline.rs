//! Monotone rational-quadratic splines.
//!
//! A spline with `K` bins maps `[-B, B]` onto itself through `K + 1` knots
//! `(x_k, y_k)` and positive knot derivatives `d_k`. Outside the interval the
//! map is the identity, and the boundary derivatives are pinned to 1 so the
//! whole map is C¹.
//!
//! Conditioners emit `3K - 1` unconstrained numbers per transformed
//! coordinate, laid out as `[K width logits | K height logits | K - 1
//! derivative pre-activations]`. An all-zero raw vector is the identity.
//!
//! Splines whose inputs never leave `[-B, B]` (copula space) may instead use
//! the `3K + 1` layout, which adds learnable boundary derivatives at both
//! ends of the derivative block. Such a spline is still continuous at the
//! boundary but only C¹ when both boundary derivatives equal 1.

use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_BIN_WIDTH: f64 = 1e-3;
pub const MIN_BIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Number of raw conditioner outputs needed for one coordinate.
pub fn raw_len(knots: usize) -> usize {
    3 * knots - 1
}

/// Raw length with learnable boundary derivatives.
pub fn raw_len_free(knots: usize) -> usize {
    3 * knots + 1
}

/// Whether `len` is a valid raw length for `knots` bins.
pub fn is_raw_len(len: usize, knots: usize) -> bool {
    len == raw_len(knots) || len == raw_len_free(knots)
}

fn decode_derivatives(raw_d: &[f64], k: usize, out: &mut Vec<f64>) {
    let offset = derivative_offset();
    let free = raw_d.iter().map(|&r| MIN_DERIVATIVE + softplus(r + offset));
    out.clear();
    if raw_d.len() + 1 == k {
        // K - 1 interior derivatives; boundaries pinned
        out.push(1.0);
        out.extend(free);
        out.push(1.0);
    } else {
        out.extend(free);
    }
}

/// Shift so that a zero pre-activation yields a unit knot derivative.
fn derivative_offset() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(raw: &[f64], out: &mut [f64]) {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = (r - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Knot positions and derivatives of a single spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqsSpline {
    bound: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

impl RqsSpline {
    /// Builds a spline from explicit knots. `derivatives` holds the `K - 1`
    /// interior derivatives; the two boundary derivatives are fixed at 1.
    pub fn new(bound: f64, xs: Vec<f64>, ys: Vec<f64>, derivatives: Vec<f64>) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidSpline(format!("bound must be positive, got {bound}")));
        }
        let k = xs.len().saturating_sub(1);
        if k < 1 || ys.len() != k + 1 || derivatives.len() != k - 1 {
            return Err(Error::InvalidSpline(format!(
                "expected K+1 knots and K-1 derivatives, got {} x-knots, {} y-knots, {} derivatives",
                xs.len(),
                ys.len(),
                derivatives.len()
            )));
        }
        let spans = |v: &[f64]| {
            (v[0] - (-bound)).abs() < 1e-12 && (v[k] - bound).abs() < 1e-12
        };
        if !spans(&xs) || !spans(&ys) {
            return Err(Error::InvalidSpline("knots must span [-B, B]".into()));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if !increasing(&xs) || !increasing(&ys) {
            return Err(Error::InvalidSpline("knots must be strictly increasing".into()));
        }
        if derivatives.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidSpline("derivatives must be positive".into()));
        }
        let mut ds = Vec::with_capacity(k + 1);
        ds.push(1.0);
        ds.extend_from_slice(&derivatives);
        ds.push(1.0);
        Ok(Self { bound, xs, ys, ds })
    }

    /// Evenly spaced knots with unit derivatives: the identity map.
    pub fn identity(knots: usize, bound: f64) -> Self {
        Self::from_raw(&vec![0.0; raw_len(knots)], knots, bound)
    }

    /// Decodes unconstrained conditioner outputs into a valid spline.
    pub fn from_raw(raw: &[f64], knots: usize, bound: f64) -> Self {
        let k = knots;
        debug_assert!(is_raw_len(raw.len(), k));
        let mut widths = vec![0.0; k];
        let mut heights = vec![0.0; k];
        softmax_into(&raw[..k], &mut widths);
        softmax_into(&raw[k..2 * k], &mut heights);
        let scale_w = 1.0 - k as f64 * MIN_BIN_WIDTH;
        let scale_h = 1.0 - k as f64 * MIN_BIN_HEIGHT;
        let xs = cumulative_knots(&widths, MIN_BIN_WIDTH, scale_w, bound);
        let ys = cumulative_knots(&heights, MIN_BIN_HEIGHT, scale_h, bound);
        let mut ds = Vec::with_capacity(k + 1);
        decode_derivatives(&raw[2 * k..], k, &mut ds);
        Self { bound, xs, ys, ds }
    }

    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn x_knots(&self) -> &[f64] {
        &self.xs
    }

    pub fn y_knots(&self) -> &[f64] {
        &self.ys
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.ds
    }

    fn inside(&self, v: f64) -> bool {
        v >= -self.bound && v <= self.bound
    }

    fn locate(knots: &[f64], v: f64) -> usize {
        let k = knots.len() - 1;
        // first knot strictly above v, minus one
        let idx = knots[1..k].partition_point(|&kn| kn <= v);
        idx.min(k - 1)
    }

    /// Returns `(y, log dy/dx)`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        if !self.inside(x) {
            return (x, 0.0);
        }
        let b = Self::locate(&self.xs, x);
        rqs_local(
            x,
            self.xs[b],
            self.xs[b + 1],
            self.ys[b],
            self.ys[b + 1],
            self.ds[b],
            self.ds[b + 1],
        )
    }

    /// Returns `(x, log dx/dy)` for the preimage `x` of `y`.
    pub fn inverse(&self, y: f64) -> (f64, f64) {
        if !self.inside(y) {
            return (y, 0.0);
        }
        let b = Self::locate(&self.ys, y);
        let (x0, x1, y0, y1) = (self.xs[b], self.xs[b + 1], self.ys[b], self.ys[b + 1]);
        let (d0, d1) = (self.ds[b], self.ds[b + 1]);
        let w = x1 - x0;
        let h = y1 - y0;
        let s = h / w;
        let dy = y - y0;
        let sum = d0 + d1 - 2.0 * s;
        let a = h * (s - d0) + dy * sum;
        let bq = h * d0 - dy * sum;
        let c = -s * dy;
        let disc = (bq * bq - 4.0 * a * c).max(0.0);
        let xi = (2.0 * c / (-bq - disc.sqrt())).clamp(0.0, 1.0);
        let x = x0 + xi * w;
        let (_, logdet) = rqs_local(x, x0, x1, y0, y1, d0, d1);
        (x, -logdet)
    }
}

fn cumulative_knots(fractions: &[f64], min: f64, scale: f64, bound: f64) -> Vec<f64> {
    let k = fractions.len();
    let mut out = Vec::with_capacity(k + 1);
    out.push(-bound);
    let mut acc = 0.0;
    for &f in &fractions[..k - 1] {
        acc += min + scale * f;
        out.push(-bound + 2.0 * bound * acc);
    }
    out.push(bound);
    out
}

/// Minimal arithmetic needed by the bin-local spline formula, so the same
/// code runs on plain floats and on dual numbers.
pub(crate) trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number carrying derivatives w.r.t. the seven local
/// inputs `(x, x0, x1, y0, y1, d0, d1)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dual7 {
    pub v: f64,
    pub g: [f64; 7],
}

impl Dual7 {
    fn seed(v: f64, i: usize) -> Self {
        let mut g = [0.0; 7];
        g[i] = 1.0;
        Self { v, g }
    }
}

impl Add for Dual7 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut g = self.g;
        for (a, b) in g.iter_mut().zip(o.g) {
            *a += b;
        }
        Self { v: self.v + o.v, g }
    }
}

impl Sub for Dual7 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut g = self.g;
        for (a, b) in g.iter_mut().zip(o.g) {
            *a -= b;
        }
        Self { v: self.v - o.v, g }
    }
}

impl Mul for Dual7 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut g = [0.0; 7];
        for i in 0..7 {
            g[i] = self.g[i] * o.v + self.v * o.g[i];
        }
        Self { v: self.v * o.v, g }
    }
}

impl Div for Dual7 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut g = [0.0; 7];
        for i in 0..7 {
            g[i] = (self.g[i] - v * o.g[i]) * inv;
        }
        Self { v, g }
    }
}

impl Neg for Dual7 {
    type Output = Self;
    fn neg(self) -> Self {
        let mut g = self.g;
        for a in g.iter_mut() {
            *a = -*a;
        }
        Self { v: -self.v, g }
    }
}

impl Scalar for Dual7 {
    fn cst(v: f64) -> Self {
        Self { v, g: [0.0; 7] }
    }
    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        let mut g = self.g;
        for a in g.iter_mut() {
            *a *= inv;
        }
        Self { v: self.v.ln(), g }
    }
}

/// Rational-quadratic map inside one bin; returns `(y, log dy/dx)`.
pub(crate) fn rqs_local<T: Scalar>(x: T, x0: T, x1: T, y0: T, y1: T, d0: T, d1: T) -> (T, T) {
    let one = T::cst(1.0);
    let two = T::cst(2.0);
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let xi = (x - x0) / w;
    let om = xi * (one - xi);
    let denom = s + (d1 + d0 - two * s) * om;
    let y = y0 + h * (s * xi * xi + d0 * om) / denom;
    let one_m = one - xi;
    let num = s * s * (d1 * xi * xi + two * s * om + d0 * one_m * one_m);
    let logdet = num.ln() - two * denom.ln();
    (y, logdet)
}

/// Scratch buffers reused across calls to [`forward_with_grad`].
#[derive(Debug, Default)]
pub struct SplineScratch {
    widths: Vec<f64>,
    heights: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl SplineScratch {
    fn decode(&mut self, raw: &[f64], k: usize, bound: f64) {
        self.widths.resize(k, 0.0);
        self.heights.resize(k, 0.0);
        softmax_into(&raw[..k], &mut self.widths);
        softmax_into(&raw[k..2 * k], &mut self.heights);
        let scale_w = 1.0 - k as f64 * MIN_BIN_WIDTH;
        let scale_h = 1.0 - k as f64 * MIN_BIN_HEIGHT;
        self.xs = cumulative_knots(&self.widths, MIN_BIN_WIDTH, scale_w, bound);
        self.ys = cumulative_knots(&self.heights, MIN_BIN_HEIGHT, scale_h, bound);
        decode_derivatives(&raw[2 * k..], k, &mut self.ds);
    }
}

/// Forward spline evaluation from raw parameters.
pub fn forward_raw(x: f64, raw: &[f64], k: usize, bound: f64, scratch: &mut SplineScratch) -> (f64, f64) {
    if x < -bound || x > bound {
        return (x, 0.0);
    }
    scratch.decode(raw, k, bound);
    let b = RqsSpline::locate(&scratch.xs, x);
    rqs_local(
        x,
        scratch.xs[b],
        scratch.xs[b + 1],
        scratch.ys[b],
        scratch.ys[b + 1],
        scratch.ds[b],
        scratch.ds[b + 1],
    )
}

/// Backpropagates upstream gradients `(gy, glogdet)` through the forward
/// spline. Returns `dL/dx` and accumulates `dL/draw` into `graw`.
#[allow(clippy::too_many_arguments)]
pub fn backward_raw(
    x: f64,
    raw: &[f64],
    k: usize,
    bound: f64,
    g_out: f64,
    g_logdet: f64,
    graw: &mut [f64],
    scratch: &mut SplineScratch,
) -> f64 {
    if x < -bound || x > bound {
        return g_out;
    }
    scratch.decode(raw, k, bound);
    let b = RqsSpline::locate(&scratch.xs, x);
    let (y, l) = rqs_local(
        Dual7::seed(x, 0),
        Dual7::seed(scratch.xs[b], 1),
        Dual7::seed(scratch.xs[b + 1], 2),
        Dual7::seed(scratch.ys[b], 3),
        Dual7::seed(scratch.ys[b + 1], 4),
        Dual7::seed(scratch.ds[b], 5),
        Dual7::seed(scratch.ds[b + 1], 6),
    );
    let mut local = [0.0; 7];
    for i in 0..7 {
        local[i] = g_out * y.g[i] + g_logdet * l.g[i];
    }

    // knot positions -> bin fractions -> width logits
    scratch.gx.clear();
    scratch.gx.resize(k + 1, 0.0);
    scratch.gy.clear();
    scratch.gy.resize(k + 1, 0.0);
    scratch.gx[b] += local[1];
    scratch.gx[b + 1] += local[2];
    scratch.gy[b] += local[3];
    scratch.gy[b + 1] += local[4];
    let scale_w = 1.0 - k as f64 * MIN_BIN_WIDTH;
    let scale_h = 1.0 - k as f64 * MIN_BIN_HEIGHT;
    knots_to_logits(&scratch.gx, &scratch.widths, scale_w, bound, &mut graw[..k]);
    knots_to_logits(&scratch.gy, &scratch.heights, scale_h, bound, &mut graw[k..2 * k]);

    let offset = derivative_offset();
    let free = raw.len() == raw_len_free(k);
    for (idx, gd) in [(b, local[5]), (b + 1, local[6])] {
        let slot = if free {
            Some(2 * k + idx)
        } else if idx >= 1 && idx < k {
            Some(2 * k + idx - 1)
        } else {
            None
        };
        if let Some(j) = slot {
            graw[j] += gd * sigmoid(raw[j] + offset);
        }
    }
    local[0]
}

fn knots_to_logits(g_knots: &[f64], softmax: &[f64], scale: f64, bound: f64, graw: &mut [f64]) {
    let k = softmax.len();
    // knot j (1..k-1) = -B + 2B * sum_{i<j} frac_i; end knots fixed.
    let mut g_frac = vec![0.0; k];
    let mut suffix = 0.0;
    for i in (0..k).rev() {
        if i + 1 < k {
            suffix += g_knots[i + 1];
        }
        g_frac[i] = 2.0 * bound * suffix * scale;
    }
    let dot: f64 = softmax.iter().zip(&g_frac).map(|(s, g)| s * g).sum();
    for i in 0..k {
        graw[i] += softmax[i] * (g_frac[i] - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raw(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        (0..raw_len(k)).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn identity_spline_is_identity() {
        let s = RqsSpline::identity(8, 1.0);
        for i in 0..=100 {
            let x = -1.0 + 0.02 * i as f64;
            let (y, l) = s.forward(x);
            assert!((y - x).abs() < 1e-12, "x={x} y={y}");
            assert!(l.abs() < 1e-12);
        }
    }

    #[test]
    fn tails_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = RqsSpline::from_raw(&random_raw(&mut rng, 6), 6, 1.0);
        assert_eq!(s.forward(2.0), (2.0, 0.0));
        assert_eq!(s.inverse(-3.5), (-3.5, 0.0));
    }

    #[test]
    fn logdet_matches_finite_difference_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let k = rng.random_range(2..10);
            let s = RqsSpline::from_raw(&random_raw(&mut rng, k), k, 2.0);
            let x = rng.random_range(-1.95..1.95);
            let (y, l) = s.forward(x);
            let h = 1e-6;
            let fd = (s.forward(x + h).0 - s.forward(x - h).0) / (2.0 * h);
            assert!((l.exp() - fd).abs() / fd < 1e-4, "{} vs {}", l.exp(), fd);
            let (xb, li) = s.inverse(y);
            assert!((xb - x).abs() < 1e-8, "{xb} vs {x}");
            assert!((li + l).abs() < 1e-8);
        }
    }

    #[test]
    fn raw_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scratch = SplineScratch::default();
        for case in 0..40 {
            let k = 5;
            let raw: Vec<f64> = if case % 2 == 0 {
                random_raw(&mut rng, k)
            } else {
                (0..raw_len_free(k)).map(|_| rng.random_range(-2.0..2.0)).collect()
            };
            // include points in the boundary bins
            let x = if case % 4 == 1 { rng.random_range(-1.0..-0.9) } else { rng.random_range(-0.99..0.99) };
            let (go, gl) = (0.7, -1.3);
            let loss = |raw: &[f64], x: f64, sc: &mut SplineScratch| {
                let (y, l) = forward_raw(x, raw, k, 1.0, sc);
                go * y + gl * l
            };
            let mut graw = vec![0.0; raw.len()];
            let gx = backward_raw(x, &raw, k, 1.0, go, gl, &mut graw, &mut scratch);
            let h = 1e-6;
            let fdx = (loss(&raw, x + h, &mut scratch) - loss(&raw, x - h, &mut scratch)) / (2.0 * h);
            assert!((gx - fdx).abs() < 1e-5 * (1.0 + fdx.abs()));
            for i in 0..raw.len() {
                let mut p = raw.clone();
                p[i] += h;
                let mut m = raw.clone();
                m[i] -= h;
                let fd = (loss(&p, x, &mut scratch) - loss(&m, x, &mut scratch)) / (2.0 * h);
                assert!((graw[i] - fd).abs() < 1e-5 * (1.0 + fd.abs()), "param {i}: {} vs {}", graw[i], fd);
            }
        }
    }

    #[test]
    fn free_boundary_layout() {
        let k = 6;
        let s = RqsSpline::from_raw(&vec![0.0; raw_len_free(k)], k, 1.0);
        assert_eq!(s.derivatives().len(), k + 1);
        assert!((s.forward(0.37).0 - 0.37).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..raw_len_free(k)).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = RqsSpline::from_raw(&raw, k, 1.0);
            assert!((s.derivatives()[0] - 1.0).abs() > 1e-6);
            let x = rng.random_range(-1.0..1.0);
            let (y, l) = s.forward(x);
            let (xb, li) = s.inverse(y);
            assert!((xb - x).abs() < 1e-8);
            assert!((li + l).abs() < 1e-8);
            // endpoints still map onto themselves
            assert!((s.forward(-1.0).0 + 1.0).abs() < 1e-12 && (s.forward(1.0).0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn explicit_knots_are_validated() {
        assert!(RqsSpline::new(1.0, vec![-1.0, 0.2, 0.1, 1.0], vec![-1.0, 0.0, 0.5, 1.0], vec![1.0, 1.0]).is_err());
        assert!(RqsSpline::new(1.0, vec![-1.0, 0.0, 1.0], vec![-1.0, 0.3, 1.0], vec![-0.5]).is_err());
        assert!(RqsSpline::new(1.0, vec![-1.0, 0.0, 1.0], vec![-1.0, 0.3, 1.0], vec![0.5]).is_ok());
    }
}
