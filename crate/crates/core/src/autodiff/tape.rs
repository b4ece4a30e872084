//! Reverse-mode differentiation over an explicit tape of matrix operations.
//!
//! Every value on the tape is a dense row-major matrix whose rows are batch
//! rows. A [`Graph`] records operations while the loss is built, then
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar node with respect to every parameter that was read.

use serde::{Deserialize, Serialize};

use crate::bijector::spline::{self, SplineScratch};
use crate::error::{Error, Result};
use crate::stats::{norm_cdf, norm_pdf};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn col_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self::from_vec(rows.len(), self.cols, data)
    }

    fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// A trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        let grad = vec![0.0; values.len()];
        Self { shape, values, grad }
    }

    fn as_mat(&self) -> Mat {
        let (rows, cols) = match self.shape.as_slice() {
            [] => (1, 1),
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => (1, self.values.len()),
        };
        Mat::from_vec(rows, cols, self.values.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Owns every trainable tensor of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        self.tensors.push(ParamTensor::new(shape, values));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.clear();
            t.grad.resize(t.values.len(), 0.0);
        }
    }

    /// Adds `grads` into the per-tensor accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.by_param) {
            if t.grad.len() != t.values.len() {
                t.grad.resize(t.values.len(), 0.0);
            }
            if let Some(g) = g {
                for (a, b) in t.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Flattened copy of all parameter values.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) {
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            t.values.copy_from_slice(s);
        }
    }

    /// Re-creates gradient buffers after deserialization.
    pub fn ensure_grads(&mut self) {
        self.zero_grad();
    }
}

/// Gradient of a scalar w.r.t. each parameter tensor (None if unused).
#[derive(Debug, Clone)]
pub struct Gradients {
    pub by_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    Param(ParamId),
    /// `x · (W ⊙ M) + b`, W stored as `in × out`.
    Linear { x: Var, w: Var, b: Var, mask: Option<&'a [f64]> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    LogDTanh(Var),
    NormCdf(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    BroadcastRows(Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    Spline { x: Var, params: Var, knots: usize, bound: f64 },
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::LogDTanh(_) => "log_dtanh",
            Op::NormCdf(_) => "norm_cdf",
            Op::Clamp { .. } => "clamp",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Spline { .. } => "spline",
        }
    }
}

struct Node<'a> {
    value: Mat,
    op: Op<'a>,
}

/// Records operations for one forward pass.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 - tanh(x)^2)` without cancellation.
pub(crate) fn log_dtanh(x: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - x.abs() - softplus(-2.0 * x.abs()))
}

fn matmul_masked(x: &Mat, w: &Mat, mask: Option<&[f64]>, b: &Mat) -> Mat {
    let (n, din, dout) = (x.rows, x.cols, w.cols);
    let wm: Vec<f64> = match mask {
        Some(m) => w.data.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => w.data.clone(),
    };
    let mut out = Mat::zeros(n, dout);
    for r in 0..n {
        let orow = &mut out.data[r * dout..(r + 1) * dout];
        orow.copy_from_slice(&b.data);
        let xrow = &x.data[r * din..(r + 1) * din];
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wm[k * dout..(k + 1) * dout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat { rows: a.rows, cols: a.cols, data: a.data.iter().map(|&v| f(v)).collect() }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let m = self.store.get(id).as_mat();
        self.push(m, Op::Param(id))
    }

    fn check_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.same_shape(mb) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{op}: {}x{} vs {}x{}",
                ma.rows, ma.cols, mb.rows, mb.cols
            )))
        }
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var, mask: Option<&'a [f64]>) -> Result<Var> {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        if xm.cols != wm.rows || bm.cols != wm.cols || bm.rows != 1 {
            return Err(Error::Dimension(format!(
                "linear: input {}x{}, weight {}x{}, bias {}x{}",
                xm.rows, xm.cols, wm.rows, wm.cols, bm.rows, bm.cols
            )));
        }
        if let Some(m) = mask {
            if m.len() != wm.data.len() {
                return Err(Error::Dimension("linear: mask does not match weight".into()));
            }
        }
        let out = matmul_masked(xm, wm, mask, bm);
        Ok(self.push(out, Op::Linear { x, w, b, mask }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_shape(a, b, "add")?;
        let v = Mat {
            rows: self.value(a).rows,
            cols: self.value(a).cols,
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_shape(a, b, "sub")?;
        let v = Mat {
            rows: self.value(a).rows,
            cols: self.value(a).cols,
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect(),
        };
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_shape(a, b, "mul")?;
        let v = Mat {
            rows: self.value(a).rows,
            cols: self.value(a).cols,
            data: self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = map(self.value(a), |x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = map(self.value(a), softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise `log(1 - tanh(a)^2)`, the log-derivative of tanh.
    pub fn log_dtanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), log_dtanh);
        self.push(v, Op::LogDTanh(a))
    }

    /// Standard normal CDF.
    pub fn norm_cdf(&mut self, a: Var) -> Var {
        let v = map(self.value(a), norm_cdf);
        self.push(v, Op::NormCdf(a))
    }

    /// Clamps elementwise; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a, lo, hi })
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(Error::Dimension("concat: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.cols {
            return Err(Error::Dimension(format!(
                "slice: columns {start}..{} of {}",
                start + len,
                m.cols
            )));
        }
        let mut out = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::Slice { a, start }))
    }

    /// Repeats a single row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let m = self.value(a);
        if m.rows != 1 {
            return Err(Error::Dimension("broadcast_rows expects a single row".into()));
        }
        let mut data = Vec::with_capacity(rows * m.cols);
        for _ in 0..rows {
            data.extend_from_slice(&m.data);
        }
        let out = Mat::from_vec(rows, m.cols, data);
        Ok(self.push(out, Op::BroadcastRows(a)))
    }

    /// Row sums as a column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let out = Mat::from_vec(m.rows, 1, data);
        self.push(out, Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.data.iter().sum::<f64>() / m.data.len().max(1) as f64;
        self.push(Mat::scalar(s), Op::Mean(a))
    }

    /// Rational-quadratic spline applied per column of `x`. `params` has
    /// `3K-1` (or `3K+1`, free boundary derivatives) raw values per column
    /// of `x`, either one row per batch row or a single shared row. Returns
    /// `(y, logdet)`, both shaped like `x`.
    pub fn spline(&mut self, x: Var, params: Var, knots: usize, bound: f64) -> Result<(Var, Var)> {
        let (xm, pm) = (self.value(x), self.value(params));
        let p = if xm.cols == 0 { 0 } else { pm.cols / xm.cols };
        if pm.cols != p * xm.cols || !spline::is_raw_len(p, knots) || (pm.rows != xm.rows && pm.rows != 1) {
            return Err(Error::Dimension(format!(
                "spline: x {}x{}, params {}x{} (need {} or {} per column)",
                xm.rows,
                xm.cols,
                pm.rows,
                pm.cols,
                spline::raw_len(knots),
                spline::raw_len_free(knots)
            )));
        }
        let (n, m) = (xm.rows, xm.cols);
        let mut out = Mat::zeros(n, 2 * m);
        let mut scratch = SplineScratch::default();
        for r in 0..n {
            let prow = pm.row(if pm.rows == 1 { 0 } else { r });
            for j in 0..m {
                let (y, l) =
                    spline::forward_raw(xm.get(r, j), &prow[j * p..(j + 1) * p], knots, bound, &mut scratch);
                out.data[r * 2 * m + j] = y;
                out.data[r * 2 * m + m + j] = l;
            }
        }
        let node = self.push(out, Op::Spline { x, params, knots, bound });
        let y = self.slice_cols(node, 0, m)?;
        let l = self.slice_cols(node, m, m)?;
        Ok((y, l))
    }

    /// Name of the first operation whose output is non-finite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| n.value.data.iter().any(|v| !v.is_finite()))
            .map(|n| n.op.name())
    }

    /// Gradient of the scalar `loss` w.r.t. every parameter read.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        if !lv.data[0].is_finite() {
            return Err(Error::NonFinite { op: self.first_non_finite().unwrap_or("loss") });
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut by_param: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        let mut scratch = SplineScratch::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = by_param[id.0].get_or_insert_with(|| vec![0.0; g.data.len()]);
                    for (a, b) in slot.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                Op::Linear { x, w, b, mask } => {
                    let (xm, wm) = (self.value(*x), self.value(*w));
                    let (n, din, dout) = (xm.rows, xm.cols, wm.cols);
                    let mut gw = Mat::zeros(din, dout);
                    let mut gb = Mat::zeros(1, dout);
                    let mut gx = Mat::zeros(n, din);
                    let wmasked: Vec<f64> = match mask {
                        Some(m) => wm.data.iter().zip(m.iter()).map(|(a, b)| a * b).collect(),
                        None => wm.data.clone(),
                    };
                    for r in 0..n {
                        let grow = g.row(r);
                        for (o, &gv) in gb.data.iter_mut().zip(grow) {
                            *o += gv;
                        }
                        let xrow = xm.row(r);
                        let gxrow = &mut gx.data[r * din..(r + 1) * din];
                        for k in 0..din {
                            let wrow = &wmasked[k * dout..(k + 1) * dout];
                            let mut acc = 0.0;
                            for (a, b) in grow.iter().zip(wrow) {
                                acc += a * b;
                            }
                            gxrow[k] = acc;
                            let xv = xrow[k];
                            if xv != 0.0 {
                                let gwrow = &mut gw.data[k * dout..(k + 1) * dout];
                                for (a, &gv) in gwrow.iter_mut().zip(grow) {
                                    *a += xv * gv;
                                }
                            }
                        }
                    }
                    if let Some(m) = mask {
                        for (a, b) in gw.data.iter_mut().zip(m.iter()) {
                            *a *= b;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, map(&g, |v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, bm, |gv, bv| gv * bv);
                    let gb = zip_map(&g, am, |gv, av| gv * av);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, map(&g, |v| v * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |gv, t| gv * (1.0 - t * t));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| gv * sigmoid(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = zip_map(&g, &node.value, |gv, e| gv * e);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| gv / x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| 2.0 * gv * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogDTanh(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| -2.0 * gv * x.tanh());
                    accumulate(&mut grads, *a, ga);
                }
                Op::NormCdf(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| gv * norm_pdf(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp { a, lo, hi } => {
                    let ga = zip_map(&g, self.value(*a), |gv, x| if x < *lo || x > *hi { 0.0 } else { gv });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut gp = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Slice { a, start } => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    for r in 0..g.rows {
                        ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    let mut ga = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in ga.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let am = self.value(*a);
                    let mut ga = Mat::zeros(am.rows, am.cols);
                    for r in 0..am.rows {
                        let gv = g.data[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v = gv);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let am = self.value(*a);
                    let ga = Mat::from_vec(am.rows, am.cols, vec![g.data[0]; am.data.len()]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let am = self.value(*a);
                    let c = g.data[0] / am.data.len().max(1) as f64;
                    let ga = Mat::from_vec(am.rows, am.cols, vec![c; am.data.len()]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Spline { x, params, knots, bound } => {
                    let (xm, pm) = (self.value(*x), self.value(*params));
                    let (n, m) = (xm.rows, xm.cols);
                    let p = pm.cols / m;
                    let mut gx = Mat::zeros(n, m);
                    let mut gp = Mat::zeros(pm.rows, pm.cols);
                    for r in 0..n {
                        let prow_idx = if pm.rows == 1 { 0 } else { r };
                        let prow = pm.row(prow_idx);
                        for j in 0..m {
                            let gy = g.data[r * 2 * m + j];
                            let gl = g.data[r * 2 * m + m + j];
                            if gy == 0.0 && gl == 0.0 {
                                continue;
                            }
                            let graw = &mut gp.data[prow_idx * pm.cols + j * p..prow_idx * pm.cols + (j + 1) * p];
                            gx.data[r * m + j] = spline::backward_raw(
                                xm.get(r, j),
                                &prow[j * p..(j + 1) * p],
                                *knots,
                                *bound,
                                gy,
                                gl,
                                graw,
                                &mut scratch,
                            );
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *params, gp);
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn zip_map(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    Mat { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Evaluates `loss_fn` on a fresh graph and returns the loss value together
/// with its gradient w.r.t. every parameter in `store`.
pub fn grad<F>(store: &ParamStore, loss_fn: F) -> Result<(f64, Gradients)>
where
    F: for<'g> FnOnce(&mut Graph<'g>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    Ok((value, grads))
}
