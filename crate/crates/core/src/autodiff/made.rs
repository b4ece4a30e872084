//! Masked autoregressive conditioner networks.
//!
//! Flow inputs carry degrees `1..=D` in conditioning order. An output unit of
//! degree `d` may only see inputs of degree `< d`; hidden units connect to
//! inputs of degree `<=` their own. Optional context columns are appended to
//! the input of every layer with an all-ones mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// Degree bookkeeping and the resulting binary mask for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoregressiveMask {
    pub in_degrees: Vec<usize>,
    pub out_degrees: Vec<usize>,
    /// `in × out`, matching the weight layout.
    pub mask: Vec<f64>,
}

impl AutoregressiveMask {
    /// `strict` for the output layer, non-strict for hidden layers.
    /// `context` extra unmasked input rows are appended after the degrees.
    pub fn new(in_degrees: &[usize], out_degrees: &[usize], strict: bool, context: usize) -> Self {
        let n_in = in_degrees.len() + context;
        let n_out = out_degrees.len();
        let mut mask = vec![0.0; n_in * n_out];
        for (j, &din) in in_degrees.iter().enumerate() {
            for (i, &dout) in out_degrees.iter().enumerate() {
                let allowed = if strict { dout > din } else { dout >= din };
                if allowed {
                    mask[j * n_out + i] = 1.0;
                }
            }
        }
        for j in in_degrees.len()..n_in {
            for i in 0..n_out {
                mask[j * n_out + i] = 1.0;
            }
        }
        Self { in_degrees: in_degrees.to_vec(), out_degrees: out_degrees.to_vec(), mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MaskedLayer {
    weight: ParamId,
    bias: ParamId,
    mask: AutoregressiveMask,
}

/// MADE-style MLP producing `outputs_per_dim` values for each requested
/// output degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedMlp {
    layers: Vec<MaskedLayer>,
    n_inputs: usize,
    n_context: usize,
    n_outputs: usize,
}

/// Hidden degrees cycle through `1..max_degree`; with a single input every
/// hidden unit gets degree 0 and sees only the context.
fn hidden_degrees(width: usize, max_in_degree: usize) -> Vec<usize> {
    if max_in_degree <= 1 {
        return vec![0; width];
    }
    (0..width).map(|k| 1 + k % (max_in_degree - 1)).collect()
}

impl MaskedMlp {
    /// `in_degrees[j]` is the degree of flow input `j`; `output_degrees`
    /// lists one degree per output unit. Hidden weights are drawn uniformly
    /// in `±1/sqrt(fan_in)`; the final layer starts at zero so the network
    /// initially outputs zeros.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        in_degrees: &[usize],
        n_context: usize,
        width: usize,
        depth: usize,
        output_degrees: &[usize],
    ) -> Self {
        let max_deg = in_degrees.iter().copied().max().unwrap_or(0);
        let mut layers = Vec::with_capacity(depth + 1);
        let mut prev = in_degrees.to_vec();
        for _ in 0..depth {
            let hid = hidden_degrees(width, max_deg);
            let mask = AutoregressiveMask::new(&prev, &hid, false, n_context);
            let fan_in = prev.len() + n_context;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * width).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..width).map(|_| rng.random_range(-bound..bound)).collect();
            let weight = store.add(vec![fan_in, width], w);
            let bias = store.add(vec![1, width], b);
            layers.push(MaskedLayer { weight, bias, mask });
            prev = hid;
        }
        let mask = AutoregressiveMask::new(&prev, output_degrees, true, n_context);
        let fan_in = prev.len() + n_context;
        let weight = store.add(vec![fan_in, output_degrees.len()], vec![0.0; fan_in * output_degrees.len()]);
        let bias = store.add(vec![1, output_degrees.len()], vec![0.0; output_degrees.len()]);
        layers.push(MaskedLayer { weight, bias, mask });
        Self { layers, n_inputs: in_degrees.len(), n_context, n_outputs: output_degrees.len() }
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_context(&self) -> usize {
        self.n_context
    }

    /// Records the network on `g`. Hidden activation is tanh.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, context: Option<Var>) -> Result<Var> {
        if g.value(x).cols != self.n_inputs {
            return Err(Error::Dimension(format!(
                "conditioner expects {} inputs, got {}",
                self.n_inputs,
                g.value(x).cols
            )));
        }
        match (context, self.n_context) {
            (None, 0) => {}
            (Some(c), n) if g.value(c).cols == n && n > 0 => {}
            _ => return Err(Error::Dimension("conditioner context width mismatch".into())),
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = match context {
                Some(c) => g.concat(&[h, c])?,
                None => h,
            };
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            let z = g.linear(input, w, b, Some(&layer.mask.mask))?;
            h = if i == last { z } else { g.tanh(z) };
        }
        Ok(h)
    }

    /// Plain evaluation outside of training.
    pub fn eval(&self, store: &ParamStore, x: &Mat, context: Option<&Mat>) -> Result<Mat> {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone());
        let cv = context.map(|c| g.constant(c.clone()));
        let out = self.forward(&mut g, xv, cv)?;
        Ok(g.value(out).clone())
    }

    pub fn layer_masks(&self) -> impl Iterator<Item = &AutoregressiveMask> {
        self.layers.iter().map(|l| &l.mask)
    }
}
