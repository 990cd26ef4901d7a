use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// All weights and biases zero.
    Zeros,
    /// He-uniform weights on rectified layers, Glorot-uniform on the output layer, zero biases.
    Random,
    /// Like `Random`, but the output layer starts at exactly zero.
    RandomZeroOutput,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Fully connected stack: rectifier between layers, configurable activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output_activation: Activation,
}

impl Mlp {
    /// `dims = [input, hidden…, output]`; a stack of `dims.len() - 1` layers.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        output_activation: Activation,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract("an MLP needs at least one layer".into()));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = i + 1 == n;
            let bound = match (init, last) {
                (Init::Zeros, _) | (Init::RandomZeroOutput, true) => 0.0,
                (_, false) => (6.0 / fan_in as f64).sqrt(),
                (_, true) => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                .collect();
            let weight = store.add(format!("{prefix}.{i}.weight"), Tensor::matrix(fan_in, fan_out, w))?;
            let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[1, fan_out]))?;
            layers.push(Layer {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Ok(Self {
            layers,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Plain forward pass over `input[n, input_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var> {
        self.forward_parts(g, store, &[input])
    }

    /// Forward pass whose input is the column-wise concatenation of `parts`. A part with a
    /// single row is broadcast to every row, and its first-layer product is computed once.
    pub fn forward_parts(&self, g: &mut Graph, store: &ParamStore, parts: &[Var]) -> Result<Var> {
        let pre = self.first_preactivation(g, store, parts)?;
        Ok(self.forward_from_preactivation(g, store, pre))
    }

    /// First-layer pre-activation `Σ_k parts[k] · W[rows_k] + b`.
    pub fn first_preactivation(&self, g: &mut Graph, store: &ParamStore, parts: &[Var]) -> Result<Var> {
        let layer = &self.layers[0];
        let widths: usize = parts.iter().map(|p| g.shape(*p).1).sum();
        if widths != layer.fan_in {
            return Err(Error::Shape(format!(
                "MLP expects input width {}, got {widths}",
                layer.fan_in
            )));
        }
        let rows = parts.iter().map(|p| g.shape(*p).0).max().unwrap_or(1);
        let mut offset = 0;
        let mut per_row: Option<Var> = None;
        let mut constant = g.param(store, layer.bias);
        for &p in parts {
            let (n, w) = g.shape(p);
            if n != 1 && n != rows {
                return Err(Error::Shape(format!("MLP part with {n} rows among {rows}-row inputs")));
            }
            let block = self.weight_rows(g, store, 0, offset, offset + w);
            offset += w;
            let prod = g.matmul(p, block);
            if n == 1 && rows != 1 {
                constant = g.add(constant, prod);
            } else {
                per_row = Some(match per_row {
                    Some(acc) => g.add(acc, prod),
                    None => prod,
                });
            }
        }
        Ok(match per_row {
            Some(v) => g.add_row(v, constant),
            None => g.broadcast_rows(constant, rows),
        })
    }

    /// Rows `start..end` of layer `layer`'s weight as a graph node.
    pub fn weight_rows(&self, g: &mut Graph, store: &ParamStore, layer: usize, start: usize, end: usize) -> Var {
        let w = g.param(store, self.layers[layer].weight);
        if start == 0 && end == self.layers[layer].fan_in {
            return w;
        }
        g.gather_rows(w, Arc::new((start..end).map(Some).collect()))
    }

    /// Continue the forward pass from a given first-layer pre-activation.
    pub fn forward_from_preactivation(&self, g: &mut Graph, store: &ParamStore, pre: Var) -> Var {
        let mut h = pre;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let relu = i < last || self.output_activation == Activation::Relu;
            if i == 0 {
                if relu {
                    h = g.relu(h);
                }
            } else {
                let w = g.param(store, layer.weight);
                let b = g.param(store, layer.bias);
                h = g.linear(h, w, b, relu);
            }
        }
        h
    }
}
