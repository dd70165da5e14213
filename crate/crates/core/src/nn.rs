//! Small dense networks with explicit backpropagation.
//!
//! Weights are stored column-major (`weights[j * outputs + k]` is the weight
//! from input `j` to output `k`) so that both the forward pass and the
//! parameter update are axpy loops over contiguous columns.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..=bound);
        }
        layer
    }

    pub fn weight(&self, out: usize, input: usize) -> f64 {
        self.weights[input * self.outputs + out]
    }

    fn forward(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (j, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let col = &self.weights[j * self.outputs..(j + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(col) {
                *o += x * w;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Activations and backpropagated errors of one forward/backward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the (activated) output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// `deltas[l]`: gradient with respect to the pre-activation output of layer `l`.
    deltas: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
}

impl Mlp {
    /// `widths = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden_activation: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs an input and an output width");
        let layers = widths
            .windows(2)
            .map(|w| Layer::uniform(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden_activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn new_trace(&self) -> Trace {
        let mut acts = vec![vec![0.0; self.input_dim()]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; l.outputs]));
        let deltas = self.layers.iter().map(|l| vec![0.0; l.outputs]).collect();
        Trace { acts, deltas }
    }

    fn check_trace(&self, trace: &mut Trace) {
        if trace.acts.len() != self.layers.len() + 1 || trace.acts[0].len() != self.input_dim() {
            *trace = self.new_trace();
        }
    }

    /// Forward pass; the raw outputs (no output activation) end up in `trace.output()`.
    pub fn forward(&self, input: &[f64], trace: &mut Trace) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        self.check_trace(trace);
        trace.acts[0].copy_from_slice(input);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = trace.acts.split_at_mut(l + 1);
            let out = &mut tail[0];
            layer.forward(&head[l], out);
            if l < last && self.hidden_activation == Activation::Relu {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            if !out.iter().sum::<f64>().is_finite() {
                return Err(Error::NonFinite {
                    context: format!("activation of layer {l}"),
                });
            }
        }
        Ok(())
    }

    /// Backpropagates `grad_out` (gradient of a scalar with respect to the raw
    /// outputs) through the pass recorded in `trace`.
    pub fn backward(&self, trace: &mut Trace, grad_out: &[f64]) {
        let n = self.layers.len();
        trace.deltas[n - 1].copy_from_slice(grad_out);
        for l in (1..n).rev() {
            let layer = &self.layers[l];
            let (lower, upper) = trace.deltas.split_at_mut(l);
            let g = &upper[0];
            let below = &mut lower[l - 1];
            let input = &trace.acts[l];
            for (j, d) in below.iter_mut().enumerate() {
                // A ReLU unit that was off passes no gradient.
                if self.hidden_activation == Activation::Relu && input[j] == 0.0 {
                    *d = 0.0;
                    continue;
                }
                let col = &layer.weights[j * layer.outputs..(j + 1) * layer.outputs];
                *d = dot(col, g);
            }
        }
    }

    /// `params += scale * gradient` for the gradient held in `trace`.
    pub fn apply_gradient(&mut self, trace: &Trace, scale: f64) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let g = &trace.deltas[l];
            let input = &trace.acts[l];
            for (j, &x) in input.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let s = scale * x;
                let col = &mut layer.weights[j * layer.outputs..(j + 1) * layer.outputs];
                for (w, &gk) in col.iter_mut().zip(g) {
                    *w += s * gk;
                }
            }
            for (b, &gk) in layer.bias.iter_mut().zip(g) {
                *b += scale * gk;
            }
            if !layer.bias.iter().sum::<f64>().is_finite() {
                return Err(Error::NonFinite {
                    context: format!("update of layer {l}"),
                });
            }
        }
        Ok(())
    }

    /// Gradient held in `trace`, flattened in [`Mlp::params`] order.
    pub fn flat_gradient(&self, trace: &Trace) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (l, layer) in self.layers.iter().enumerate() {
            let g = &trace.deltas[l];
            for &x in &trace.acts[l] {
                out.extend(g.iter().map(|&gk| gk * x));
            }
            debug_assert_eq!(layer.bias.len(), g.len());
            out.extend_from_slice(g);
        }
        out
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weights);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (w, r) = rest.split_at(layer.weights.len());
            layer.weights.copy_from_slice(w);
            let (b, r) = r.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }
}

/// Dot product with four independent accumulators.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Numerically stable two-way softmax.
pub fn softmax2(logits: &[f64]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}
