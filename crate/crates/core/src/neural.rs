//! Dense feed-forward networks, softmax and Adam.
//!
//! Weights are stored row-major as `out x in`; the batched passes take
//! inputs as `batch x in` row-major slices.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => elu(z),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    a + 1.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// ELU with alpha = 1.
pub fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        libm::expm1(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    /// `fan_out x fan_in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Layer { fan_in, fan_out, activation, weights: vec![0.0; fan_in * fan_out], bias: vec![0.0; fan_out] }
    }

    /// Weight from input `j` to output `h`.
    pub fn w(&self, h: usize, j: usize) -> f64 {
        self.weights[h * self.fan_in + j]
    }

    fn row(&self, h: usize) -> &[f64] {
        &self.weights[h * self.fan_in..(h + 1) * self.fan_in]
    }

    /// `fan_in x fan_out` copy of the weights.
    fn transposed(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.weights.len()];
        for h in 0..self.fan_out {
            for j in 0..self.fan_in {
                t[j * self.fan_out + h] = self.weights[h * self.fan_in + j];
            }
        }
        t
    }
}

/// Layer sizes plus activations: hidden layers use ELU, the output identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(sizes: Vec<usize>) -> Self {
        Architecture { sizes }
    }

    /// `input -> 2*input -> 2*input -> outputs`.
    pub fn two_hidden(input: usize, outputs: usize) -> Self {
        Architecture::new(vec![input, 2 * input, 2 * input, outputs])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub batch: usize,
    /// Inputs of each layer (`batch x fan_in`).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer (`batch x fan_out`).
    pub pre: Vec<Vec<f64>>,
    /// Activations of each layer (`batch x fan_out`).
    pub post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same shapes as the parameters: `(weights, bias)` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Gradient with respect to the input (`batch x fan_in`).
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Gradients {
            layers: p.layers.iter().map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()])).collect(),
            input: Vec::new(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for (w, b) in &self.layers {
            s += math::dot(w, w) + math::dot(b, b);
        }
        math::sqrt(s)
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            let k = max_norm / n;
            for (w, b) in &mut self.layers {
                w.iter_mut().for_each(|x| *x *= k);
                b.iter_mut().for_each(|x| *x *= k);
            }
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.iter().chain(b.iter()).all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (w, b) in &self.layers {
            v.extend_from_slice(w);
            v.extend_from_slice(b);
        }
        v
    }
}

impl MlpParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let n = arch.sizes.len();
        let layers = arch
            .sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Layer::zeros(w[0], w[1], if k + 2 == n { Activation::Identity } else { Activation::Elu }))
            .collect();
        MlpParams { layers }
    }

    /// Weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases 0.
    pub fn init_he_uniform<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut p = MlpParams::zeros(arch);
        for l in &mut p.layers {
            let bound = he_bound(l.fan_in);
            for w in &mut l.weights {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        p
    }

    pub fn architecture(&self) -> Architecture {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.fan_out));
        Architecture { sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            v.extend_from_slice(&l.weights);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                expected: self.num_params(),
                found: flat.len(),
                context: "flat parameters",
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    /// Batched forward pass; `x` is `batch x input_dim`.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardCache)> {
        let d = self.input_dim();
        if x.len() != d * batch {
            return Err(Error::Dimension { expected: d * batch, found: x.len(), context: "network input" });
        }
        let mut cache = ForwardCache {
            batch,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
            post: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        for l in &self.layers {
            let wt = l.transposed();
            let mut z = vec![0.0; batch * l.fan_out];
            for b in 0..batch {
                let xin = &cur[b * l.fan_in..(b + 1) * l.fan_in];
                let zrow = &mut z[b * l.fan_out..(b + 1) * l.fan_out];
                zrow.copy_from_slice(&l.bias);
                for (j, &xj) in xin.iter().enumerate() {
                    if xj != 0.0 {
                        math::axpy(xj, &wt[j * l.fan_out..(j + 1) * l.fan_out], zrow);
                    }
                }
            }
            let a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            cache.inputs.push(cur);
            cache.pre.push(z);
            cur = a.clone();
            cache.post.push(a);
        }
        Ok((cur, cache))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_batch(x, 1)
    }

    /// Output only.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if x.len() != d {
            return Err(Error::Dimension { expected: d, found: x.len(), context: "network input" });
        }
        let mut cur = x.to_vec();
        for l in &self.layers {
            let mut next = vec![0.0; l.fan_out];
            for h in 0..l.fan_out {
                next[h] = l.activation.apply(l.bias[h] + math::dot(l.row(h), &cur));
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Reverse-mode gradients of `sum(grad_out . output)` with respect to
    /// every parameter and the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Gradients> {
        self.backward_impl(cache, grad_out, true)
    }

    /// As [`backward`](Self::backward) but leaves `input` zeroed.
    pub fn backward_params(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Gradients> {
        self.backward_impl(cache, grad_out, false)
    }

    fn backward_impl(&self, cache: &ForwardCache, grad_out: &[f64], want_input: bool) -> Result<Gradients> {
        let batch = cache.batch;
        let out = self.output_dim();
        if grad_out.len() != out * batch {
            return Err(Error::Dimension { expected: out * batch, found: grad_out.len(), context: "output gradient" });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_out.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let (pre, post, input) = (&cache.pre[k], &cache.post[k], &cache.inputs[k]);
            for i in 0..delta.len() {
                delta[i] *= l.activation.grad(pre[i], post[i]);
            }
            let (gw, gb) = &mut grads.layers[k];
            // Accumulate the weight gradient as `in x out` so that sparse
            // inputs can be skipped, then transpose once.
            let mut gwt = vec![0.0; l.fan_in * l.fan_out];
            let mut dx = vec![0.0; batch * l.fan_in];
            for b in 0..batch {
                let xin = &input[b * l.fan_in..(b + 1) * l.fan_in];
                let drow = &delta[b * l.fan_out..(b + 1) * l.fan_out];
                for (h, &g) in drow.iter().enumerate() {
                    gb[h] += g;
                }
                for (j, &xj) in xin.iter().enumerate() {
                    if xj != 0.0 {
                        math::axpy(xj, drow, &mut gwt[j * l.fan_out..(j + 1) * l.fan_out]);
                    }
                }
                if k > 0 || want_input {
                    let dxrow = &mut dx[b * l.fan_in..(b + 1) * l.fan_in];
                    for (h, &g) in drow.iter().enumerate() {
                        if g != 0.0 {
                            math::axpy(g, l.row(h), dxrow);
                        }
                    }
                }
            }
            for j in 0..l.fan_in {
                for h in 0..l.fan_out {
                    gw[h * l.fan_in + j] += gwt[j * l.fan_out + h];
                }
            }
            delta = dx;
        }
        grads.input = delta;
        Ok(grads)
    }
}

pub fn he_bound(fan_in: usize) -> f64 {
    math::sqrt(6.0 / fan_in as f64)
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| math::exp(z - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let n = params.num_params();
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step. Non-finite gradients leave everything
/// untouched and return an error.
pub fn adam_step(params: &mut MlpParams, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    if state.m.len() != params.num_params() {
        return Err(Error::Dimension { expected: params.num_params(), found: state.m.len(), context: "adam state" });
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(state.beta1, t);
    let c2 = 1.0 - libm::pow(state.beta2, t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut k = 0;
    for (l, (gw, gb)) in params.layers.iter_mut().zip(&grads.layers) {
        for (p, g) in l.weights.iter_mut().zip(gw).chain(l.bias.iter_mut().zip(gb)) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (math::sqrt(vhat) + eps);
            k += 1;
        }
    }
    Ok(())
}
