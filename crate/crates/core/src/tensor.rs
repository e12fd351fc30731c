//! Dense numeric substrate: affine layers, a tanh multilayer perceptron with
//! explicit forward/backward passes, and finite-difference gradient checks.
//!
//! Weights are stored row-major with shape `(out_dim, in_dim)`. Hidden layers
//! use `tanh`; the output layer is affine.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// One affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::shape(format!(
                "layer {in_dim}->{out_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(Layer {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    #[inline]
    fn affine_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Multilayer perceptron with tanh hidden activations and an affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward`], consumed by [`Mlp::backward`].
///
/// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`
/// (post-tanh for hidden layers, affine for the last).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shapes: Vec<(usize, usize)>,
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache always holds the input")
    }
}

/// Gradient of a scalar loss with respect to every parameter of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp.layers.iter().map(|l| Layer::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(&mut l.bias).for_each(|g| *g *= factor);
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|g| *g == 0.0)
    }

    /// Gradient w.r.t. the first layer's pre-activation offset equals its bias gradient.
    pub fn first_bias(&self) -> &[f64] {
        &self.layers[0].bias
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::shape(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// All-zero network with the given widths, e.g. `[in, hidden, out]`.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::shape("need at least input and output widths"));
        }
        Mlp::new(widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())
    }

    /// LeCun-normal initialisation; the output layer is scaled by `out_scale`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], out_scale: f64, rng: &mut R) -> Result<Self> {
        let mut mlp = Mlp::zeros(widths)?;
        let n = mlp.layers.len();
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let std = (1.0 / layer.in_dim as f64).sqrt() * if i + 1 == n { out_scale } else { 1.0 };
            for w in &mut layer.weight {
                *w = std * rng::normal(rng);
            }
        }
        Ok(mlp)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_with_offset(input, None)
    }

    /// Forward pass with an optional vector added to the first layer's pre-activation.
    pub fn forward_with_offset(&self, input: &[f64], first_offset: Option<&[f64]>) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.in_dim() {
            return Err(Error::shape(format!(
                "input has dim {}, network expects {}",
                input.len(),
                self.in_dim()
            )));
        }
        if let Some(off) = first_offset {
            if off.len() != self.layers[0].out_dim {
                return Err(Error::shape(format!(
                    "offset has dim {}, first layer has width {}",
                    off.len(),
                    self.layers[0].out_dim
                )));
            }
        }
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim];
            layer.affine_into(&acts[i], &mut out);
            if i == 0 {
                if let Some(off) = first_offset {
                    out.iter_mut().zip(off).for_each(|(o, d)| *o += d);
                }
            }
            if i + 1 < n {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        let output = acts[n].clone();
        Ok((
            output,
            ForwardCache {
                shapes: self.layers.iter().map(|l| (l.in_dim, l.out_dim)).collect(),
                acts,
            },
        ))
    }

    /// Inference-only forward pass.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(y, _)| y)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let ok = cache.shapes.len() == self.layers.len()
            && cache
                .shapes
                .iter()
                .zip(&self.layers)
                .all(|(s, l)| *s == (l.in_dim, l.out_dim));
        if !ok {
            return Err(Error::shape("forward cache does not match this network"));
        }
        Ok(())
    }

    /// Backward pass returning parameter gradients and the input gradient.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let mut grads = MlpGrads::zeros_like(self);
        let input_grad = self.backward_accumulate(cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`Mlp::backward`] but adds into an existing gradient buffer.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        if output_grad.len() != self.out_dim() {
            return Err(Error::shape(format!(
                "output gradient has dim {}, network output is {}",
                output_grad.len(),
                self.out_dim()
            )));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("gradient buffer does not match this network"));
        }
        let n = self.layers.len();
        let mut delta = output_grad.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if i + 1 < n {
                // d tanh = 1 - a^2, applied to the post-activation stored in acts[i + 1]
                delta
                    .iter_mut()
                    .zip(&cache.acts[i + 1])
                    .for_each(|(d, a)| *d *= 1.0 - a * a);
            }
            let x = &cache.acts[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if *d != 0.0 {
                    let row = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    row.iter_mut().zip(x).for_each(|(w, v)| *w += d * v);
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            for (row, d) in layer.weight.chunks_exact(layer.in_dim).zip(&delta) {
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Plain gradient step `θ ← θ − lr · g`.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight.iter_mut().zip(&g.weight).for_each(|(w, d)| *w -= lr * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= lr * d);
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.weight.iter_mut().chain(&mut l.bias) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of `logits` against `label` and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let ls = log_softmax(logits);
    let mut grad: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    (-ls[label], grad)
}

/// Relative error used by every gradient check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central differences of `f` at `x`.
///
/// Per coordinate the error is `|a − n| / max(|a| + |n|, g)` where `g` is the
/// largest gradient magnitude, so coordinates whose true derivative is zero
/// are judged against the gradient's scale instead of against rounding noise.
/// Returns the maximum over coordinates; an empty `x` passes with error 0.
pub fn gradient_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != analytic.len() {
        return Err(Error::shape("analytic gradient length differs from point"));
    }
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        numeric.push((up - down) / (2.0 * step));
    }
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(scale).max(1e-12))
        .fold(0.0, f64::max))
}

/// Finite-difference check of [`Mlp::backward`] for a scalar loss of the output.
///
/// `loss_fn` maps the network output to `(loss, dloss/doutput)`. The returned
/// error is the maximum over all parameters and all input coordinates.
pub fn finite_diff_check<L>(params: &Mlp, input: &[f64], loss_fn: L) -> Result<f64>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (out, cache) = params.forward(input)?;
    let (loss, out_grad) = loss_fn(&out);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let (grads, input_grad) = params.backward(&cache, &out_grad)?;

    let theta = params.flat_params();
    let mut scratch = params.clone();
    let param_err = gradient_check(
        |p| {
            scratch.set_flat_params(p)?;
            Ok(loss_fn(&scratch.eval(input)?).0)
        },
        &theta,
        &grads.flat(),
        FD_STEP,
    )?;
    let input_err = gradient_check(|x| Ok(loss_fn(&params.eval(x)?).0), input, &input_grad, FD_STEP)?;
    Ok(param_err.max(input_err))
}
