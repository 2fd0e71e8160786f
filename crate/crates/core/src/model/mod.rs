//! Small differentiable classifiers.
//!
//! A model is a stack of dense layers `z = W a + b` with a hidden
//! activation between layers and a loss head on the final logits. Weights
//! of each layer are stored row-major (`out x in`) followed by the biases,
//! layer after layer, in one flat [`ParamVector`].
//!
//! Gradients come from a hand-written reverse pass. The same pass, run on
//! dual numbers seeded with a direction `v`, yields the exact
//! Hessian-vector product `H v` as the tangent of the gradient.

mod dataset;
mod scalar;

pub use dataset::{blobs, Blobs, Dataset, Split};
pub use scalar::{Dual, Scalar};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// Loss head applied to the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Softmax cross-entropy.
    #[default]
    CrossEntropy,
    /// `½‖z − onehot(y)‖²`; with a logistic architecture this is ridge
    /// regression onto one-hot targets and has a constant Hessian.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl ModelSpec {
    pub fn logistic(inputs: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Logistic,
            layer_sizes: vec![inputs, classes],
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        Self {
            kind: ModelKind::Mlp,
            layer_sizes,
            activation,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = &self.layer_sizes;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        if self.kind == ModelKind::Logistic && sizes.len() != 2 {
            return Err(Error::config("a logistic model has exactly one layer"));
        }
        if *sizes.last().unwrap() < 2 {
            return Err(Error::config("need at least two output classes"));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub(crate) fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.inputs() {
            return Err(Error::input(format!(
                "expected {} features, got {}",
                self.inputs(),
                x.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.inputs() {
            return Err(Error::input(format!(
                "dataset has {} features, model expects {}",
                data.dim(),
                self.inputs()
            )));
        }
        if data.num_classes() > self.classes() {
            return Err(Error::input(format!(
                "dataset has {} classes, model outputs {}",
                data.num_classes(),
                self.classes()
            )));
        }
        Ok(())
    }
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.param_count());
    for w in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        out.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        out.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ParamVector::from_vec_unchecked(out))
}

/// Reusable per-example buffers for the forward and reverse pass.
struct Workspace<T> {
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            acts: spec.layer_sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            delta: Vec::new(),
            delta_prev: Vec::new(),
        }
    }
}

fn forward<T: Scalar>(spec: &ModelSpec, params: &[T], x: &[f64], ws: &mut Workspace<T>) {
    for (a, &xi) in ws.acts[0].iter_mut().zip(x) {
        *a = T::from_f64(xi);
    }
    let layers = spec.layer_sizes.len() - 1;
    let mut offset = 0;
    for l in 0..layers {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let (w, rest) = params[offset..].split_at(n_in * n_out);
        let b = &rest[..n_out];
        let (prev, next) = ws.acts.split_at_mut(l + 1);
        let input = &prev[l];
        let out = &mut next[0];
        let hidden = l + 1 < layers;
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut z = b[o];
            for (wi, ai) in row.iter().zip(input) {
                z += *wi * *ai;
            }
            out[o] = if hidden {
                match spec.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Relu => {
                        if z.value() > 0.0 {
                            z
                        } else {
                            T::zero()
                        }
                    }
                }
            } else {
                z
            };
        }
        offset += n_in * n_out + n_out;
    }
}

/// Loss of the logits in `ws.acts.last()`; fills `ws.delta` with `dℓ/dz`.
fn loss_head<T: Scalar>(spec: &ModelSpec, y: usize, ws: &mut Workspace<T>) -> T {
    let logits = ws.acts.last().unwrap();
    ws.delta.clear();
    match spec.loss {
        LossKind::CrossEntropy => {
            let mut m = logits[0];
            for &z in &logits[1..] {
                if z.value() > m.value() {
                    m = z;
                }
            }
            let mut sum = T::zero();
            for &z in logits {
                sum += (z - m).exp();
            }
            let lse = m + sum.ln();
            for (j, &z) in logits.iter().enumerate() {
                let p = (z - lse).exp();
                ws.delta.push(if j == y { p - T::from_f64(1.0) } else { p });
            }
            lse - logits[y]
        }
        LossKind::Squared => {
            let mut loss = T::zero();
            for (j, &z) in logits.iter().enumerate() {
                let r = if j == y { z - T::from_f64(1.0) } else { z };
                loss += r * r;
                ws.delta.push(r);
            }
            loss * T::from_f64(0.5)
        }
    }
}

/// Adds `scale * ∇ℓ` into `grad`, reading `dℓ/dz` from `ws.delta`.
fn backward<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    scale: T,
    ws: &mut Workspace<T>,
    grad: &mut [T],
) {
    let layers = spec.layer_sizes.len() - 1;
    let mut offsets = Vec::with_capacity(layers);
    let mut off = 0;
    for w in spec.layer_sizes.windows(2) {
        offsets.push(off);
        off += w[0] * w[1] + w[1];
    }
    for l in (0..layers).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let off = offsets[l];
        let input = &ws.acts[l];
        {
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = ws.delta[o] * scale;
                gb[o] += d;
                for (g, &a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params[off..off + n_in * n_out];
        ws.delta_prev.clear();
        ws.delta_prev.resize(n_in, T::zero());
        for o in 0..n_out {
            let d = ws.delta[o];
            for (dp, &wi) in ws.delta_prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *dp += wi * d;
            }
        }
        for (dp, &a) in ws.delta_prev.iter_mut().zip(input) {
            *dp = match spec.activation {
                Activation::Tanh => *dp * (T::from_f64(1.0) - a * a),
                Activation::Relu => {
                    if a.value() > 0.0 {
                        *dp
                    } else {
                        T::zero()
                    }
                }
            };
        }
        std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
    }
}

/// `scale * Σ ℓ_i` and `scale * Σ ∇ℓ_i` over `indices`, without validation
/// of the result.
fn accumulate<T: Scalar>(
    spec: &ModelSpec,
    params: &[T],
    data: &Dataset,
    indices: &[usize],
    scale: f64,
    grad: &mut [T],
) -> T {
    let mut ws = Workspace::new(spec);
    let s = T::from_f64(scale);
    let mut total = T::zero();
    for &i in indices {
        forward(spec, params, data.row(i), &mut ws);
        total += loss_head(spec, data.label(i), &mut ws);
        backward(spec, params, s, &mut ws, grad);
    }
    total * s
}

fn check_indices(data: &Dataset, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::input("index set is empty"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::input(format!(
            "index {i} out of range for {} rows",
            data.len()
        )));
    }
    Ok(())
}

/// Softmax cross-entropy (or squared error) of a single example.
pub fn example_loss(spec: &ModelSpec, params: &ParamVector, x: &[f64], y: usize) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    if y >= spec.classes() {
        return Err(Error::input(format!("label {y} out of range")));
    }
    let mut ws = Workspace::new(spec);
    forward(spec, params.as_slice(), x, &mut ws);
    let loss = loss_head(spec, y, &mut ws);
    finite(loss, "loss")
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::input(format!("{what} is not finite")))
    }
}

/// Loss and gradient with no validation; callers that monitor divergence
/// inspect the returned values themselves.
pub(crate) fn loss_grad_raw(
    spec: &ModelSpec,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
    scale: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let loss = accumulate(spec, params, data, indices, scale, &mut grad);
    (loss, grad)
}

/// `(scale·Σ ℓ_i, scale·Σ ∇ℓ_i)` over the given rows.
pub fn subset_loss_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    scale: f64,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_dataset(data)?;
    check_indices(data, indices)?;
    let (loss, grad) = loss_grad_raw(spec, params, data, indices, scale);
    finite(loss, "loss")?;
    Ok((loss, ParamVector::new(grad)?))
}

/// `scale·Σ ℓ_i` over the given rows.
pub fn subset_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    scale: f64,
) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_dataset(data)?;
    check_indices(data, indices)?;
    let mut ws = Workspace::new(spec);
    let mut total = 0.0;
    for &i in indices {
        forward(spec, params.as_slice(), data.row(i), &mut ws);
        total += loss_head(spec, data.label(i), &mut ws);
    }
    finite(total * scale, "loss")
}

/// Gradient of a single example's unscaled loss.
pub fn example_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    k: usize,
) -> Result<ParamVector> {
    subset_loss_grad(spec, params, data, &[k], 1.0).map(|(_, g)| g)
}

/// Exact `scale·∇²(Σ ℓ_i)·v`: the tangent of the gradient along `v`.
pub fn hvp(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    v: &ParamVector,
    scale: f64,
) -> Result<ParamVector> {
    spec.check_params(params)?;
    spec.check_dataset(data)?;
    check_indices(data, indices)?;
    if v.len() != params.len() {
        return Err(Error::input(format!(
            "direction has length {}, expected {}",
            v.len(),
            params.len()
        )));
    }
    ParamVector::new(hvp_raw(spec, params, data, indices, v, scale))
}

pub(crate) fn hvp_raw(
    spec: &ModelSpec,
    params: &[f64],
    data: &Dataset,
    indices: &[usize],
    v: &[f64],
    scale: f64,
) -> Vec<f64> {
    let seeded: Vec<Dual> = params
        .iter()
        .zip(v)
        .map(|(&p, &d)| Dual::new(p, d))
        .collect();
    let mut grad = vec![Dual::default(); params.len()];
    accumulate(spec, &seeded, data, indices, scale, &mut grad);
    grad.into_iter().map(|g| g.eps).collect()
}

/// Arg-max label (ties go to the smallest class index) and the raw logits.
pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    spec.check_params(params)?;
    spec.check_input(x)?;
    let mut ws = Workspace::<f64>::new(spec);
    forward(spec, params.as_slice(), x, &mut ws);
    let logits = ws.acts.pop().unwrap();
    Ok((argmax(&logits), logits))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Fraction of `indices` classified correctly.
pub fn accuracy(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    check_indices(data, indices)?;
    let mut correct = 0usize;
    for &i in indices {
        if predict(spec, params, data.row(i))?.0 == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}
