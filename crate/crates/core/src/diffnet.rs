//! Dense MLP evaluation and exact differentiation.
//!
//! Parameters are stored flat, layer by layer: the `out x in` weight matrix in
//! row-major order followed by the `out` biases. Hidden layers apply the
//! configured activation; the output layer is linear.
//!
//! The forward/backward pass is generic over a [`Scalar`]. Running it on
//! [`Dual`] numbers seeded with a direction `v` yields the Hessian-vector
//! product `H v` in the tangent part of the gradient (forward-over-reverse),
//! which is what the second-order meta-gradient needs.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths (input, hidden..., output) plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("a network needs at least an input and an output layer"));
        }
        if layer_sizes.iter().any(|&w| w == 0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(NetSpec {
            layer_sizes,
            activation,
        })
    }

    /// The 1-40-40-1 ReLU regressor used for the toy benchmark.
    pub fn default_regressor() -> Self {
        NetSpec {
            layer_sizes: vec![1, 40, 40, 1],
            activation: Activation::Relu,
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Zero biases, weights uniform in `±1/sqrt(fan_in)`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector {
            values,
            spec: self.clone(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = LayerShape> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let shape = LayerShape {
                inputs: w[0],
                outputs: w[1],
                offset,
            };
            offset += (w[0] + 1) * w[1];
            shape
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerShape {
    fn bias_offset(&self) -> usize {
        self.offset + self.inputs * self.outputs
    }
}

/// Flat parameter (or gradient) vector tied to the network it instantiates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    spec: NetSpec,
}

impl ParamVector {
    pub fn new(spec: NetSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(ParamVector { values, spec })
    }

    pub fn zeros(spec: &NetSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.param_count()],
            spec: spec.clone(),
        }
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::invalid("parameter vectors belong to different networks"));
        }
        Ok(())
    }
}

/// Paired inputs and targets, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("batch is empty"));
        }
        if inputs.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let input_dim = inputs[0].len();
        let output_dim = targets[0].len();
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("zero-width samples"));
        }
        if inputs.iter().any(|x| x.len() != input_dim) || targets.iter().any(|y| y.len() != output_dim) {
            return Err(Error::invalid("ragged batch"));
        }
        Ok(Batch {
            input_dim,
            output_dim,
            inputs: inputs.concat(),
            targets: targets.concat(),
        })
    }

    /// One-dimensional regression samples.
    pub fn from_scalars(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::invalid("batch is empty"));
        }
        if xs.len() != ys.len() {
            return Err(Error::invalid(format!("{} inputs but {} targets", xs.len(), ys.len())));
        }
        Ok(Batch {
            input_dim: 1,
            output_dim: 1,
            inputs: xs.to_vec(),
            targets: ys.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Row-major inputs.
    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    /// Row-major targets.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.chunks_exact(self.input_dim)
    }

    fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.input_dim != spec.input_dim() || self.output_dim != spec.output_dim() {
            return Err(Error::invalid(format!(
                "batch is {}->{} but the network is {}->{}",
                self.input_dim,
                self.output_dim,
                spec.input_dim(),
                spec.output_dim()
            )));
        }
        Ok(())
    }
}

/// Evaluate the network on each input vector.
pub fn forward(params: &ParamVector, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let spec = params.spec();
    if inputs.is_empty() {
        return Err(Error::invalid("no inputs"));
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != spec.input_dim()) {
        return Err(Error::invalid(format!(
            "input has dimension {}, network expects {}",
            bad.len(),
            spec.input_dim()
        )));
    }
    let flat = inputs.concat();
    let out = forward_flat(params, &flat);
    Ok(out.chunks_exact(spec.output_dim()).map(<[f64]>::to_vec).collect())
}

/// Row-major forward pass; `inputs.len()` must be a multiple of the input width.
pub fn forward_flat(params: &ParamVector, inputs: &[f64]) -> Vec<f64> {
    let spec = params.spec();
    debug_assert_eq!(inputs.len() % spec.input_dim(), 0);
    let n = inputs.len() / spec.input_dim();
    let mut acts = run_forward(spec, params.values(), inputs, n);
    acts.pop().unwrap()
}

/// Mean over samples of the mean squared per-coordinate error.
pub fn mse_loss(params: &ParamVector, batch: &Batch) -> Result<f64> {
    batch.check(params.spec())?;
    let pred = forward_flat(params, batch.inputs());
    Ok(mse(&pred, batch.targets()))
}

/// Squared error averaged over every coordinate of every sample.
pub fn mse(pred: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), targets.len());
    let total: f64 = pred
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let r = p - y;
            r * r
        })
        .sum();
    total / pred.len() as f64
}

/// Gradient of [`mse_loss`] with respect to the parameters.
pub fn grad(params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    loss_and_grad(params, batch).map(|(_, g)| g)
}

pub fn loss_and_grad(params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    batch.check(params.spec())?;
    let (loss, g) = backprop(params.spec(), params.values(), batch);
    Ok((
        loss,
        ParamVector {
            values: g,
            spec: params.spec().clone(),
        },
    ))
}

/// Hessian of the batch loss applied to `direction`.
pub fn hvp(params: &ParamVector, batch: &Batch, direction: &ParamVector) -> Result<ParamVector> {
    batch.check(params.spec())?;
    params.same_shape(direction)?;
    let duals: Vec<Dual> = params
        .values()
        .iter()
        .zip(direction.values())
        .map(|(&re, &eps)| Dual { re, eps })
        .collect();
    let (_, g) = backprop(params.spec(), &duals, batch);
    Ok(ParamVector {
        values: g.into_iter().map(|d| d.eps).collect(),
        spec: params.spec().clone(),
    })
}

/// How the meta-gradient treats the inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Order {
    /// Query gradient at the adapted parameters, inner loop treated as identity.
    First,
    /// Exact derivative through the unrolled inner loop.
    Second,
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Order::First),
            "second" => Ok(Order::Second),
            other => Err(Error::invalid(format!("unknown order `{other}`"))),
        }
    }
}

/// Query loss after adaptation together with its meta-gradient.
#[derive(Debug, Clone)]
pub struct MetaGrad {
    pub query_loss: f64,
    pub grad: ParamVector,
}

/// Gradient of the post-adaptation query loss with respect to the
/// pre-adaptation parameters.
///
/// Adaptation is `steps` full-batch gradient steps of size `inner_lr` on the
/// support loss.
pub fn meta_grad(
    params: &ParamVector,
    support: &Batch,
    query: &Batch,
    steps: usize,
    inner_lr: f64,
    order: Order,
) -> Result<ParamVector> {
    meta_loss_and_grad(params, support, query, steps, inner_lr, order).map(|m| m.grad)
}

pub fn meta_loss_and_grad(
    params: &ParamVector,
    support: &Batch,
    query: &Batch,
    steps: usize,
    inner_lr: f64,
    order: Order,
) -> Result<MetaGrad> {
    if steps == 0 {
        return Err(Error::invalid("meta-gradient needs at least one inner step"));
    }
    if !(inner_lr > 0.0 && inner_lr.is_finite()) {
        return Err(Error::invalid(format!("inner learning rate must be positive, got {inner_lr}")));
    }
    unrolled_meta_grad(params, support, query, steps, inner_lr, order)
}

/// Same as [`meta_loss_and_grad`] without the step-size precondition.
pub(crate) fn unrolled_meta_grad(
    params: &ParamVector,
    support: &Batch,
    query: &Batch,
    steps: usize,
    inner_lr: f64,
    order: Order,
) -> Result<MetaGrad> {
    support.check(params.spec())?;
    query.check(params.spec())?;

    let spec = params.spec();
    // trajectory[s] is the parameter vector before inner step s.
    let mut trajectory: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    trajectory.push(params.values().to_vec());
    for step in 0..steps {
        let current = trajectory.last().unwrap();
        let (_, g) = backprop(spec, current, support);
        let next: Vec<f64> = current.iter().zip(&g).map(|(p, g)| p - inner_lr * g).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                stage: "meta_grad inner loop",
                step,
            });
        }
        trajectory.push(next);
    }

    let (query_loss, mut v) = backprop(spec, trajectory.last().unwrap(), query);
    if !query_loss.is_finite() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericOverflow {
            stage: "meta_grad query gradient",
            step: steps,
        });
    }

    if order == Order::Second {
        // d/dθ_s of θ_{s+1} = I - lr·H_s, symmetric, so walk back applying it to v.
        for step in (0..steps).rev() {
            let duals: Vec<Dual> = trajectory[step]
                .iter()
                .zip(&v)
                .map(|(&re, &eps)| Dual { re, eps })
                .collect();
            let (_, hv) = backprop(spec, &duals, support);
            for (vi, h) in v.iter_mut().zip(&hv) {
                *vi -= inner_lr * h.eps;
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericOverflow {
                    stage: "meta_grad backward through inner loop",
                    step,
                });
            }
        }
    }

    Ok(MetaGrad {
        query_loss,
        grad: ParamVector {
            values: v,
            spec: spec.clone(),
        },
    })
}

/// Number type the forward/backward pass runs on.
pub(crate) trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> + AddAssign
{
    fn constant(v: f64) -> Self;
    fn primal(self) -> f64;
    fn scale(self, k: f64) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn primal(self) -> f64 {
        self
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order forward-mode number: `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub(crate) struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual {
            re: self.re + o.re,
            eps: self.eps + o.eps,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual {
            re: self.re - o.re,
            eps: self.eps - o.eps,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            eps: self.re * o.eps + self.eps * o.re,
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual {
            re: -self.re,
            eps: -self.eps,
        }
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl Scalar for Dual {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual { re: v, eps: 0.0 }
    }
    #[inline]
    fn primal(self) -> f64 {
        self.re
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        Dual {
            re: self.re * k,
            eps: self.eps * k,
        }
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual {
            re: t,
            eps: self.eps * (1.0 - t * t),
        }
    }
}

/// Layer outputs for `n` samples; element 0 is the input itself.
fn run_forward<S: Scalar>(spec: &NetSpec, params: &[S], inputs: &[f64], n: usize) -> Vec<Vec<S>> {
    let layers: Vec<LayerShape> = spec.layers().collect();
    let mut acts: Vec<Vec<S>> = Vec::with_capacity(layers.len() + 1);
    acts.push(inputs.iter().map(|&x| S::constant(x)).collect());
    for (l, layer) in layers.iter().enumerate() {
        let hidden = l + 1 < layers.len();
        let weights = &params[layer.offset..layer.bias_offset()];
        let biases = &params[layer.bias_offset()..layer.bias_offset() + layer.outputs];
        let prev = &acts[l];
        let mut out = Vec::with_capacity(n * layer.outputs);
        for row in prev.chunks_exact(layer.inputs) {
            for (w_row, &b) in weights.chunks_exact(layer.inputs).zip(biases) {
                let mut z = b;
                for (&a, &w) in row.iter().zip(w_row) {
                    z += a * w;
                }
                out.push(if hidden { activate(spec.activation(), z) } else { z });
            }
        }
        acts.push(out);
    }
    acts
}

#[inline]
fn activate<S: Scalar>(act: Activation, z: S) -> S {
    match act {
        Activation::Relu => {
            if z.primal() > 0.0 {
                z
            } else {
                S::constant(0.0)
            }
        }
        Activation::Tanh => z.tanh(),
    }
}

/// Multiply an upstream gradient by the activation derivative, expressed
/// through the post-activation value.
#[inline]
fn activation_backward<S: Scalar>(act: Activation, post: S, upstream: S) -> S {
    match act {
        Activation::Relu => {
            if post.primal() > 0.0 {
                upstream
            } else {
                S::constant(0.0)
            }
        }
        Activation::Tanh => upstream * (S::constant(1.0) - post * post),
    }
}

/// Batch MSE and its gradient with respect to `params`.
fn backprop<S: Scalar>(spec: &NetSpec, params: &[S], batch: &Batch) -> (S, Vec<S>) {
    let n = batch.len();
    let layers: Vec<LayerShape> = spec.layers().collect();
    let acts = run_forward(spec, params, batch.inputs(), n);
    let output = acts.last().unwrap();

    let norm = 1.0 / output.len() as f64;
    let mut loss = S::constant(0.0);
    let mut delta: Vec<S> = Vec::with_capacity(output.len());
    for (&p, &y) in output.iter().zip(batch.targets()) {
        let r = p - S::constant(y);
        loss += r * r;
        delta.push(r.scale(2.0 * norm));
    }
    let loss = loss.scale(norm);

    let mut g = vec![S::constant(0.0); params.len()];
    for (l, layer) in layers.iter().enumerate().rev() {
        let prev = &acts[l];
        let (gw, rest) = g[layer.offset..].split_at_mut(layer.inputs * layer.outputs);
        let gb = &mut rest[..layer.outputs];
        for (d_row, a_row) in delta.chunks_exact(layer.outputs).zip(prev.chunks_exact(layer.inputs)) {
            for ((&d, gw_row), gb_o) in d_row.iter().zip(gw.chunks_exact_mut(layer.inputs)).zip(gb.iter_mut()) {
                *gb_o += d;
                for (gw_ok, &a) in gw_row.iter_mut().zip(a_row) {
                    *gw_ok += d * a;
                }
            }
        }
        if l == 0 {
            break;
        }
        let weights = &params[layer.offset..layer.bias_offset()];
        let mut next = Vec::with_capacity(n * layer.inputs);
        for (d_row, a_row) in delta.chunks_exact(layer.outputs).zip(prev.chunks_exact(layer.inputs)) {
            for (k, &a) in a_row.iter().enumerate() {
                let mut s = S::constant(0.0);
                for (o, &d) in d_row.iter().enumerate() {
                    s += d * weights[o * layer.inputs + k];
                }
                next.push(activation_backward(spec.activation(), a, s));
            }
        }
        delta = next;
    }
    (loss, g)
}
