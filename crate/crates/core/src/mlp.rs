//! Deterministic fully connected softmax classifier with exact gradients
//! and exact Hessian-vector products.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, LabeledInstance};
use crate::objective::Objective;
use crate::rng::RngStream;
use crate::scalar::{Dual, Scalar};

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("input has {got} features, model expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("parameter vector has {got} values, layout needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Selu,
}

impl Activation {
    #[inline(always)]
    pub fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z.re() > 0.0 {
                    z
                } else {
                    S::zero()
                }
            }
            Activation::Selu => {
                if z.re() > 0.0 {
                    z.scale(SELU_LAMBDA)
                } else {
                    (z.exp() - S::from_f64(1.0)).scale(SELU_LAMBDA * SELU_ALPHA)
                }
            }
        }
    }

    #[inline(always)]
    pub fn derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => S::from_f64(if z.re() > 0.0 { 1.0 } else { 0.0 }),
            Activation::Selu => {
                if z.re() > 0.0 {
                    S::from_f64(SELU_LAMBDA)
                } else {
                    z.exp().scale(SELU_LAMBDA * SELU_ALPHA)
                }
            }
        }
    }

    #[inline(always)]
    pub fn second_derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => S::zero(),
            Activation::Selu => {
                if z.re() > 0.0 {
                    S::zero()
                } else {
                    z.exp().scale(SELU_LAMBDA * SELU_ALPHA)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Selu => "selu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_in: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub n_out: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(n_in: usize, hidden_layers: usize, hidden_width: usize, n_out: usize) -> Self {
        Self {
            n_in,
            hidden_layers,
            hidden_width,
            n_out,
            activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.n_in == 0 || self.n_out == 0 {
            return Err(MlpError::InvalidArch("input and output sizes must be positive".into()));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(MlpError::InvalidArch("hidden width must be >= 1 when depth >= 1".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut dims = vec![self.n_in];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(self.n_out);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let l = LayerLayout {
                    n_in: w[0],
                    n_out: w[1],
                    offset,
                };
                offset += l.len();
                l
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(LayerLayout::len).sum()
    }

    /// Width of the representation feeding the final affine layer.
    pub fn last_hidden_dim(&self) -> usize {
        if self.hidden_layers == 0 {
            self.n_in
        } else {
            self.hidden_width
        }
    }
}

/// One affine layer inside the flat parameter array: a row-major
/// `n_out × n_in` weight block followed by `n_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub n_in: usize,
    pub n_out: usize,
    pub offset: usize,
}

impl LayerLayout {
    pub fn len(&self) -> usize {
        self.n_out * (self.n_in + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.n_out * self.n_in
    }

    pub fn biases(&self) -> Range<usize> {
        let w = self.offset + self.n_out * self.n_in;
        w..w + self.n_out
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerLayout>,
}

impl ParameterVector {
    pub fn zeros(layout: Vec<LayerLayout>) -> Self {
        let n = layout.iter().map(LayerLayout::len).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn from_values(values: Vec<f64>, layout: Vec<LayerLayout>) -> Result<Self, MlpError> {
        let n: usize = layout.iter().map(LayerLayout::len).sum();
        if n != values.len() {
            return Err(MlpError::ParamCount {
                expected: n,
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index interval of the final affine layer's weights and biases.
    pub fn last_layer_range(&self) -> Range<usize> {
        self.layout.last().map_or(0..0, LayerLayout::range)
    }

    pub fn last_layer(&self) -> &[f64] {
        &self.values[self.last_layer_range()]
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Reusable buffers for one forward/backward pass.
struct Pass<S> {
    acts: Vec<Vec<S>>,
    pres: Vec<Vec<S>>,
    delta: Vec<S>,
    back: Vec<S>,
}

impl<S: Scalar> Pass<S> {
    fn new(layout: &[LayerLayout]) -> Self {
        let mut acts = vec![vec![S::zero(); layout[0].n_in]];
        acts.extend(layout.iter().map(|l| vec![S::zero(); l.n_out]));
        let widest = layout.iter().map(|l| l.n_out.max(l.n_in)).max().unwrap_or(0);
        Self {
            acts,
            pres: layout.iter().map(|l| vec![S::zero(); l.n_out]).collect(),
            delta: Vec::with_capacity(widest),
            back: Vec::with_capacity(widest),
        }
    }

    /// Fills `acts`; `acts[L]` holds the logits.
    fn forward(&mut self, layout: &[LayerLayout], act: Activation, params: &[S], x: &[f64]) {
        for (a, v) in self.acts[0].iter_mut().zip(x) {
            *a = S::from_f64(*v);
        }
        let last = layout.len() - 1;
        for (l, lay) in layout.iter().enumerate() {
            let (lower, upper) = self.acts.split_at_mut(l + 1);
            let input = &lower[l];
            let out = &mut upper[0];
            let w = &params[lay.weights()];
            let b = &params[lay.biases()];
            for o in 0..lay.n_out {
                let row = &w[o * lay.n_in..(o + 1) * lay.n_in];
                let mut s = b[o];
                for (wi, ai) in row.iter().zip(input.iter()) {
                    s += *wi * *ai;
                }
                self.pres[l][o] = s;
                out[o] = if l == last { s } else { act.apply(s) };
            }
        }
    }

    /// Cross-entropy of the current logits against `label`, backpropagated
    /// with weight `weight` into `grad`.
    fn backward(&mut self, layout: &[LayerLayout], act: Activation, params: &[S], label: usize, weight: f64, grad: &mut [S]) -> S {
        let logits = self.acts.last().expect("non-empty");
        let max = logits.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
        let shift = S::from_f64(max);
        let mut denom = S::zero();
        for z in logits {
            denom += (*z - shift).exp();
        }
        let lse = denom.ln() + shift;
        let loss = lse - logits[label];

        self.delta.clear();
        for (k, z) in logits.iter().enumerate() {
            let p = (*z - lse).exp();
            let y = if k == label { 1.0 } else { 0.0 };
            self.delta.push((p - S::from_f64(y)).scale(weight));
        }
        for l in (0..layout.len()).rev() {
            let lay = layout[l];
            let input = &self.acts[l];
            let gw = &mut grad[lay.weights()];
            for o in 0..lay.n_out {
                let d = self.delta[o];
                let row = &mut gw[o * lay.n_in..(o + 1) * lay.n_in];
                for (g, a) in row.iter_mut().zip(input.iter()) {
                    *g += d * *a;
                }
            }
            for (g, d) in grad[lay.biases()].iter_mut().zip(&self.delta) {
                *g += *d;
            }
            if l == 0 {
                break;
            }
            let w = &params[lay.weights()];
            self.back.clear();
            self.back.resize(lay.n_in, S::zero());
            for o in 0..lay.n_out {
                let d = self.delta[o];
                let row = &w[o * lay.n_in..(o + 1) * lay.n_in];
                for (b, wi) in self.back.iter_mut().zip(row) {
                    *b += d * *wi;
                }
            }
            let pre = &self.pres[l - 1];
            self.delta.clear();
            for (b, z) in self.back.iter().zip(pre) {
                self.delta.push(*b * act.derivative(*z));
            }
        }
        loss
    }
}

/// Mean cross-entropy over the selected instances plus `(l2/2)‖θ‖²`;
/// writes the gradient into `grad`.
fn loss_grad_generic<S: Scalar>(
    layout: &[LayerLayout],
    act: Activation,
    params: &[S],
    data: &[LabeledInstance],
    subset: Option<&[usize]>,
    l2: f64,
    grad: &mut [S],
) -> S {
    grad.iter_mut().for_each(|g| *g = S::zero());
    let mut pass = Pass::new(layout);
    let n = subset.map_or(data.len(), <[usize]>::len);
    let w = 1.0 / n as f64;
    let mut total = S::zero();
    let mut visit = |z: &LabeledInstance| {
        pass.forward(layout, act, params, &z.features);
        total += pass.backward(layout, act, params, z.label, w, grad);
    };
    match subset {
        Some(idx) => idx.iter().for_each(|&i| visit(&data[i])),
        None => data.iter().for_each(&mut visit),
    }
    let mut loss = total.scale(w);
    if l2 > 0.0 {
        let mut sq = S::zero();
        for (g, p) in grad.iter_mut().zip(params) {
            *g += p.scale(l2);
            sq += *p * *p;
        }
        loss += sq.scale(0.5 * l2);
    }
    loss
}

/// Stable `log Σ exp(z_k) − z_label`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln() + m;
    lse - logits[label]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub arch: ArchSpec,
    pub params: ParameterVector,
}

impl MlpModel {
    /// Fan-in scaled normal weights (`std = √(2/fan_in)`), zero biases.
    pub fn build(arch: ArchSpec, stream: &mut RngStream) -> Result<Self, MlpError> {
        arch.validate()?;
        let mut params = ParameterVector::zeros(arch.layout());
        for lay in params.layout.clone() {
            let std = (2.0 / lay.n_in as f64).sqrt();
            let draws = stream.normal(lay.n_out * lay.n_in);
            for (p, e) in params.values[lay.weights()].iter_mut().zip(draws) {
                *p = std * e;
            }
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: ArchSpec, values: Vec<f64>) -> Result<Self, MlpError> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: ParameterVector::from_values(values, arch.layout())?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn last_layer_range(&self) -> Range<usize> {
        self.params.last_layer_range()
    }

    fn check_input(&self, x: &[f64]) -> Result<(), MlpError> {
        if x.len() != self.arch.n_in {
            return Err(MlpError::Shape {
                expected: self.arch.n_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        self.check_input(x)?;
        let layout = &self.params.layout;
        let mut pass = Pass::<f64>::new(layout);
        pass.forward(layout, self.arch.activation, &self.params.values, x);
        Ok(pass.acts.pop().expect("non-empty"))
    }

    /// Activations feeding the final affine layer (the input itself for a
    /// depth-0 model).
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>, MlpError> {
        self.check_input(x)?;
        let layout = &self.params.layout;
        let mut pass = Pass::<f64>::new(layout);
        pass.forward(layout, self.arch.activation, &self.params.values, x);
        Ok(pass.acts.swap_remove(layout.len() - 1))
    }

    /// Unregularized cross-entropy of a single instance.
    pub fn instance_loss(&self, z: &LabeledInstance) -> f64 {
        let logits = self.forward(&z.features).expect("instance matches architecture");
        cross_entropy(&logits, z.label)
    }

    /// Mean softmax cross-entropy over `batch` plus `(l2/2)‖θ‖²`.
    pub fn loss(&self, batch: &[LabeledInstance], l2: f64) -> f64 {
        assert!(!batch.is_empty(), "loss of an empty batch");
        let mean = batch.iter().map(|z| self.instance_loss(z)).sum::<f64>() / batch.len() as f64;
        mean + 0.5 * l2 * self.params.norm_sq()
    }

    pub fn grad(&self, batch: &[LabeledInstance], l2: f64) -> ParameterVector {
        assert!(!batch.is_empty(), "gradient of an empty batch");
        let mut g = ParameterVector::zeros(self.params.layout.clone());
        loss_grad_generic(
            &self.params.layout,
            self.arch.activation,
            &self.params.values,
            batch,
            None,
            l2,
            &mut g.values,
        );
        g
    }

    /// Gradient of `L(z, θ) + (l2/2)‖θ‖²` restricted to the final layer.
    pub fn last_layer_grad(&self, z: &LabeledInstance, l2: f64) -> Vec<f64> {
        let g = self.grad(std::slice::from_ref(z), l2);
        g.values[self.last_layer_range()].to_vec()
    }

    /// Exact `∇²[mean loss + (l2/2)‖θ‖²] v` via forward-over-reverse.
    pub fn hvp(&self, batch: &[LabeledInstance], l2: f64, v: &[f64]) -> Vec<f64> {
        mlp_hvp(&self.params.layout, self.arch.activation, &self.params.values, batch, None, l2, v)
    }

    pub fn per_instance_losses(&self, ds: &Dataset) -> Vec<f64> {
        ds.instances.iter().map(|z| self.instance_loss(z)).collect()
    }

    /// Index of the instance with the largest unregularized loss; ties go to
    /// the lowest index.
    pub fn max_loss_instance(&self, ds: &Dataset) -> usize {
        argmax_first(&self.per_instance_losses(ds))
    }
}

/// First index of the maximum.
pub fn argmax_first(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn mlp_hvp(
    layout: &[LayerLayout],
    act: Activation,
    theta: &[f64],
    data: &[LabeledInstance],
    subset: Option<&[usize]>,
    l2: f64,
    v: &[f64],
) -> Vec<f64> {
    let seeded: Vec<Dual> = theta.iter().zip(v).map(|(t, d)| Dual::new(*t, *d)).collect();
    let mut g = vec![Dual::default(); theta.len()];
    loss_grad_generic(layout, act, &seeded, data, subset, l2, &mut g);
    g.into_iter().map(|d| d.eps).collect()
}

/// Full-parameter training objective of an MLP: mean cross-entropy over the
/// training instances plus `(l2/2)‖θ‖²`.
#[derive(Debug, Clone, Copy)]
pub struct MlpObjective<'a> {
    arch: ArchSpec,
    layout_len: usize,
    data: &'a [LabeledInstance],
    l2: f64,
    layout: &'a [LayerLayout],
}

impl<'a> MlpObjective<'a> {
    pub fn new(model: &'a MlpModel, data: &'a [LabeledInstance], l2: f64) -> Self {
        Self {
            arch: model.arch,
            layout_len: model.num_params(),
            data,
            l2,
            layout: &model.params.layout,
        }
    }
}

impl Objective for MlpObjective<'_> {
    fn dim(&self) -> usize {
        self.layout_len
    }

    fn n_train(&self) -> usize {
        self.data.len()
    }

    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        loss_grad_generic(self.layout, self.arch.activation, theta, self.data, subset, self.l2, grad)
    }

    fn hvp(&self, theta: &[f64], v: &[f64], subset: Option<&[usize]>) -> Option<Vec<f64>> {
        Some(mlp_hvp(self.layout, self.arch.activation, theta, self.data, subset, self.l2, v))
    }

    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        loss_grad_generic(self.layout, self.arch.activation, theta, std::slice::from_ref(z), None, 0.0, grad)
    }

    fn instance(&self, i: usize) -> &LabeledInstance {
        &self.data[i]
    }

    fn instance_hvp(&self, theta: &[f64], z: &LabeledInstance, v: &[f64]) -> Option<Vec<f64>> {
        Some(mlp_hvp(self.layout, self.arch.activation, theta, std::slice::from_ref(z), None, 0.0, v))
    }
}

/// The final affine layer of a frozen MLP as a softmax-regression problem
/// over cached penultimate features.
///
/// Parameters are ordered exactly like `last_layer_range` of the source
/// model (row-major weights, then biases), and the loss includes the
/// constant penalty of the frozen coordinates, so head and full objectives
/// agree in value, gradient and Hessian on the last-layer block.
#[derive(Debug, Clone)]
pub struct SoftmaxHead {
    model: MlpModel,
    instances: Vec<LabeledInstance>,
    features: Vec<f64>,
    m: usize,
    k: usize,
    l2: f64,
    frozen_penalty: f64,
}

impl SoftmaxHead {
    pub fn new(model: &MlpModel, data: &[LabeledInstance], l2: f64) -> Self {
        let m = model.arch.last_hidden_dim();
        let mut features = Vec::with_capacity(data.len() * m);
        for z in data {
            features.extend(model.features(&z.features).expect("instance matches architecture"));
        }
        let r = model.last_layer_range();
        let frozen_sq: f64 = model
            .params
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| !r.contains(i))
            .map(|(_, v)| v * v)
            .sum();
        Self {
            model: model.clone(),
            instances: data.to_vec(),
            features,
            m,
            k: model.arch.n_out,
            l2,
            frozen_penalty: 0.5 * l2 * frozen_sq,
        }
    }

    /// Current last-layer parameters of the source model.
    pub fn initial_params(&self) -> Vec<f64> {
        self.model.params.last_layer().to_vec()
    }

    /// Source model with its last layer replaced by `theta`.
    pub fn model_with(&self, theta: &[f64]) -> MlpModel {
        let mut m = self.model.clone();
        let r = m.last_layer_range();
        m.params.values[r].copy_from_slice(theta);
        m
    }

    fn logits(&self, theta: &[f64], h: &[f64]) -> Vec<f64> {
        let (w, b) = theta.split_at(self.k * self.m);
        (0..self.k)
            .map(|c| b[c] + crate::linalg::dot(&w[c * self.m..(c + 1) * self.m], h))
            .collect()
    }

    /// Adds `weight · ∇L` for one feature row; returns the loss.
    fn accumulate(&self, theta: &[f64], h: &[f64], label: usize, weight: f64, grad: &mut [f64]) -> f64 {
        let logits = self.logits(theta, h);
        let loss = cross_entropy(&logits, label);
        let p = softmax(&logits);
        let (gw, gb) = grad.split_at_mut(self.k * self.m);
        for c in 0..self.k {
            let d = weight * (p[c] - if c == label { 1.0 } else { 0.0 });
            gb[c] += d;
            crate::linalg::axpy(d, h, &mut gw[c * self.m..(c + 1) * self.m]);
        }
        loss
    }

    /// Adds `weight · ∇²L v` for one feature row.
    fn accumulate_hvp(&self, theta: &[f64], h: &[f64], v: &[f64], weight: f64, out: &mut [f64]) {
        let p = softmax(&self.logits(theta, h));
        let u = self.logits(v, h);
        let pu = crate::linalg::dot(&p, &u);
        let (ow, ob) = out.split_at_mut(self.k * self.m);
        for c in 0..self.k {
            let s = weight * p[c] * (u[c] - pu);
            ob[c] += s;
            crate::linalg::axpy(s, h, &mut ow[c * self.m..(c + 1) * self.m]);
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.m..(i + 1) * self.m]
    }

    fn instance_features(&self, z: &LabeledInstance) -> Vec<f64> {
        self.model.features(&z.features).expect("instance matches architecture")
    }

    fn for_each_index(&self, subset: Option<&[usize]>, mut f: impl FnMut(usize)) -> usize {
        match subset {
            Some(idx) => {
                idx.iter().for_each(|&i| f(i));
                idx.len()
            }
            None => {
                (0..self.instances.len()).for_each(f);
                self.instances.len()
            }
        }
    }
}

impl Objective for SoftmaxHead {
    fn dim(&self) -> usize {
        self.k * (self.m + 1)
    }

    fn n_train(&self) -> usize {
        self.instances.len()
    }

    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = subset.map_or(self.instances.len(), <[usize]>::len) as f64;
        let mut total = 0.0;
        self.for_each_index(subset, |i| {
            total += self.accumulate(theta, self.row(i), self.instances[i].label, 1.0 / n, grad);
        });
        let mut sq = 0.0;
        for (g, t) in grad.iter_mut().zip(theta) {
            *g += self.l2 * t;
            sq += t * t;
        }
        total / n + 0.5 * self.l2 * sq + self.frozen_penalty
    }

    fn hvp(&self, theta: &[f64], v: &[f64], subset: Option<&[usize]>) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        let n = subset.map_or(self.instances.len(), <[usize]>::len) as f64;
        self.for_each_index(subset, |i| self.accumulate_hvp(theta, self.row(i), v, 1.0 / n, &mut out));
        crate::linalg::axpy(self.l2, v, &mut out);
        Some(out)
    }

    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let h = self.instance_features(z);
        self.accumulate(theta, &h, z.label, 1.0, grad)
    }

    fn instance(&self, i: usize) -> &LabeledInstance {
        &self.instances[i]
    }

    fn train_instance_loss_grad(&self, theta: &[f64], i: usize, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.accumulate(theta, self.row(i), self.instances[i].label, 1.0, grad)
    }

    fn instance_hvp(&self, theta: &[f64], z: &LabeledInstance, v: &[f64]) -> Option<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        let h = self.instance_features(z);
        self.accumulate_hvp(theta, &h, v, 1.0, &mut out);
        Some(out)
    }
}
