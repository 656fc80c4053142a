//! Variational dense network with closed-form moment propagation.
//!
//! Every weight and bias carries an independent Gaussian posterior
//! `N(μ, exp(logvar))`. Means and variances are pushed through the network
//! analytically (no sampling, no covariances), activations are linearized to
//! first order, and the softmax variance uses the diagonal Jacobian. The
//! training loss is the Gaussian negative log-likelihood of the one-hot label
//! under the output moments plus a weighted KL divergence to a standard
//! normal prior.

use std::ops::Range;

use thiserror::Error;

use crate::data::LabeledInstance;
use crate::linalg::DenseMatrix;
use crate::mlp::{Activation, ArchSpec, LayerLayout, MlpError, MlpModel, ParameterVector};
use crate::objective::Objective;
use crate::rng::RngStream;
use crate::scalar::{Dual, Scalar};

/// Lower clamp on output variances before they enter a log or a division.
pub const VARIANCE_FLOOR: f64 = 1e-8;

pub const DEFAULT_INIT_LOGVAR: f64 = -6.0;

#[derive(Debug, Error, PartialEq)]
pub enum BnnError {
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("kl_weight must be positive and finite, got {0}")]
    KlWeight(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPair {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Owned view of one layer's variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub weight_mean: DenseMatrix,
    pub weight_logvar: DenseMatrix,
    pub bias_mean: Vec<f64>,
    pub bias_logvar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnnModel {
    pub arch: ArchSpec,
    /// Posterior means in the MLP parameter layout.
    pub means: ParameterVector,
    /// Posterior log-variances, same layout as `means`.
    pub logvars: Vec<f64>,
    pub kl_weight: f64,
}

impl BnnModel {
    /// Means initialized exactly like [`MlpModel::build`], every log-variance
    /// set to `init_logvar`, `kl_weight = 1`.
    pub fn build(arch: ArchSpec, init_logvar: f64, stream: &mut RngStream) -> Result<Self, BnnError> {
        let mean_net = MlpModel::build(arch, stream)?;
        let n = mean_net.num_params();
        Ok(Self {
            arch,
            means: mean_net.params,
            logvars: vec![init_logvar; n],
            kl_weight: 1.0,
        })
    }

    pub fn from_parts(arch: ArchSpec, means: Vec<f64>, logvars: Vec<f64>, kl_weight: f64) -> Result<Self, BnnError> {
        arch.validate()?;
        let means = ParameterVector::from_values(means, arch.layout())?;
        if logvars.len() != means.len() {
            return Err(MlpError::ParamCount {
                expected: means.len(),
                got: logvars.len(),
            }
            .into());
        }
        let mut m = Self {
            arch,
            means,
            logvars,
            kl_weight: 1.0,
        };
        m.set_kl_weight(kl_weight)?;
        Ok(m)
    }

    pub fn set_kl_weight(&mut self, w: f64) -> Result<(), BnnError> {
        if !(w.is_finite() && w > 0.0) {
            return Err(BnnError::KlWeight(w));
        }
        self.kl_weight = w;
        Ok(())
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.means.layout
    }

    /// Number of trainable values: means plus log-variances.
    pub fn num_params(&self) -> usize {
        2 * self.means.len()
    }

    /// `[means; logvars]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.means.values.clone();
        v.extend_from_slice(&self.logvars);
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) {
        let p = self.means.len();
        assert_eq!(theta.len(), 2 * p, "flat parameter length");
        self.means.values.copy_from_slice(&theta[..p]);
        self.logvars.copy_from_slice(&theta[p..]);
    }

    /// Last-layer means inside [`BnnModel::flat`].
    pub fn last_layer_mean_range(&self) -> Range<usize> {
        self.means.last_layer_range()
    }

    /// Last-layer log-variances inside [`BnnModel::flat`].
    pub fn last_layer_logvar_range(&self) -> Range<usize> {
        let r = self.means.last_layer_range();
        let p = self.means.len();
        r.start + p..r.end + p
    }

    pub fn layers(&self) -> Vec<VariationalLayer> {
        self.layout()
            .iter()
            .map(|lay| VariationalLayer {
                weight_mean: DenseMatrix::new(lay.n_out, lay.n_in, self.means.values[lay.weights()].to_vec())
                    .expect("layout shape"),
                weight_logvar: DenseMatrix::new(lay.n_out, lay.n_in, self.logvars[lay.weights()].to_vec())
                    .expect("layout shape"),
                bias_mean: self.means.values[lay.biases()].to_vec(),
                bias_logvar: self.logvars[lay.biases()].to_vec(),
            })
            .collect()
    }

    /// Deterministic network carrying the posterior means.
    pub fn mean_network(&self) -> MlpModel {
        MlpModel {
            arch: self.arch,
            params: self.means.clone(),
        }
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

    /// Moments of every pre-activation and activation for input `x`.
    pub fn trace(&self, x: &[f64]) -> Result<MomentTrace, MlpError> {
        self.check_input(x)?;
        let vars: Vec<f64> = self.logvars.iter().map(|v| v.exp()).collect();
        let mut pass = MomentPass::new(self.layout());
        pass.forward(self.layout(), self.arch.activation, &self.means.values, &vars, x);
        Ok(MomentTrace {
            inputs: pass.in_mu.into_iter().zip(pass.in_var).map(|(m, v)| MomentPair { mean: m, variance: v }).collect(),
            pre_activations: pass.z_mu.into_iter().zip(pass.z_var).map(|(m, v)| MomentPair { mean: m, variance: v }).collect(),
        })
    }

    /// Moments `(μ_ỹ, σ²_ỹ)` of the logits.
    pub fn pre_softmax_moments(&self, x: &[f64]) -> Result<MomentPair, MlpError> {
        Ok(self.trace(x)?.pre_activations.pop().expect("at least one layer"))
    }

    /// Output moments `(μ_ŷ, σ²_ŷ)` after the softmax.
    pub fn propagate_moments(&self, x: &[f64]) -> Result<MomentPair, MlpError> {
        let z = self.pre_softmax_moments(x)?;
        Ok(softmax_moments(&z))
    }

    /// Moments entering the final affine layer.
    pub fn last_hidden_moments(&self, x: &[f64]) -> Result<MomentPair, MlpError> {
        Ok(self.trace(x)?.inputs.pop().expect("at least one layer"))
    }

    /// Gaussian negative log-likelihood of the one-hot label of `z`.
    pub fn nll(&self, z: &LabeledInstance) -> f64 {
        let mut g = vec![0.0; self.num_params()];
        self.instance_nll_grad(z, &mut g)
    }

    /// `½ Σ (σ² + μ² − 1 − log σ²)` over every parameter.
    pub fn kl(&self) -> f64 {
        self.means
            .values
            .iter()
            .zip(&self.logvars)
            .map(|(m, lv)| kl_term(*m, *lv))
            .sum()
    }

    /// Mean NLL over `batch` plus `kl_weight · KL`.
    pub fn elbo_loss(&self, batch: &[LabeledInstance]) -> f64 {
        assert!(!batch.is_empty(), "loss of an empty batch");
        let mut g = vec![0.0; self.num_params()];
        self.elbo_grad_into(batch, &mut g)
    }

    /// Gradient of [`BnnModel::elbo_loss`] over `[means; logvars]`.
    pub fn bnn_grad(&self, batch: &[LabeledInstance]) -> Vec<f64> {
        assert!(!batch.is_empty(), "gradient of an empty batch");
        let mut g = vec![0.0; self.num_params()];
        self.elbo_grad_into(batch, &mut g);
        g
    }

    fn elbo_grad_into(&self, batch: &[LabeledInstance], grad: &mut [f64]) -> f64 {
        elbo_grad_generic(
            self.layout(),
            self.arch.activation,
            &self.flat(),
            batch,
            None,
            self.kl_weight,
            grad,
        )
    }

    fn instance_nll_grad(&self, z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        elbo_grad_generic(
            self.layout(),
            self.arch.activation,
            &self.flat(),
            std::slice::from_ref(z),
            None,
            0.0,
            grad,
        )
    }

    /// NLL gradient of `z` with respect to the final layer's weight and bias
    /// means (variances held fixed, KL excluded).
    pub fn bnn_last_layer_grad(&self, z: &LabeledInstance) -> Vec<f64> {
        let mut g = vec![0.0; self.num_params()];
        self.instance_nll_grad(z, &mut g);
        g[self.last_layer_mean_range()].to_vec()
    }
}

/// Per-layer moments recorded during one propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTrace {
    /// Moments entering each affine layer (the input itself, with zero
    /// variance, for the first layer).
    pub inputs: Vec<MomentPair>,
    /// Moments leaving each affine layer, before the nonlinearity.
    pub pre_activations: Vec<MomentPair>,
}

/// `μ_ŷ = softmax(μ_ỹ)`, `σ²_ŷ = (μ_ŷ(1 − μ_ŷ))² σ²_ỹ`.
pub fn softmax_moments(z: &MomentPair) -> MomentPair {
    let mean = crate::mlp::softmax(&z.mean);
    let variance = mean
        .iter()
        .zip(&z.variance)
        .map(|(p, v)| (p * (1.0 - p)).powi(2) * v)
        .collect();
    MomentPair { mean, variance }
}

fn kl_term(mean: f64, logvar: f64) -> f64 {
    0.5 * (logvar.exp() + mean * mean - 1.0 - logvar)
}

/// Affine layer on independent Gaussian inputs and weights:
/// `μ = Wμ_a + b`, `σ² = Σ (σ²_w σ²_a + μ_w² σ²_a + μ_a² σ²_w) + σ²_b`.
/// With `σ²_a = 0` this reduces to the deterministic-input case.
#[allow(clippy::too_many_arguments)]
fn affine_forward<S: Scalar>(
    lay: &LayerLayout,
    means: &[S],
    vars: &[S],
    in_mu: &[S],
    in_var: &[S],
    out_mu: &mut [S],
    out_var: &mut [S],
) {
    let (wr, br) = (lay.weights(), lay.biases());
    let (wm, wv) = (&means[wr.clone()], &vars[wr]);
    let (bm, bv) = (&means[br.clone()], &vars[br]);
    for o in 0..lay.n_out {
        let row = o * lay.n_in..(o + 1) * lay.n_in;
        let mut mu = bm[o];
        let mut var = bv[o];
        for ((m, v), (am, av)) in wm[row.clone()].iter().zip(&wv[row]).zip(in_mu.iter().zip(in_var)) {
            mu += *m * *am;
            var += *v * *av + *m * *m * *av + *am * *am * *v;
        }
        out_mu[o] = mu;
        out_var[o] = var;
    }
}

/// Reverse of [`affine_forward`]. Accumulates into the mean-gradient and
/// variance-gradient arrays and, when requested, writes input gradients.
#[allow(clippy::too_many_arguments)]
fn affine_backward<S: Scalar>(
    lay: &LayerLayout,
    means: &[S],
    vars: &[S],
    in_mu: &[S],
    in_var: &[S],
    g_mu: &[S],
    g_var: &[S],
    gm: &mut [S],
    gv: &mut [S],
    g_in: Option<(&mut [S], &mut [S])>,
) {
    let (wr, br) = (lay.weights(), lay.biases());
    let wm = &means[wr.clone()];
    let wv = &vars[wr.clone()];
    {
        let gwm = &mut gm[wr.clone()];
        let gwv = &mut gv[wr];
        for o in 0..lay.n_out {
            let (dm, dv) = (g_mu[o], g_var[o]);
            let base = o * lay.n_in;
            for i in 0..lay.n_in {
                let k = base + i;
                gwm[k] += dm * in_mu[i] + (dv * wm[k] * in_var[i]).scale(2.0);
                gwv[k] += dv * (in_var[i] + in_mu[i] * in_mu[i]);
            }
        }
    }
    for o in 0..lay.n_out {
        gm[br.start + o] += g_mu[o];
        gv[br.start + o] += g_var[o];
    }
    if let Some((gi_mu, gi_var)) = g_in {
        gi_mu.iter_mut().for_each(|g| *g = S::zero());
        gi_var.iter_mut().for_each(|g| *g = S::zero());
        for o in 0..lay.n_out {
            let (dm, dv) = (g_mu[o], g_var[o]);
            let base = o * lay.n_in;
            for i in 0..lay.n_in {
                let k = base + i;
                gi_mu[i] += dm * wm[k] + (dv * in_mu[i] * wv[k]).scale(2.0);
                gi_var[i] += dv * (wv[k] + wm[k] * wm[k]);
            }
        }
    }
}

/// Gaussian NLL of the one-hot `label` under softmax output moments built
/// from logit moments `(z_mu, z_var)`. Writes `weight ·` the logit-moment
/// gradients into `g_mu`, `g_var`.
fn output_nll<S: Scalar>(z_mu: &[S], z_var: &[S], label: usize, weight: f64, g_mu: &mut [S], g_var: &mut [S]) -> S {
    let k = z_mu.len();
    let max = z_mu.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let shift = S::from_f64(max);
    let e: Vec<S> = z_mu.iter().map(|z| (*z - shift).exp()).collect();
    let mut denom = S::zero();
    for v in &e {
        denom += *v;
    }
    let one = S::from_f64(1.0);
    let mut loss = S::zero();
    let mut gp = vec![S::zero(); k];
    let p: Vec<S> = e.into_iter().map(|v| v / denom).collect();
    for c in 0..k {
        let q = p[c] * (one - p[c]);
        let sy = q * q * z_var[c];
        let clamped = sy.re() < VARIANCE_FLOOR;
        let s = if clamped { S::from_f64(VARIANCE_FLOOR) } else { sy };
        let r = S::from_f64(if c == label { 1.0 } else { 0.0 }) - p[c];
        loss += (s.ln() + r * r / s).scale(0.5);
        gp[c] = -r / s;
        if clamped {
            g_var[c] = S::zero();
        } else {
            let gs = (one / s - r * r / (s * s)).scale(0.5);
            g_var[c] = (gs * q * q).scale(weight);
            gp[c] += (gs * z_var[c] * q * (one - p[c].scale(2.0))).scale(2.0);
        }
    }
    let mut pg = S::zero();
    for c in 0..k {
        pg += p[c] * gp[c];
    }
    for c in 0..k {
        g_mu[c] = (p[c] * (gp[c] - pg)).scale(weight);
    }
    loss
}

struct MomentPass<S> {
    in_mu: Vec<Vec<S>>,
    in_var: Vec<Vec<S>>,
    z_mu: Vec<Vec<S>>,
    z_var: Vec<Vec<S>>,
    g_mu: Vec<S>,
    g_var: Vec<S>,
    gi_mu: Vec<S>,
    gi_var: Vec<S>,
}

impl<S: Scalar> MomentPass<S> {
    fn new(layout: &[LayerLayout]) -> Self {
        let widest = layout.iter().map(|l| l.n_out.max(l.n_in)).max().unwrap_or(0);
        Self {
            in_mu: layout.iter().map(|l| vec![S::zero(); l.n_in]).collect(),
            in_var: layout.iter().map(|l| vec![S::zero(); l.n_in]).collect(),
            z_mu: layout.iter().map(|l| vec![S::zero(); l.n_out]).collect(),
            z_var: layout.iter().map(|l| vec![S::zero(); l.n_out]).collect(),
            g_mu: vec![S::zero(); widest],
            g_var: vec![S::zero(); widest],
            gi_mu: vec![S::zero(); widest],
            gi_var: vec![S::zero(); widest],
        }
    }

    fn forward(&mut self, layout: &[LayerLayout], act: Activation, means: &[S], vars: &[S], x: &[f64]) {
        for (m, v) in self.in_mu[0].iter_mut().zip(x) {
            *m = S::from_f64(*v);
        }
        self.in_var[0].iter_mut().for_each(|v| *v = S::zero());
        for (l, lay) in layout.iter().enumerate() {
            affine_forward(
                lay,
                means,
                vars,
                &self.in_mu[l],
                &self.in_var[l],
                &mut self.z_mu[l],
                &mut self.z_var[l],
            );
            if l + 1 < layout.len() {
                for i in 0..lay.n_out {
                    let z = self.z_mu[l][i];
                    let d = act.derivative(z);
                    self.in_mu[l + 1][i] = act.apply(z);
                    self.in_var[l + 1][i] = self.z_var[l][i] * d * d;
                }
            }
        }
    }

    /// Loss of `label` for the last forward pass; accumulates `weight ·` the
    /// gradient into the mean and variance gradient arrays.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &mut self,
        layout: &[LayerLayout],
        act: Activation,
        means: &[S],
        vars: &[S],
        label: usize,
        weight: f64,
        gm: &mut [S],
        gv: &mut [S],
    ) -> S {
        let last = layout.len() - 1;
        let k = layout[last].n_out;
        let loss = output_nll(
            &self.z_mu[last],
            &self.z_var[last],
            label,
            weight,
            &mut self.g_mu[..k],
            &mut self.g_var[..k],
        );
        for l in (0..layout.len()).rev() {
            let lay = &layout[l];
            let n_in = lay.n_in;
            let g_in = if l > 0 {
                Some((&mut self.gi_mu[..n_in], &mut self.gi_var[..n_in]))
            } else {
                None
            };
            affine_backward(
                lay,
                means,
                vars,
                &self.in_mu[l],
                &self.in_var[l],
                &self.g_mu[..lay.n_out],
                &self.g_var[..lay.n_out],
                gm,
                gv,
                g_in,
            );
            if l == 0 {
                break;
            }
            // through a = f(z), σ²_a = σ²_z f'(z)²
            for i in 0..n_in {
                let z = self.z_mu[l - 1][i];
                let zv = self.z_var[l - 1][i];
                let d1 = act.derivative(z);
                let d2 = act.second_derivative(z);
                self.g_mu[i] = self.gi_mu[i] * d1 + (self.gi_var[i] * zv * d1 * d2).scale(2.0);
                self.g_var[i] = self.gi_var[i] * d1 * d1;
            }
        }
        loss
    }
}

/// Mean NLL over the selected instances plus `kl_weight · KL` for
/// `theta = [means; logvars]`; writes the gradient into `grad`.
fn elbo_grad_generic<S: Scalar>(
    layout: &[LayerLayout],
    act: Activation,
    theta: &[S],
    data: &[LabeledInstance],
    subset: Option<&[usize]>,
    kl_weight: f64,
    grad: &mut [S],
) -> S {
    let p = theta.len() / 2;
    let (means, logvars) = theta.split_at(p);
    let vars: Vec<S> = logvars.iter().map(|v| v.exp()).collect();
    let (gm, glv) = grad.split_at_mut(p);
    gm.iter_mut().for_each(|g| *g = S::zero());
    let mut gv = vec![S::zero(); p];
    let mut pass = MomentPass::new(layout);
    let n = subset.map_or(data.len(), <[usize]>::len);
    let w = 1.0 / n as f64;
    let mut total = S::zero();
    let mut visit = |z: &LabeledInstance| {
        pass.forward(layout, act, means, &vars, &z.features);
        total += pass.backward(layout, act, means, &vars, z.label, w, gm, &mut gv);
    };
    match subset {
        Some(idx) => idx.iter().for_each(|&i| visit(&data[i])),
        None => data.iter().for_each(&mut visit),
    }
    let mut loss = total.scale(w);
    for i in 0..p {
        glv[i] = gv[i] * vars[i];
    }
    if kl_weight > 0.0 {
        let one = S::from_f64(1.0);
        let mut kl = S::zero();
        for i in 0..p {
            kl += (vars[i] + means[i] * means[i] - one - logvars[i]).scale(0.5);
            gm[i] += means[i].scale(kl_weight);
            glv[i] += (vars[i] - one).scale(0.5 * kl_weight);
        }
        loss += kl.scale(kl_weight);
    }
    loss
}

fn dual_seed(theta: &[f64], v: &[f64]) -> Vec<Dual> {
    theta.iter().zip(v).map(|(t, d)| Dual::new(*t, *d)).collect()
}

/// Full variational objective over `[means; logvars]`.
#[derive(Debug, Clone, Copy)]
pub struct BnnObjective<'a> {
    model: &'a BnnModel,
    data: &'a [LabeledInstance],
}

impl<'a> BnnObjective<'a> {
    pub fn new(model: &'a BnnModel, data: &'a [LabeledInstance]) -> Self {
        Self { model, data }
    }
}

impl Objective for BnnObjective<'_> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn n_train(&self) -> usize {
        self.data.len()
    }

    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        let m = self.model;
        elbo_grad_generic(m.layout(), m.arch.activation, theta, self.data, subset, m.kl_weight, grad)
    }

    fn hvp(&self, theta: &[f64], v: &[f64], subset: Option<&[usize]>) -> Option<Vec<f64>> {
        let m = self.model;
        let mut g = vec![Dual::default(); theta.len()];
        elbo_grad_generic(m.layout(), m.arch.activation, &dual_seed(theta, v), self.data, subset, m.kl_weight, &mut g);
        Some(g.into_iter().map(|d| d.eps).collect())
    }

    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        let m = self.model;
        elbo_grad_generic(m.layout(), m.arch.activation, theta, std::slice::from_ref(z), None, 0.0, grad)
    }

    fn instance(&self, i: usize) -> &LabeledInstance {
        &self.data[i]
    }

    fn instance_hvp(&self, theta: &[f64], z: &LabeledInstance, v: &[f64]) -> Option<Vec<f64>> {
        let m = self.model;
        let mut g = vec![Dual::default(); theta.len()];
        elbo_grad_generic(m.layout(), m.arch.activation, &dual_seed(theta, v), std::slice::from_ref(z), None, 0.0, &mut g);
        Some(g.into_iter().map(|d| d.eps).collect())
    }
}

/// Which last-layer variational parameters a [`BnnHead`] optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadScope {
    /// Weight and bias means; log-variances frozen.
    Means,
    /// Means followed by log-variances.
    MeansAndLogvars,
}

/// The final variational layer of a frozen BNN over cached moments of the
/// last hidden layer.
///
/// The objective is mean NLL plus `kl_weight · KL` over every parameter, the
/// frozen ones contributing a constant, so its value equals the full ELBO.
/// Instance losses are NLL only.
#[derive(Debug, Clone)]
pub struct BnnHead {
    model: BnnModel,
    scope: HeadScope,
    instances: Vec<LabeledInstance>,
    feat_mu: Vec<f64>,
    feat_var: Vec<f64>,
    layer: LayerLayout,
    frozen_kl: f64,
}

impl BnnHead {
    pub fn new(model: &BnnModel, data: &[LabeledInstance], scope: HeadScope) -> Self {
        let last = *model.layout().last().expect("at least one layer");
        let layer = LayerLayout { offset: 0, ..last };
        let mut feat_mu = Vec::with_capacity(data.len() * layer.n_in);
        let mut feat_var = Vec::with_capacity(data.len() * layer.n_in);
        for z in data {
            let h = model.last_hidden_moments(&z.features).expect("instance matches architecture");
            feat_mu.extend(h.mean);
            feat_var.extend(h.variance);
        }
        let r = model.last_layer_mean_range();
        let frozen_kl = model
            .means
            .values
            .iter()
            .zip(&model.logvars)
            .enumerate()
            .filter(|(i, _)| !r.contains(i))
            .map(|(_, (m, lv))| kl_term(*m, *lv))
            .sum();
        Self {
            model: model.clone(),
            scope,
            instances: data.to_vec(),
            feat_mu,
            feat_var,
            layer,
            frozen_kl,
        }
    }

    pub fn scope(&self) -> HeadScope {
        self.scope
    }

    pub fn initial_params(&self) -> Vec<f64> {
        let m = &self.model;
        let mut v = m.means.values[m.last_layer_mean_range()].to_vec();
        if self.scope == HeadScope::MeansAndLogvars {
            v.extend_from_slice(&m.logvars[m.means.last_layer_range()]);
        }
        v
    }

    /// Source model with the head parameters replaced by `theta`.
    pub fn model_with(&self, theta: &[f64]) -> BnnModel {
        let mut m = self.model.clone();
        let r = m.means.last_layer_range();
        let len = r.len();
        m.means.values[r.clone()].copy_from_slice(&theta[..len]);
        if self.scope == HeadScope::MeansAndLogvars {
            m.logvars[r].copy_from_slice(&theta[len..]);
        }
        m
    }

    fn layer_len(&self) -> usize {
        self.layer.len()
    }

    fn split_params<S: Scalar>(&self, theta: &[S]) -> (Vec<S>, Vec<S>) {
        let len = self.layer_len();
        let means = theta[..len].to_vec();
        let logvars: Vec<S> = match self.scope {
            HeadScope::Means => self.model.logvars[self.model.means.last_layer_range()]
                .iter()
                .map(|v| S::from_f64(*v))
                .collect(),
            HeadScope::MeansAndLogvars => theta[len..].to_vec(),
        };
        (means, logvars)
    }

    /// Weighted NLL over the given moment rows plus, when `kl_weight > 0`,
    /// the KL term. Overwrites `grad`.
    fn eval<S: Scalar>(&self, theta: &[S], rows: &mut dyn Iterator<Item = (Vec<f64>, Vec<f64>, usize)>, weight: f64, kl_weight: f64, grad: &mut [S]) -> S {
        let len = self.layer_len();
        let k = self.layer.n_out;
        let (means, logvars) = self.split_params(theta);
        let vars: Vec<S> = logvars.iter().map(|v| v.exp()).collect();
        let mut gm = vec![S::zero(); len];
        let mut gv = vec![S::zero(); len];
        let mut z_mu = vec![S::zero(); k];
        let mut z_var = vec![S::zero(); k];
        let mut g_mu = vec![S::zero(); k];
        let mut g_var = vec![S::zero(); k];
        let mut total = S::zero();
        for (hm, hv, label) in rows {
            let in_mu: Vec<S> = hm.iter().map(|v| S::from_f64(*v)).collect();
            let in_var: Vec<S> = hv.iter().map(|v| S::from_f64(*v)).collect();
            affine_forward(&self.layer, &means, &vars, &in_mu, &in_var, &mut z_mu, &mut z_var);
            total += output_nll(&z_mu, &z_var, label, weight, &mut g_mu, &mut g_var);
            affine_backward(&self.layer, &means, &vars, &in_mu, &in_var, &g_mu, &g_var, &mut gm, &mut gv, None);
        }
        let mut loss = total.scale(weight);
        grad[..len].copy_from_slice(&gm);
        if self.scope == HeadScope::MeansAndLogvars {
            for i in 0..len {
                grad[len + i] = gv[i] * vars[i];
            }
        }
        if kl_weight > 0.0 {
            let one = S::from_f64(1.0);
            let mut kl = S::from_f64(self.frozen_kl);
            for i in 0..len {
                kl += (vars[i] + means[i] * means[i] - one - logvars[i]).scale(0.5);
                grad[i] += means[i].scale(kl_weight);
                if self.scope == HeadScope::MeansAndLogvars {
                    grad[len + i] += (vars[i] - one).scale(0.5 * kl_weight);
                }
            }
            loss += kl.scale(kl_weight);
        }
        loss
    }

    fn train_rows<'s>(&'s self, subset: Option<&'s [usize]>) -> Box<dyn Iterator<Item = (Vec<f64>, Vec<f64>, usize)> + 's> {
        let m = self.layer.n_in;
        let row = move |i: usize| {
            (
                self.feat_mu[i * m..(i + 1) * m].to_vec(),
                self.feat_var[i * m..(i + 1) * m].to_vec(),
                self.instances[i].label,
            )
        };
        match subset {
            Some(idx) => Box::new(idx.iter().map(move |&i| row(i))),
            None => Box::new((0..self.instances.len()).map(row)),
        }
    }

    fn instance_row(&self, z: &LabeledInstance) -> (Vec<f64>, Vec<f64>, usize) {
        let h = self
            .model
            .last_hidden_moments(&z.features)
            .expect("instance matches architecture");
        (h.mean, h.variance, z.label)
    }
}

impl Objective for BnnHead {
    fn dim(&self) -> usize {
        match self.scope {
            HeadScope::Means => self.layer_len(),
            HeadScope::MeansAndLogvars => 2 * self.layer_len(),
        }
    }

    fn n_train(&self) -> usize {
        self.instances.len()
    }

    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        let n = subset.map_or(self.instances.len(), <[usize]>::len);
        self.eval(theta, &mut self.train_rows(subset), 1.0 / n as f64, self.model.kl_weight, grad)
    }

    fn hvp(&self, theta: &[f64], v: &[f64], subset: Option<&[usize]>) -> Option<Vec<f64>> {
        let n = subset.map_or(self.instances.len(), <[usize]>::len);
        let mut g = vec![Dual::default(); self.dim()];
        self.eval(
            &dual_seed(theta, v),
            &mut self.train_rows(subset),
            1.0 / n as f64,
            self.model.kl_weight,
            &mut g,
        );
        Some(g.into_iter().map(|d| d.eps).collect())
    }

    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        self.eval(theta, &mut std::iter::once(self.instance_row(z)), 1.0, 0.0, grad)
    }

    fn instance(&self, i: usize) -> &LabeledInstance {
        &self.instances[i]
    }

    fn train_instance_loss_grad(&self, theta: &[f64], i: usize, grad: &mut [f64]) -> f64 {
        self.eval(theta, &mut self.train_rows(Some(&[i])), 1.0, 0.0, grad)
    }

    fn instance_hvp(&self, theta: &[f64], z: &LabeledInstance, v: &[f64]) -> Option<Vec<f64>> {
        let mut g = vec![Dual::default(); self.dim()];
        self.eval(&dual_seed(theta, v), &mut std::iter::once(self.instance_row(z)), 1.0, 0.0, &mut g);
        Some(g.into_iter().map(|d| d.eps).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;

    fn data(n: usize, seed: u64) -> Vec<LabeledInstance> {
        let mut r = RngStream::new(seed);
        (0..n).map(|i| LabeledInstance::new(r.normal(4), i % 3)).collect()
    }

    fn bnn(depth: usize, logvar: f64, seed: u64) -> BnnModel {
        BnnModel::build(ArchSpec::new(4, depth, 5, 3), logvar, &mut RngStream::new(seed)).unwrap()
    }

    fn fd(f: impl Fn(&[f64]) -> f64, theta: &[f64], coords: Range<usize>) -> Vec<f64> {
        coords
            .map(|i| {
                let h = 1e-6 * theta[i].abs().max(1.0);
                let mut t = theta.to_vec();
                t[i] += h;
                let up = f(&t);
                t[i] -= 2.0 * h;
                (up - f(&t)) / (2.0 * h)
            })
            .collect()
    }

    fn with_flat(m: &BnnModel, t: &[f64]) -> BnnModel {
        let mut c = m.clone();
        c.set_flat(t);
        c
    }

    #[test]
    fn build_examples() {
        let m = bnn(1, -6.0, 3);
        assert_eq!(m.num_params(), 86);
        assert!(m.logvars.iter().all(|v| (v.exp() - (-6f64).exp()).abs() < 1e-18));
        assert!(((-6f64).exp() - 2.48e-3).abs() < 1e-5);
        assert_eq!(m, bnn(1, -6.0, 3));
        // means follow the deterministic initializer on the same stream
        let mlp = MlpModel::build(m.arch, &mut RngStream::new(3)).unwrap();
        assert_eq!(m.means, mlp.params);
        assert_eq!(m.layers().len(), 2);
        assert_eq!(m.last_layer_mean_range(), 25..43);
        assert_eq!(m.last_layer_logvar_range(), 68..86);
    }

    #[test]
    fn first_layer_hand_arithmetic() {
        let m = BnnModel::from_parts(ArchSpec::new(1, 0, 0, 1), vec![2.0, 0.0], vec![0.5f64.ln(), 0.1f64.ln()], 1.0).unwrap();
        let z = m.pre_softmax_moments(&[1.0]).unwrap();
        assert!((z.mean[0] - 2.0).abs() < 1e-15);
        assert!((z.variance[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_reduces_to_mean_network() {
        let m = bnn(2, -800.0, 5);
        for z in data(10, 1) {
            let out = m.propagate_moments(&z.features).unwrap();
            let det = crate::mlp::softmax(&m.mean_network().forward(&z.features).unwrap());
            assert!(out.variance.iter().all(|v| *v == 0.0));
            assert!(out.mean.iter().zip(&det).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        // output means never depend on the variances
        for lv in [-10.0, -4.0, -1.0] {
            let m2 = BnnModel { logvars: vec![lv; m.logvars.len()], ..m.clone() };
            let x = [0.3, -1.0, 2.0, 0.1];
            let a = m2.propagate_moments(&x).unwrap().mean;
            let b = crate::mlp::softmax(&m.mean_network().forward(&x).unwrap());
            assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-15));
        }
    }

    #[test]
    fn variances_nonnegative() {
        let mut r = RngStream::new(77);
        for trial in 0..1000u64 {
            let depth = (trial % 3) as usize;
            let act = if trial % 2 == 0 { Activation::Relu } else { Activation::Selu };
            let arch = ArchSpec::new(4, depth, 1 + (trial % 6) as usize, 3).with_activation(act);
            let lv = -8.0 + 8.0 * r.uniform();
            let mut m = BnnModel::build(arch, lv, &mut r.split(trial)).unwrap();
            for v in m.logvars.iter_mut() {
                *v += r.normal_one();
            }
            let x: Vec<f64> = r.normal(4).into_iter().map(|v| 3.0 * v).collect();
            let t = m.trace(&x).unwrap();
            for pair in t.inputs.iter().chain(&t.pre_activations) {
                assert!(pair.variance.iter().all(|v| *v >= 0.0 && v.is_finite()));
            }
            let out = m.propagate_moments(&x).unwrap();
            assert!(out.variance.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn monte_carlo_agrees_with_moment_propagation() {
        let mut m = bnn(1, (0.01f64).ln(), 12);
        // keep hidden pre-activations away from the ReLU kink and outputs away from 0
        let x = [0.8, -0.5, 1.1, 0.3];
        let first = m.layout()[0];
        let pre = m.mean_network().params.values[first.weights()]
            .chunks(4)
            .map(|row| crate::linalg::dot(row, &x))
            .collect::<Vec<_>>();
        for (b, z) in m.means.values[first.biases()].iter_mut().zip(pre) {
            *b = z.signum();
        }
        let second = m.layout()[1];
        for b in &mut m.means.values[second.biases()] {
            *b = 1.0;
        }
        let t = m.trace(&x).unwrap();
        for (mu, var) in t.pre_activations[0].mean.iter().zip(&t.pre_activations[0].variance) {
            assert!(mu.abs() > 4.0 * var.sqrt(), "hidden unit too close to the kink: {mu} {var}");
        }
        let pred = m.pre_softmax_moments(&x).unwrap();

        let mut r = RngStream::new(99);
        let samples = 100_000;
        let std: Vec<f64> = m.logvars.iter().map(|v| (0.5 * v).exp()).collect();
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for _ in 0..samples {
            let e = r.normal(m.means.len());
            let theta: Vec<f64> = m.means.values.iter().zip(&std).zip(&e).map(|((mu, s), e)| mu + s * e).collect();
            let net = MlpModel::from_params(m.arch, theta).unwrap();
            let y = net.forward(&x).unwrap();
            for c in 0..3 {
                sum[c] += y[c];
                sum_sq[c] += y[c] * y[c];
            }
        }
        let n = samples as f64;
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sum_sq[c] - n * mean * mean) / (n - 1.0);
            assert!((pred.mean[c] - mean).abs() < 0.01 * mean.abs(), "mean {} vs {mean}", pred.mean[c]);
            assert!((pred.variance[c] - var).abs() < 0.05 * var, "var {} vs {var}", pred.variance[c]);
        }
    }

    #[test]
    fn nll_zero_residual_and_kl_identities() {
        // μ_ŷ one-hot is only reached in the limit; check the formula on the
        // clamped variance directly through output_nll
        let mut gm = [0.0; 3];
        let mut gv = [0.0; 3];
        let big = [60.0, 0.0, 0.0];
        let loss = output_nll(&big, &[0.0; 3], 0, 1.0, &mut gm, &mut gv);
        assert!((loss - 1.5 * VARIANCE_FLOOR.ln()).abs() < 1e-6);

        let m = BnnModel::from_parts(ArchSpec::new(4, 1, 5, 3), vec![0.0; 43], vec![0.0; 43], 1.0).unwrap();
        assert_eq!(m.kl(), 0.0);
        let g = m.bnn_grad(&data(1, 0));
        // KL gradient vanishes at the prior, so only the NLL part remains
        let mut nll = vec![0.0; m.num_params()];
        m.instance_nll_grad(&data(1, 0)[0], &mut nll);
        assert!(relative_error(&g, &nll) < 1e-12);

        let mut r = RngStream::new(4);
        for _ in 0..200 {
            let mu = r.normal_one();
            let lv = r.normal_one();
            assert!(kl_term(mu, lv) >= 0.0);
        }
        assert!(kl_term(0.0, 0.0) == 0.0 && kl_term(1e-3, 0.0) > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let batch = data(6, 3);
        for (depth, act) in [(1, Activation::Relu), (2, Activation::Selu), (0, Activation::Relu)] {
            let arch = ArchSpec::new(4, depth, 5, 3).with_activation(act);
            let mut m = BnnModel::build(arch, -2.0, &mut RngStream::new(8)).unwrap();
            m.kl_weight = 0.2;
            let theta = m.flat();
            let g = m.bnn_grad(&batch);
            let num = fd(|t| with_flat(&m, t).elbo_loss(&batch), &theta, 0..theta.len());
            let err = relative_error(&g, &num);
            assert!(err < 1e-5, "depth {depth}: {err:e}");
        }
    }

    #[test]
    fn batch_gradient_is_mean_plus_kl() {
        let batch = data(5, 2);
        let m = bnn(1, -3.0, 2);
        let g = m.bnn_grad(&batch);
        let mut expect = vec![0.0; m.num_params()];
        for z in &batch {
            let mut gi = vec![0.0; m.num_params()];
            m.instance_nll_grad(z, &mut gi);
            crate::linalg::axpy(0.2, &gi, &mut expect);
        }
        let p = m.means.len();
        for i in 0..p {
            expect[i] += m.kl_weight * m.means.values[i];
            expect[p + i] += m.kl_weight * 0.5 * (m.logvars[i].exp() - 1.0);
        }
        assert!(relative_error(&g, &expect) < 1e-12);
    }

    #[test]
    fn last_layer_grad_examples() {
        let m = bnn(1, -3.0, 6);
        let z = &data(1, 9)[0];
        let ll = m.bnn_last_layer_grad(z);
        let mut full = vec![0.0; m.num_params()];
        m.instance_nll_grad(z, &mut full);
        assert!(relative_error(&ll, &full[m.last_layer_mean_range()]) < 1e-10);
        let num = fd(|t| with_flat(&m, t).nll(z), &m.flat(), m.last_layer_mean_range());
        assert!(relative_error(&ll, &num) < 1e-5);
    }

    #[test]
    fn zero_variance_last_layer_grad_matches_gaussian_nll_of_mean_network() {
        let m = bnn(1, -800.0, 6);
        let z = &data(3, 9)[1];
        let ll = m.bnn_last_layer_grad(z);
        // Gaussian NLL of the deterministic network with the clamped variance
        let mean_net = m.mean_network();
        let f = |t: &[f64]| {
            let net = MlpModel::from_params(m.arch, t.to_vec()).unwrap();
            let p = crate::mlp::softmax(&net.forward(&z.features).unwrap());
            p.iter()
                .enumerate()
                .map(|(c, pc)| {
                    let y = if c == z.label { 1.0 } else { 0.0 };
                    0.5 * (y - pc).powi(2) / VARIANCE_FLOOR
                })
                .sum::<f64>()
        };
        let num = fd(f, &mean_net.params.values, mean_net.last_layer_range());
        assert!(relative_error(&ll, &num) < 1e-6);
    }

    #[test]
    fn full_hvp_matches_gradient_differences() {
        let batch = data(6, 1);
        let m = BnnModel::build(ArchSpec::new(4, 1, 4, 3).with_activation(Activation::Selu), -2.0, &mut RngStream::new(2)).unwrap();
        let obj = BnnObjective::new(&m, &batch);
        let theta = m.flat();
        let v = RngStream::new(5).normal(theta.len());
        let hv = obj.hvp(&theta, &v, None).unwrap();
        let h = 1e-6;
        let mut up = theta.clone();
        crate::linalg::axpy(h, &v, &mut up);
        let mut down = theta.clone();
        crate::linalg::axpy(-h, &v, &mut down);
        let num: Vec<f64> = obj.grad(&up, None).iter().zip(&obj.grad(&down, None)).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(relative_error(&hv, &num) < 1e-6);
    }

    #[test]
    fn head_matches_full_objective() {
        let batch = data(9, 4);
        let mut m = bnn(2, -3.0, 1);
        m.kl_weight = 1.0 / 9.0;
        let full = BnnObjective::new(&m, &batch);
        let theta = m.flat();
        let gf = full.grad(&theta, None);
        for scope in [HeadScope::Means, HeadScope::MeansAndLogvars] {
            let head = BnnHead::new(&m, &batch, scope);
            let t = head.initial_params();
            let mut gh = vec![0.0; head.dim()];
            let lh = head.loss_grad(&t, None, &mut gh);
            assert!((lh - full.loss(&theta, None)).abs() < 1e-12);
            let mut expect = gf[m.last_layer_mean_range()].to_vec();
            if scope == HeadScope::MeansAndLogvars {
                expect.extend_from_slice(&gf[m.last_layer_logvar_range()]);
            }
            assert!(relative_error(&gh, &expect) < 1e-12);

            let mut gi = vec![0.0; head.dim()];
            head.instance_loss_grad(&t, &batch[2], &mut gi);
            assert!(relative_error(&gi[..18], &m.bnn_last_layer_grad(&batch[2])) < 1e-12);
            let mut gt = vec![0.0; head.dim()];
            head.train_instance_loss_grad(&t, 2, &mut gt);
            assert!(relative_error(&gi, &gt) < 1e-14);

            // exact HVP against differences of gradients
            let v = RngStream::new(3).normal(head.dim());
            let hv = head.hvp(&t, &v, None).unwrap();
            let h = 1e-6;
            let mut up = t.clone();
            crate::linalg::axpy(h, &v, &mut up);
            let mut down = t.clone();
            crate::linalg::axpy(-h, &v, &mut down);
            let num: Vec<f64> = head
                .grad(&up, None)
                .iter()
                .zip(&head.grad(&down, None))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            assert!(relative_error(&hv, &num) < 1e-6);
            let back = head.model_with(&t);
            assert_eq!(back, m);
        }
    }
}
