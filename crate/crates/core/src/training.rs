//! Optimizers, plateau scheduling, weight averaging, and the full-training
//! and last-layer fine-tuning loops.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::{BnnHead, BnnModel, BnnObjective, HeadScope};
use crate::data::{Dataset, LabeledInstance};
use crate::mlp::{ArchSpec, LayerLayout, MlpModel, MlpObjective, ParameterVector, SoftmaxHead};
use crate::objective::Objective;
use crate::rng::RngStream;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Improvement a loss must show over the best seen so far to count as a
/// decrease for the plateau scheduler.
pub const PLATEAU_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter layout mismatch: expected {expected} values, got {got}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "size")]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    /// Coefficient of the `(wd/2)‖θ‖²` term added to the loss. Unused by
    /// variational models, whose KL term plays that role.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_mode: BatchMode,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    pub swa: bool,
    /// First epoch (0-based) whose parameters enter the average; defaults to
    /// 75% of `epochs`.
    pub swa_start_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            lr: 1e-3,
            weight_decay: 0.005,
            epochs: 60_000,
            batch_mode: BatchMode::Full,
            plateau_patience: 100,
            plateau_factor: 0.1,
            min_lr: 1e-7,
            swa: false,
            swa_start_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.min_lr >= 0.0) {
            return bad("min_lr must be non-negative");
        }
        if let BatchMode::Minibatch(0) = self.batch_mode {
            return bad("minibatch size must be positive");
        }
        Ok(())
    }

    pub fn swa_start(&self) -> usize {
        self.swa_start_epoch.unwrap_or(self.epochs * 3 / 4)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training objective per epoch (mean over the epoch's steps, evaluated
    /// before each update).
    pub losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub lrs: Vec<f64>,
    /// `(epoch, new lr)` for every scheduler cut.
    pub lr_events: Vec<(usize, f64)>,
    /// Probe-instance loss after each epoch, when a probe is supplied.
    pub probe_losses: Option<Vec<f64>>,
    pub final_epoch: usize,
    pub wall_time_secs: f64,
}

impl TrainLog {
    pub fn final_lr(&self) -> Option<f64> {
        self.lrs.last().copied()
    }

    /// CSV with header `epoch,loss,lr[,probe_test_loss]`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        match &self.probe_losses {
            Some(p) => {
                writeln!(w, "epoch,loss,lr,probe_test_loss")?;
                for (e, ((l, lr), pl)) in self.losses.iter().zip(&self.lrs).zip(p).enumerate() {
                    writeln!(w, "{e},{l:e},{lr:e},{pl:e}")?;
                }
            }
            None => {
                writeln!(w, "epoch,loss,lr")?;
                for (e, (l, lr)) in self.losses.iter().zip(&self.lrs).enumerate() {
                    writeln!(w, "{e},{l:e},{lr:e}")?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grad.len(), "adam: parameter/gradient length");
    assert_eq!(params.len(), state.m.len(), "adam: state length");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has gone
/// more than `patience` epochs without a new strict minimum.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            patience,
            factor,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one epoch's loss; returns the new learning rate on a cut.
    pub fn step(&mut self, loss: f64, lr: &mut f64) -> Option<f64> {
        if loss < self.best - PLATEAU_TOL {
            self.best = loss;
            self.wait = 0;
            return None;
        }
        self.wait += 1;
        if self.wait <= self.patience {
            return None;
        }
        self.wait = 0;
        let next = (*lr * self.factor).max(self.min_lr);
        if next < *lr {
            *lr = next;
            Some(next)
        } else {
            None
        }
    }
}

/// Running average of parameter snapshots.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SwaState {
    pub mean: Vec<f64>,
    pub count: usize,
    layout: Option<Vec<LayerLayout>>,
}

impl SwaState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `mean ← mean + (params − mean)/(count + 1)`.
    pub fn update(&mut self, params: &[f64]) -> Result<(), TrainError> {
        if self.count == 0 {
            self.mean = params.to_vec();
            self.count = 1;
            return Ok(());
        }
        if params.len() != self.mean.len() {
            return Err(TrainError::LayoutMismatch {
                expected: self.mean.len(),
                got: params.len(),
            });
        }
        let k = (self.count + 1) as f64;
        for (m, p) in self.mean.iter_mut().zip(params) {
            *m += (p - *m) / k;
        }
        self.count += 1;
        Ok(())
    }
}

/// Layout-checked SWA update: every snapshot must share the layer layout of
/// the first.
pub fn swa_update(state: &mut SwaState, params: &ParameterVector) -> Result<(), TrainError> {
    match &state.layout {
        Some(l) if *l != params.layout => {
            return Err(TrainError::LayoutMismatch {
                expected: state.mean.len(),
                got: params.len(),
            })
        }
        Some(_) => {}
        None => state.layout = Some(params.layout.clone()),
    }
    state.update(&params.values)
}

/// Runs `cfg.epochs` epochs of the configured optimizer on `obj` from
/// `theta`. `probe` is evaluated after every epoch.
pub fn optimize(
    obj: &dyn Objective,
    theta: &mut Vec<f64>,
    cfg: &TrainConfig,
    probe: Option<&dyn Fn(&[f64]) -> f64>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let n = obj.n_train();
    if n == 0 {
        return Err(TrainError::EmptyTrainSet);
    }
    let start = Instant::now();
    let mut lr = cfg.lr;
    let mut sched = PlateauScheduler::new(cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr);
    let mut adam = AdamState::new(theta.len());
    let mut swa = SwaState::new();
    let mut grad = vec![0.0; theta.len()];
    let mut stream = RngStream::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog {
        probe_losses: probe.map(|_| Vec::with_capacity(cfg.epochs)),
        ..TrainLog::default()
    };
    let swa_start = cfg.swa_start();

    for epoch in 0..cfg.epochs {
        let loss = match cfg.batch_mode {
            BatchMode::Full => {
                let l = obj.loss_grad(theta, None, &mut grad);
                step(cfg.optimizer, theta, &grad, &mut adam, lr);
                l
            }
            BatchMode::Minibatch(size) => {
                stream.shuffle(&mut order);
                let mut total = 0.0;
                for chunk in order.chunks(size) {
                    let l = obj.loss_grad(theta, Some(chunk), &mut grad);
                    total += l * chunk.len() as f64;
                    step(cfg.optimizer, theta, &grad, &mut adam, lr);
                }
                total / n as f64
            }
        };
        if !loss.is_finite() || theta.iter().any(|t| !t.is_finite()) {
            return Err(TrainError::Diverged { epoch });
        }
        log.losses.push(loss);
        log.lrs.push(lr);
        if let Some(new_lr) = sched.step(loss, &mut lr) {
            log.lr_events.push((epoch, new_lr));
        }
        if cfg.swa && epoch >= swa_start {
            swa.update(theta)?;
        }
        if let (Some(f), Some(p)) = (probe, log.probe_losses.as_mut()) {
            p.push(f(theta));
        }
        log.final_epoch = epoch + 1;
    }
    if cfg.swa && swa.count > 0 {
        theta.copy_from_slice(&swa.mean);
    }
    log.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

fn step(opt: Optimizer, theta: &mut [f64], grad: &[f64], adam: &mut AdamState, lr: f64) {
    match opt {
        Optimizer::Gd => crate::linalg::axpy(-lr, grad, theta),
        Optimizer::Adam => adam_step(theta, grad, adam, lr),
    }
}

/// A trainable classifier of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Mlp(MlpModel),
    Bnn(BnnModel),
}

impl Network {
    pub fn arch(&self) -> ArchSpec {
        match self {
            Network::Mlp(m) => m.arch,
            Network::Bnn(m) => m.arch,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Network::Mlp(_) => "mlp",
            Network::Bnn(_) => "bnn",
        }
    }

    /// All trainable values (`[means; logvars]` for a BNN).
    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Network::Mlp(m) => m.params.values.clone(),
            Network::Bnn(m) => m.flat(),
        }
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) {
        match self {
            Network::Mlp(m) => m.params.values.copy_from_slice(theta),
            Network::Bnn(m) => m.set_flat(theta),
        }
    }

    /// Unregularized loss of one instance: cross-entropy for an MLP,
    /// Gaussian NLL for a BNN.
    pub fn instance_loss(&self, z: &LabeledInstance) -> f64 {
        match self {
            Network::Mlp(m) => m.instance_loss(z),
            Network::Bnn(m) => m.nll(z),
        }
    }

    pub fn mean_instance_loss(&self, data: &[LabeledInstance]) -> f64 {
        data.iter().map(|z| self.instance_loss(z)).sum::<f64>() / data.len() as f64
    }

    /// Index of the highest-loss instance, ties to the lowest index.
    pub fn max_loss_instance(&self, ds: &Dataset) -> usize {
        let losses: Vec<f64> = ds.instances.iter().map(|z| self.instance_loss(z)).collect();
        crate::mlp::argmax_first(&losses)
    }

    /// Full training objective over `data`.
    pub fn objective<'a>(&'a self, data: &'a [LabeledInstance], weight_decay: f64) -> Box<dyn Objective + 'a> {
        match self {
            Network::Mlp(m) => Box::new(MlpObjective::new(m, data, weight_decay)),
            Network::Bnn(m) => Box::new(BnnObjective::new(m, data)),
        }
    }

    /// Last-layer objective used for influence: every last-layer parameter of
    /// an MLP, the last-layer means of a BNN.
    pub fn influence_head(&self, data: &[LabeledInstance], weight_decay: f64) -> Head {
        match self {
            Network::Mlp(m) => Head::Softmax(SoftmaxHead::new(m, data, weight_decay)),
            Network::Bnn(m) => Head::Bnn(BnnHead::new(m, data, HeadScope::Means)),
        }
    }

    /// Last-layer objective used for fine-tuning: also includes the
    /// last-layer log-variances of a BNN.
    pub fn finetune_head(&self, data: &[LabeledInstance], weight_decay: f64) -> Head {
        match self {
            Network::Mlp(m) => Head::Softmax(SoftmaxHead::new(m, data, weight_decay)),
            Network::Bnn(m) => Head::Bnn(BnnHead::new(m, data, HeadScope::MeansAndLogvars)),
        }
    }
}

/// Last-layer objective of either family.
#[derive(Debug, Clone)]
pub enum Head {
    Softmax(SoftmaxHead),
    Bnn(BnnHead),
}

impl Objective for Head {
    fn dim(&self) -> usize {
        self.objective().dim()
    }
    fn n_train(&self) -> usize {
        self.objective().n_train()
    }
    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        self.objective().loss_grad(theta, subset, grad)
    }
    fn hvp(&self, theta: &[f64], v: &[f64], subset: Option<&[usize]>) -> Option<Vec<f64>> {
        self.objective().hvp(theta, v, subset)
    }
    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        self.objective().instance_loss_grad(theta, z, grad)
    }
    fn instance(&self, i: usize) -> &LabeledInstance {
        self.objective().instance(i)
    }
    fn train_instance_loss_grad(&self, theta: &[f64], i: usize, grad: &mut [f64]) -> f64 {
        self.objective().train_instance_loss_grad(theta, i, grad)
    }
    fn instance_hvp(&self, theta: &[f64], z: &LabeledInstance, v: &[f64]) -> Option<Vec<f64>> {
        self.objective().instance_hvp(theta, z, v)
    }
}

impl Head {
    pub fn objective(&self) -> &dyn Objective {
        match self {
            Head::Softmax(h) => h,
            Head::Bnn(h) => h,
        }
    }

    pub fn initial_params(&self) -> Vec<f64> {
        match self {
            Head::Softmax(h) => h.initial_params(),
            Head::Bnn(h) => h.initial_params(),
        }
    }

    pub fn network_with(&self, theta: &[f64]) -> Network {
        match self {
            Head::Softmax(h) => Network::Mlp(h.model_with(theta)),
            Head::Bnn(h) => Network::Bnn(h.model_with(theta)),
        }
    }
}

/// Trains every parameter of `net` on `train`.
pub fn train(net: &Network, train: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainLog), TrainError> {
    train_with_probe(net, train, cfg, None)
}

/// [`train`], logging the loss of `probe` after every epoch.
pub fn train_with_probe(
    net: &Network,
    train: &Dataset,
    cfg: &TrainConfig,
    probe: Option<&LabeledInstance>,
) -> Result<(Network, TrainLog), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let obj = net.objective(&train.instances, cfg.weight_decay);
    let mut theta = net.flat_params();
    let obj_ref = obj.as_ref();
    let probe_fn = probe.map(|z| move |t: &[f64]| obj_ref.instance_loss(t, z));
    let log = optimize(obj_ref, &mut theta, cfg, probe_fn.as_ref().map(|f| f as &dyn Fn(&[f64]) -> f64))?;
    let mut out = net.clone();
    out.set_flat_params(&theta);
    Ok((out, log))
}

/// Trains only the final layer of `net` on `train` for `epochs` epochs with
/// a fresh optimizer state; every other coordinate is left untouched. When
/// `probe` is given, its loss is logged after each epoch.
pub fn finetune_last_layer(
    net: &Network,
    train: &Dataset,
    epochs: usize,
    cfg: &TrainConfig,
    probe: Option<&LabeledInstance>,
) -> Result<(Network, TrainLog), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let head = net.finetune_head(&train.instances, cfg.weight_decay);
    let obj = head.objective();
    let mut theta = head.initial_params();
    let cfg = TrainConfig {
        epochs,
        ..cfg.clone()
    };
    let probe_fn = probe.map(|z| move |t: &[f64]| obj.instance_loss(t, z));
    let log = optimize(obj, &mut theta, &cfg, probe_fn.as_ref().map(|f| f as &dyn Fn(&[f64]) -> f64))?;
    Ok((head.network_with(&theta), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::QuadraticObjective;

    fn quad() -> QuadraticObjective {
        let a = crate::linalg::DenseMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        QuadraticObjective::new(
            a,
            vec![
                LabeledInstance::new(vec![1.0, -1.0], 0),
                LabeledInstance::new(vec![3.0, 1.0], 0),
            ],
        )
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.1);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, 0.01);
        for (pi, gi) in p.iter().zip(&g) {
            let expect = -0.01 * gi / (gi.abs() + ADAM_EPS);
            assert!((pi - expect).abs() < 1e-15);
            assert!((pi.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_is_reproducible() {
        let run = || {
            let mut p = vec![0.3, 0.7];
            let mut s = AdamState::new(2);
            for k in 0..100 {
                let g = [p[0] - 1.0 + 0.01 * k as f64, 2.0 * p[1]];
                adam_step(&mut p, &g, &mut s, 0.05);
            }
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn plateau_cuts_once_after_patience() {
        let patience = 5;
        let mut s = PlateauScheduler::new(patience, 0.1, 1e-7);
        let mut lr = 1e-3;
        let mut events = vec![];
        for (e, l) in std::iter::once(1.0).chain(std::iter::repeat_n(1.0, patience + 1)).enumerate() {
            if let Some(v) = s.step(l, &mut lr) {
                events.push((e, v));
            }
        }
        assert_eq!(events.len(), 1);
        assert!((events[0].1 - 1e-4).abs() < 1e-18);

        // strictly decreasing loss never cuts
        let mut s = PlateauScheduler::new(2, 0.1, 1e-7);
        let mut lr = 1.0;
        assert!((0..50).all(|k| s.step(-(k as f64), &mut lr).is_none()));
    }

    #[test]
    fn plateau_lr_is_monotone_and_floored() {
        let mut s = PlateauScheduler::new(0, 0.1, 1e-7);
        let mut lr = 1.0;
        let mut prev = lr;
        for _ in 0..100 {
            s.step(1.0, &mut lr);
            assert!(lr <= prev && lr >= 1e-7);
            prev = lr;
        }
        assert_eq!(lr, 1e-7);
    }

    #[test]
    fn swa_examples() {
        let mut s = SwaState::new();
        s.update(&[1.0, 2.0]).unwrap();
        assert_eq!(s.mean, vec![1.0, 2.0]);
        s.update(&[-1.0, -2.0]).unwrap();
        assert_eq!(s.mean, vec![0.0, 0.0]);
        assert!(matches!(s.update(&[1.0]), Err(TrainError::LayoutMismatch { .. })));

        let mut r = RngStream::new(2);
        let snaps: Vec<Vec<f64>> = (0..3).map(|_| r.normal(7)).collect();
        let mut s = SwaState::new();
        snaps.iter().for_each(|p| s.update(p).unwrap());
        for i in 0..7 {
            let direct = (snaps[0][i] + snaps[1][i] + snaps[2][i]) / 3.0;
            assert!((s.mean[i] - direct).abs() < 1e-12);
        }
        assert_eq!(s.count, 3);
    }

    #[test]
    fn swa_update_checks_layout() {
        let a = ParameterVector::zeros(ArchSpec::new(4, 1, 5, 3).layout());
        let b = ParameterVector::zeros(ArchSpec::new(4, 1, 6, 3).layout());
        let mut s = SwaState::new();
        swa_update(&mut s, &a).unwrap();
        assert!(swa_update(&mut s, &b).is_err());
        swa_update(&mut s, &a).unwrap();
        assert_eq!(s.count, 2);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let q = quad();
        let mut theta = vec![0.0, 0.0];
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 20,
            ..TrainConfig::default()
        };
        let log = optimize(&q, &mut theta, &cfg, None).unwrap();
        assert_eq!(theta, vec![0.0, 0.0]);
        assert!(log.losses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(log.losses.len(), 20);
    }

    #[test]
    fn swa_averages_late_iterates() {
        let q = quad();
        let cfg = TrainConfig {
            optimizer: Optimizer::Gd,
            lr: 0.1,
            epochs: 8,
            swa: true,
            swa_start_epoch: Some(6),
            ..TrainConfig::default()
        };
        let mut theta = vec![0.0, 0.0];
        optimize(&q, &mut theta, &cfg, None).unwrap();
        // replay with plain GD
        let mut t = vec![0.0, 0.0];
        let mut snaps = vec![];
        for e in 0..8 {
            let g = q.grad(&t, None);
            crate::linalg::axpy(-0.1, &g, &mut t);
            if e >= 6 {
                snaps.push(t.clone());
            }
        }
        for i in 0..2 {
            assert!((theta[i] - (snaps[0][i] + snaps[1][i]) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let q = quad();
        let cfg = TrainConfig {
            optimizer: Optimizer::Gd,
            lr: 50.0,
            epochs: 2000,
            ..TrainConfig::default()
        };
        let mut theta = vec![0.0, 0.0];
        assert!(matches!(optimize(&q, &mut theta, &cfg, None), Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn minibatch_is_deterministic() {
        let q = quad();
        let cfg = TrainConfig {
            batch_mode: BatchMode::Minibatch(1),
            epochs: 30,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut a = vec![0.0, 0.0];
        let mut b = vec![0.0, 0.0];
        optimize(&q, &mut a, &cfg, None).unwrap();
        optimize(&q, &mut b, &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_log_csv() {
        let log = TrainLog {
            losses: vec![1.0, 0.5],
            lrs: vec![0.1, 0.1],
            probe_losses: Some(vec![2.0, 1.5]),
            ..TrainLog::default()
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("epoch,loss,lr,probe_test_loss\n0,"));
        assert_eq!(s.lines().count(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..TrainConfig::default() }.validate().is_err());
        assert_eq!(TrainConfig { epochs: 100, ..TrainConfig::default() }.swa_start(), 75);
    }
}
