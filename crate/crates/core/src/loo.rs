//! Leave-one-out ground truth: point selection, retraining after removal,
//! comparison against influence estimates, and the perturbation check of
//! the first-order parameter-change formula.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::{BnnModel, DEFAULT_INIT_LOGVAR};
use crate::data::{Dataset, LabeledInstance};
use crate::hessian::{HessianError, HessianOperator, HvpMethod, Scope};
use crate::influence::{influence_up_loss_batch, removal_epsilon, InfluenceRecord, SolveMethod};
use crate::linalg::{axpy, norm, solve_spd, DenseMatrix, LinalgError};
use crate::mlp::{ArchSpec, MlpError, MlpModel};
use crate::objective::Objective;
use crate::rng::RngStream;
use crate::stats::{pearson, spearman, StatsError};
use crate::training::{finetune_last_layer, train, train_with_probe, Network, TrainConfig, TrainError};

/// Share of removals that must retrain successfully for a report to be
/// emitted.
pub const MIN_SUCCESS_FRACTION: f64 = 0.9;

#[derive(Debug, Error)]
pub enum LooError {
    #[error("cannot select {k} points from {n} training instances")]
    TooMany { k: usize, n: usize },
    #[error("influence-based selection needs one influence value per training instance")]
    MissingInfluences,
    #[error("test index {index} out of range for {n} test instances")]
    TestIndex { index: usize, n: usize },
    #[error("test set is empty")]
    EmptyTest,
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error("influence computation failed: {0}")]
    Influence(#[from] HessianError),
    #[error("model construction failed: {0}")]
    Model(String),
    #[error("only {ok} of {total} removals retrained successfully")]
    TooManyFailures { ok: usize, total: usize },
    #[error("correlation undefined: {0}")]
    Correlation(#[from] StatsError),
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum Selection {
    TopLoss(usize),
    TopInfluence(usize),
}

impl Selection {
    pub fn k(&self) -> usize {
        match self {
            Selection::TopLoss(k) | Selection::TopInfluence(k) => *k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Retrain {
    /// Fine-tune the last layer from `θ̂` with a fresh optimizer state. `lr`
    /// defaults to the training run's initial learning rate.
    FromOptimal { finetune_epochs: usize, lr: Option<f64> },
    /// Rebuild from the run's initialization seed and retrain fully.
    FromScratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum TestPoint {
    MaxLoss,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceSettings {
    pub damping: f64,
    pub method: SolveMethod,
    pub hvp_method: HvpMethod,
}

impl Default for InfluenceSettings {
    fn default() -> Self {
        Self {
            damping: 0.01,
            method: SolveMethod::DirectSolve,
            hvp_method: HvpMethod::AnalyticDoubleBackward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooProtocol {
    pub selection: Selection,
    pub retrain: Retrain,
    pub test_point: TestPoint,
    pub repetitions: usize,
    pub base_seed: u64,
    pub influence: InfluenceSettings,
}

impl LooProtocol {
    pub fn seed(&self, repetition: usize) -> u64 {
        self.base_seed.wrapping_add(repetition as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Mlp,
    Bnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub arch: ArchSpec,
    /// Initial log-variance of variational parameters.
    #[serde(default = "default_init_logvar")]
    pub init_logvar: f64,
}

fn default_init_logvar() -> f64 {
    DEFAULT_INIT_LOGVAR
}

impl ModelSpec {
    pub fn mlp(arch: ArchSpec) -> Self {
        Self {
            family: Family::Mlp,
            arch,
            init_logvar: DEFAULT_INIT_LOGVAR,
        }
    }

    pub fn bnn(arch: ArchSpec) -> Self {
        Self {
            family: Family::Bnn,
            ..Self::mlp(arch)
        }
    }

    /// Freshly initialized network for `seed`. Variational models weight
    /// the KL term by `1/n_train`.
    pub fn build(&self, seed: u64, n_train: usize) -> Result<Network, LooError> {
        let mut stream = RngStream::new(seed);
        match self.family {
            Family::Mlp => Ok(Network::Mlp(
                MlpModel::build(self.arch, &mut stream).map_err(|e: MlpError| LooError::Model(e.to_string()))?,
            )),
            Family::Bnn => {
                let mut m = BnnModel::build(self.arch, self.init_logvar, &mut stream).map_err(|e| LooError::Model(e.to_string()))?;
                m.set_kl_weight(1.0 / n_train.max(1) as f64)
                    .map_err(|e| LooError::Model(e.to_string()))?;
                Ok(Network::Bnn(m))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub epoch: usize,
    pub test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRecord {
    pub train_index: usize,
    pub i_up_loss: f64,
    pub approx_loss_diff: f64,
    /// `None` when retraining failed; see `reason`.
    pub true_loss_diff: Option<f64>,
    pub reason: Option<String>,
    pub trajectory: Vec<TrajectorySample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub repetition: usize,
    pub seed: u64,
    pub family: Family,
    pub arch: ArchSpec,
    /// Free-form description of the regularization setting.
    pub regularization: String,
    pub n_train: usize,
    pub epsilon: f64,
    pub test_index: usize,
    pub test_loss: f64,
    pub train_loss: f64,
    pub damping: f64,
    pub influence_method: String,
    pub selection: Selection,
    pub retrain: Retrain,
    pub records: Vec<RemovalRecord>,
    pub spearman: f64,
    pub pearson: f64,
}

impl ValidationReport {
    /// `(approx, true)` pairs of successful removals, in record order.
    pub fn pairs(&self) -> (Vec<f64>, Vec<f64>) {
        self.records
            .iter()
            .filter_map(|r| r.true_loss_diff.map(|t| (r.approx_loss_diff, t)))
            .unzip()
    }

    pub fn excluded(&self) -> usize {
        self.records.iter().filter(|r| r.true_loss_diff.is_none()).count()
    }
}

/// Indices of the `k` largest values, descending, ties to the lowest index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Training indices to remove: the `k` highest per-instance training losses
/// or the `k` largest `|i_up_loss|`.
pub fn select_points(net: &Network, train: &Dataset, influences: Option<&[f64]>, sel: Selection) -> Result<Vec<usize>, LooError> {
    let k = sel.k();
    if k > train.len() {
        return Err(LooError::TooMany { k, n: train.len() });
    }
    match sel {
        Selection::TopLoss(_) => {
            let losses: Vec<f64> = train.instances.iter().map(|z| net.instance_loss(z)).collect();
            Ok(top_k(&losses, k))
        }
        Selection::TopInfluence(_) => {
            let inf = influences.filter(|v| v.len() == train.len()).ok_or(LooError::MissingInfluences)?;
            let abs: Vec<f64> = inf.iter().map(|v| v.abs()).collect();
            Ok(top_k(&abs, k))
        }
    }
}

/// How to retrain after a removal, with every setting resolved.
#[derive(Debug, Clone)]
pub enum RetrainPlan {
    FromOptimal { epochs: usize, cfg: TrainConfig },
    FromScratch { init: Network, cfg: TrainConfig },
}

/// `L(z_test, θ_after) − L(z_test, θ̂)` after removing `removed` and
/// retraining, with the test loss after every retraining epoch.
pub fn true_loss_diff(
    trained: &Network,
    train_set: &Dataset,
    removed: usize,
    z_test: &LabeledInstance,
    plan: &RetrainPlan,
) -> Result<(f64, Vec<TrajectorySample>), TrainError> {
    let reduced = train_set.without(removed);
    let (after, log) = match plan {
        RetrainPlan::FromOptimal { epochs, cfg } => finetune_last_layer(trained, &reduced, *epochs, cfg, Some(z_test))?,
        RetrainPlan::FromScratch { init, cfg } => train_with_probe(init, &reduced, cfg, Some(z_test))?,
    };
    let delta = after.instance_loss(z_test) - trained.instance_loss(z_test);
    let trajectory = log
        .probe_losses
        .unwrap_or_default()
        .into_iter()
        .enumerate()
        .map(|(epoch, test_loss)| TrajectorySample { epoch, test_loss })
        .collect();
    if !delta.is_finite() {
        return Err(TrainError::Diverged { epoch: log.final_epoch });
    }
    Ok((delta, trajectory))
}

/// Last-layer damped Hessian operator of a trained network.
pub fn influence_operator<'a>(net: &Network, train: &'a Dataset, weight_decay: f64, settings: &InfluenceSettings) -> HessianOperator<'a> {
    let head = net.influence_head(&train.instances, weight_decay);
    let theta = head.initial_params();
    HessianOperator::new(Box::new(head), theta, settings.damping, settings.hvp_method, Scope::LastLayer)
}

/// Everything [`validation_run`] needs besides the protocol.
#[derive(Debug, Clone)]
pub struct RunInputs<'a> {
    pub spec: ModelSpec,
    pub train_cfg: TrainConfig,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub regularization: String,
}

/// Trains repetition `repetition` (seed `base_seed + repetition`) and
/// validates it.
pub fn validation_run(protocol: &LooProtocol, inputs: &RunInputs<'_>, repetition: usize) -> Result<ValidationReport, LooError> {
    let seed = protocol.seed(repetition);
    let init = inputs.spec.build(seed, inputs.train.len())?;
    let cfg = TrainConfig {
        seed,
        ..inputs.train_cfg.clone()
    };
    let (trained, _) = train(&init, inputs.train, &cfg)?;
    validate_trained(protocol, inputs, repetition, &init, &trained).map(|(report, _)| report)
}

/// Validation of an already trained network `trained` that started from
/// `init`. Also returns the influence of every training instance on the
/// chosen test point.
pub fn validate_trained(
    protocol: &LooProtocol,
    inputs: &RunInputs<'_>,
    repetition: usize,
    init: &Network,
    trained: &Network,
) -> Result<(ValidationReport, Vec<InfluenceRecord>), LooError> {
    let seed = protocol.seed(repetition);
    let (train_set, test_set) = (inputs.train, inputs.test);
    if test_set.is_empty() {
        return Err(LooError::EmptyTest);
    }
    let test_index = match protocol.test_point {
        TestPoint::MaxLoss => trained.max_loss_instance(test_set),
        TestPoint::Explicit(i) if i < test_set.len() => i,
        TestPoint::Explicit(i) => return Err(LooError::TestIndex { index: i, n: test_set.len() }),
    };
    let z_test = &test_set.instances[test_index];

    let op = influence_operator(trained, train_set, inputs.train_cfg.weight_decay, &protocol.influence);
    let all: Vec<usize> = (0..train_set.len()).collect();
    let influence = influence_up_loss_batch(&op, &all, z_test, test_index, &protocol.influence.method)?;
    let i_up: Vec<f64> = influence.iter().map(|r| r.i_up_loss).collect();
    let selected = select_points(trained, train_set, Some(&i_up), protocol.selection)?;

    let base_cfg = TrainConfig {
        seed,
        ..inputs.train_cfg.clone()
    };
    let plan = match &protocol.retrain {
        Retrain::FromOptimal { finetune_epochs, lr } => RetrainPlan::FromOptimal {
            epochs: *finetune_epochs,
            cfg: TrainConfig {
                lr: lr.unwrap_or(inputs.train_cfg.lr),
                swa: false,
                ..base_cfg
            },
        },
        Retrain::FromScratch => RetrainPlan::FromScratch {
            init: init.clone(),
            cfg: base_cfg,
        },
    };

    let records: Vec<RemovalRecord> = selected
        .par_iter()
        .map(|&i| {
            let (true_diff, reason, trajectory) = match true_loss_diff(trained, train_set, i, z_test, &plan) {
                Ok((d, t)) => (Some(d), None, t),
                Err(e) => (None, Some(e.to_string()), Vec::new()),
            };
            RemovalRecord {
                train_index: i,
                i_up_loss: influence[i].i_up_loss,
                approx_loss_diff: influence[i].approx_loss_diff,
                true_loss_diff: true_diff,
                reason,
                trajectory,
            }
        })
        .collect();

    let ok = records.iter().filter(|r| r.true_loss_diff.is_some()).count();
    if (ok as f64) < MIN_SUCCESS_FRACTION * records.len() as f64 {
        return Err(LooError::TooManyFailures { ok, total: records.len() });
    }
    let (approx, truth): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| r.true_loss_diff.map(|t| (r.approx_loss_diff, t)))
        .unzip();
    let (rho, r) = if approx.len() >= 2 {
        (spearman(&approx, &truth)?, pearson(&approx, &truth)?)
    } else {
        // a single pair carries no rank information
        let agree = approx.first().zip(truth.first()).map_or(0.0, |(a, t)| (a * t).signum());
        (agree, agree)
    };
    let report = ValidationReport {
        repetition,
        seed,
        family: inputs.spec.family,
        arch: inputs.spec.arch,
        regularization: inputs.regularization.clone(),
        n_train: train_set.len(),
        epsilon: removal_epsilon(train_set.len()),
        test_index,
        test_loss: trained.instance_loss(z_test),
        train_loss: trained.mean_instance_loss(&train_set.instances),
        damping: protocol.influence.damping,
        influence_method: protocol.influence.method.name().to_string(),
        selection: protocol.selection,
        retrain: protocol.retrain.clone(),
        records,
        spearman: rho,
        pearson: r,
    };
    Ok((report, influence))
}

/// One row of the perturbation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivationRow {
    pub epsilon: f64,
    /// `‖θ̂_{ε,z} − θ̂‖`.
    pub delta_norm: f64,
    /// `‖Δ_ε − (−H⁻¹∇L(z) ε)‖`: first-order prediction error.
    pub linear_error: f64,
    /// `‖Δ_ε − (−[H + ε∇²L(z)]⁻¹ ε∇L(z))‖`: error of the linearized
    /// stationarity condition, zero for quadratic objectives.
    pub bracketed_error: f64,
    /// Final gradient norm of the perturbed optimization.
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivationReport {
    pub theta_hat: Vec<f64>,
    pub rows: Vec<DerivationRow>,
}

impl DerivationReport {
    /// `linear_error(ε_i) / linear_error(ε_{i+1})` for consecutive rows.
    pub fn error_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].linear_error / w[1].linear_error).collect()
    }
}

/// Gradient-norm target of the inner optimizations.
pub const DERIVATION_GRAD_TOL: f64 = 1e-10;

fn dense_from_hvp(d: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DenseMatrix {
    let mut cols = Vec::with_capacity(d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        cols.push(f(&e));
        e[j] = 0.0;
    }
    let mut m = DenseMatrix::from_columns(&cols).expect("finite Hessian");
    m.symmetrize();
    m
}

/// Damped Newton on `R(θ) + ε L(z, θ)` until `‖∇‖ < DERIVATION_GRAD_TOL`.
fn newton(obj: &dyn Objective, z: &LabeledInstance, eps: f64, theta: &mut [f64], max_iters: usize) -> Result<(f64, bool), LooError> {
    let d = obj.dim();
    let value_grad = |t: &[f64], g: &mut Vec<f64>| {
        let mut gz = vec![0.0; d];
        let v = obj.loss_grad(t, None, g) + eps * obj.instance_loss_grad(t, z, &mut gz);
        axpy(eps, &gz, g);
        v
    };
    let mut g = vec![0.0; d];
    let mut f = value_grad(theta, &mut g);
    for _ in 0..max_iters {
        let gn = norm(&g);
        if gn < DERIVATION_GRAD_TOL {
            return Ok((gn, true));
        }
        let h = dense_from_hvp(d, |v| {
            let mut hv = obj.hvp(theta, v, None).expect("objective provides Hessian-vector products");
            axpy(eps, &obj.instance_hvp(theta, z, v).expect("objective provides instance Hessian-vector products"), &mut hv);
            hv
        });
        let step = solve_spd(&h, &g, 0.0)?;
        let mut t = 1.0;
        loop {
            let mut cand = theta.to_vec();
            axpy(-t, &step, &mut cand);
            let mut gc = vec![0.0; d];
            let fc = value_grad(&cand, &mut gc);
            // accept on sufficient decrease, or once the objective is flat to
            // rounding and the gradient still shrinks
            if fc <= f - 1e-4 * t * crate::linalg::dot(&g, &step) || (fc <= f + 1e-14 * f.abs() && norm(&gc) < norm(&g)) || t < 1e-10 {
                theta.copy_from_slice(&cand);
                f = fc;
                g = gc;
                break;
            }
            t *= 0.5;
        }
    }
    let gn = norm(&g);
    Ok((gn, gn < DERIVATION_GRAD_TOL))
}

/// Compares the exact parameter change `Δ_ε = θ̂_{ε,z} − θ̂` from upweighting
/// `z` by `ε` against its first-order prediction `−H⁻¹∇L(z, θ̂) ε`, for a
/// strongly convex objective with exact Hessian-vector products.
pub fn derivation_check(obj: &dyn Objective, theta0: &[f64], z: &LabeledInstance, epsilons: &[f64]) -> Result<DerivationReport, LooError> {
    let d = obj.dim();
    let mut theta_hat = theta0.to_vec();
    let (gn, ok) = newton(obj, z, 0.0, &mut theta_hat, 200)?;
    if !ok {
        return Err(LooError::Model(format!("optimum not reached: gradient norm {gn:e}")));
    }
    let h = dense_from_hvp(d, |v| obj.hvp(&theta_hat, v, None).expect("objective provides Hessian-vector products"));
    let hz = dense_from_hvp(d, |v| obj.instance_hvp(&theta_hat, z, v).expect("objective provides instance Hessian-vector products"));
    let mut gz = vec![0.0; d];
    obj.instance_loss_grad(&theta_hat, z, &mut gz);
    let h_inv_g = solve_spd(&h, &gz, 0.0)?;

    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut theta = theta_hat.clone();
        let (grad_norm, converged) = newton(obj, z, eps, &mut theta, 200)?;
        let delta: Vec<f64> = theta.iter().zip(&theta_hat).map(|(a, b)| a - b).collect();
        let linear: Vec<f64> = h_inv_g.iter().map(|v| -eps * v).collect();
        let mut bracket = h.clone();
        for i in 0..d {
            for j in 0..d {
                bracket.set(i, j, h.get(i, j) + eps * hz.get(i, j));
            }
        }
        let rhs: Vec<f64> = gz.iter().map(|v| eps * v).collect();
        let bracketed: Vec<f64> = solve_spd(&bracket, &rhs, 0.0)?.into_iter().map(|v| -v).collect();
        let err = |p: &[f64]| norm(&delta.iter().zip(p).map(|(a, b)| a - b).collect::<Vec<_>>());
        rows.push(DerivationRow {
            epsilon: eps,
            delta_norm: norm(&delta),
            linear_error: err(&linear),
            bracketed_error: err(&bracketed),
            grad_norm,
            converged,
        });
    }
    Ok(DerivationReport { theta_hat, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::QuadraticObjective;

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0], 3), vec![1, 2, 3]);
        assert_eq!(top_k(&[5.0, 5.0], 2), vec![0, 1]);
    }

    #[test]
    fn quadratic_derivation_is_exact_for_bracketed_prediction() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap();
        let q = QuadraticObjective::new(
            a,
            vec![
                LabeledInstance::new(vec![1.0, 2.0], 0),
                LabeledInstance::new(vec![-1.0, 0.5], 0),
            ],
        );
        let z = LabeledInstance::new(vec![3.0, -1.0], 0);
        let rep = derivation_check(&q, &[0.0, 0.0], &z, &[0.0, 0.1, 0.5, -0.3]).unwrap();
        assert_eq!(rep.rows[0].delta_norm, 0.0);
        for row in &rep.rows {
            assert!(row.converged);
            assert!(row.bracketed_error < 1e-10, "{row:?}");
        }
    }
}
