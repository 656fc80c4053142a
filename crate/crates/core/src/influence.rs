//! Influence of upweighting a training instance on the parameters and on the
//! loss at a test instance.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::LabeledInstance;
use crate::hessian::{HessianError, HessianOperator, LissaConfig};
use crate::linalg::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SolveMethod {
    DirectSolve,
    Lissa(LissaConfig),
}

impl SolveMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SolveMethod::DirectSolve => "direct_solve",
            SolveMethod::Lissa(_) => "lissa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub train_index: usize,
    pub test_index: usize,
    /// `−∇L(z_test)ᵀ (H + λI)⁻¹ ∇L(z)`.
    pub i_up_loss: f64,
    /// Predicted `L(z_test, θ̂₋z) − L(z_test, θ̂)`, i.e. `ε · i_up_loss`.
    pub approx_loss_diff: f64,
    pub method: String,
    /// Upweighting step equivalent to removing one instance, `−1/n`.
    pub epsilon: f64,
    pub scope: String,
    /// Relative residual of the inverse-HVP solve.
    pub residual: f64,
}

pub const INFLUENCE_CSV_HEADER: &str = "train_index,test_index,i_up_loss,approx_loss_diff,method,epsilon,scope,residual";

pub fn write_influence_csv<W: Write>(records: &[InfluenceRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{INFLUENCE_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{:e},{:e},{},{:e},{},{:e}",
            r.train_index, r.test_index, r.i_up_loss, r.approx_loss_diff, r.method, r.epsilon, r.scope, r.residual
        )?;
    }
    Ok(())
}

/// `ε = −1/n`: removing one of `n` instances.
pub fn removal_epsilon(n_train: usize) -> f64 {
    -1.0 / n_train as f64
}

/// Solves `(H + λI) x = b`, returning `x` and its relative residual.
pub fn inverse_hvp(op: &HessianOperator<'_>, b: &[f64], method: &SolveMethod) -> Result<(Vec<f64>, f64), HessianError> {
    match method {
        SolveMethod::DirectSolve => op.direct_inverse_hvp(b),
        SolveMethod::Lissa(cfg) => {
            let r = op.lissa_inverse_hvp(b, cfg)?;
            Ok((r.x, r.residual))
        }
    }
}

fn instance_grad(op: &HessianOperator<'_>, z: &LabeledInstance) -> Vec<f64> {
    let mut g = vec![0.0; op.dim()];
    op.objective().instance_loss_grad(op.theta(), z, &mut g);
    g
}

fn train_grad(op: &HessianOperator<'_>, i: usize) -> Vec<f64> {
    let mut g = vec![0.0; op.dim()];
    op.objective().train_instance_loss_grad(op.theta(), i, &mut g);
    g
}

/// `−(H + λI)⁻¹ ∇L(z, θ̂)`.
pub fn influence_up_params(op: &HessianOperator<'_>, z: &LabeledInstance, method: &SolveMethod) -> Result<Vec<f64>, HessianError> {
    let (x, _) = inverse_hvp(op, &instance_grad(op, z), method)?;
    Ok(x.into_iter().map(|v| -v).collect())
}

/// Influence of upweighting training instance `train_index` on the loss at
/// `z_test`.
pub fn influence_up_loss(
    op: &HessianOperator<'_>,
    train_index: usize,
    z_test: &LabeledInstance,
    test_index: usize,
    method: &SolveMethod,
) -> Result<InfluenceRecord, HessianError> {
    let g = train_grad(op, train_index);
    let (x, residual) = inverse_hvp(op, &g, method)?;
    let i_up_loss = -dot(&instance_grad(op, z_test), &x);
    Ok(record(op, train_index, test_index, i_up_loss, method, residual))
}

/// [`influence_up_loss`] for many training instances against one test
/// instance with a single solve, using the symmetry of `H + λI`:
/// `s_test = (H + λI)⁻¹ ∇L(z_test)` and `i_up_loss(z) = −s_testᵀ ∇L(z)`.
pub fn influence_up_loss_batch(
    op: &HessianOperator<'_>,
    train_indices: &[usize],
    z_test: &LabeledInstance,
    test_index: usize,
    method: &SolveMethod,
) -> Result<Vec<InfluenceRecord>, HessianError> {
    let (s_test, residual) = inverse_hvp(op, &instance_grad(op, z_test), method)?;
    Ok(train_indices
        .iter()
        .map(|&i| {
            let i_up_loss = -dot(&s_test, &train_grad(op, i));
            record(op, i, test_index, i_up_loss, method, residual)
        })
        .collect())
}

fn record(op: &HessianOperator<'_>, train_index: usize, test_index: usize, i_up_loss: f64, method: &SolveMethod, residual: f64) -> InfluenceRecord {
    let epsilon = removal_epsilon(op.n_train());
    InfluenceRecord {
        train_index,
        test_index,
        i_up_loss,
        approx_loss_diff: epsilon * i_up_loss,
        method: method.name().to_string(),
        epsilon,
        scope: op.scope().name().to_string(),
        residual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::{HvpMethod, Scope};
    use crate::linalg::DenseMatrix;
    use crate::objective::{Objective, QuadraticObjective};

    fn setup() -> QuadraticObjective {
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        QuadraticObjective::new(
            a,
            vec![
                LabeledInstance::new(vec![1.0, 0.0], 0),
                LabeledInstance::new(vec![0.0, 2.0], 0),
                LabeledInstance::new(vec![-1.0, 1.0], 0),
            ],
        )
    }

    #[test]
    fn quadratic_influence_examples() {
        let q = setup();
        let theta = q.minimizer();
        let op = HessianOperator::new(Box::new(&q), theta.clone(), 0.01, HvpMethod::AnalyticDoubleBackward, Scope::AllParams);
        let m = SolveMethod::DirectSolve;

        // a point sitting on θ̂ has zero gradient
        let at_opt = LabeledInstance::new(theta.clone(), 0);
        assert!(influence_up_params(&op, &at_opt, &m).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(influence_up_loss(&op, 0, &at_opt, 0, &m).unwrap().i_up_loss, 0.0);

        let r01 = influence_up_loss(&op, 0, op.objective().instance(1), 1, &m).unwrap();
        let r10 = influence_up_loss(&op, 1, op.objective().instance(0), 0, &m).unwrap();
        assert!((r01.i_up_loss - r10.i_up_loss).abs() < 1e-8 * r01.i_up_loss.abs());
        let self_inf = influence_up_loss(&op, 2, op.objective().instance(2), 2, &m).unwrap();
        // upweighting a point lowers its own loss: −gᵀ(H+λI)⁻¹g < 0
        assert!(self_inf.i_up_loss < 0.0);
        assert!(self_inf.approx_loss_diff > 0.0);

        assert_eq!(r01.epsilon, -1.0 / 3.0);
        assert!((r01.approx_loss_diff - r01.epsilon * r01.i_up_loss).abs() < 1e-18);

        let batch = influence_up_loss_batch(&op, &[0, 2], op.objective().instance(1), 1, &m).unwrap();
        assert!((batch[0].i_up_loss - r01.i_up_loss).abs() < 1e-12);

        // both code paths agree
        let up = influence_up_params(&op, op.objective().instance(0), &m).unwrap();
        let mut gt = vec![0.0; 2];
        q.instance_loss_grad(&theta, op.objective().instance(1), &mut gt);
        assert!((dot(&gt, &up) - r01.i_up_loss).abs() < 1e-10);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let q = setup();
        let op = HessianOperator::new(Box::new(&q), q.minimizer(), 0.01, HvpMethod::AnalyticDoubleBackward, Scope::LastLayer);
        let recs = influence_up_loss_batch(&op, &[0, 1, 2], q.instance(0), 0, &SolveMethod::DirectSolve).unwrap();
        let mut buf = Vec::new();
        write_influence_csv(&recs, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with(INFLUENCE_CSV_HEADER));
        assert_eq!(s.lines().count(), 4);
        assert!(s.lines().nth(1).unwrap().contains(",direct_solve,"));
        assert!(s.lines().nth(1).unwrap().contains(",last_layer,"));
    }
}
