//! Matrix-free damped Hessian operator with power iteration and the LiSSA
//! inverse-HVP recursion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, dot, norm, DenseMatrix, LinalgError};
use crate::objective::Objective;
use crate::rng::RngStream;

/// Largest operator dimension that may be materialized densely.
pub const MAX_DENSE_DIM: usize = 2000;

/// Consecutive residual increases after which LiSSA gives up.
pub const LISSA_GROWTH_LIMIT: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum HessianError {
    #[error("vector has length {got}, operator dimension is {expected}")]
    Shape { expected: usize, got: usize },
    #[error("Hessian-vector product is not finite at coordinate {index}")]
    NonFinite { index: usize },
    #[error("operator dimension {dim} exceeds the dense limit of {MAX_DENSE_DIM}")]
    TooLarge { dim: usize },
    #[error("objective provides no analytic Hessian-vector product")]
    NoAnalyticHvp,
    #[error("LiSSA diverging at iteration {iteration} (residual {residual:e}); reduce scale")]
    Diverging { iteration: usize, residual: f64 },
    #[error("operator dimension is zero")]
    Empty,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HvpMethod {
    /// Exact product from forward-mode differentiation of the analytic
    /// gradient.
    #[default]
    AnalyticDoubleBackward,
    /// Central difference of gradients along `v`, step `1e-4/‖v‖`.
    GradFiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    LastLayer,
    AllParams,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::LastLayer => "last_layer",
            Scope::AllParams => "all_params",
        }
    }
}

/// `v ↦ (H + λI) v` where `H` is the Hessian of the mean training objective
/// at `theta`.
pub struct HessianOperator<'a> {
    objective: Box<dyn Objective + 'a>,
    theta: Vec<f64>,
    damping: f64,
    method: HvpMethod,
    scope: Scope,
}

impl std::fmt::Debug for HessianOperator<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HessianOperator")
            .field("dim", &self.theta.len())
            .field("damping", &self.damping)
            .field("method", &self.method)
            .field("scope", &self.scope)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenResult {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LissaConfig {
    /// Maximum recursion steps per repeat.
    pub recursion_depth: usize,
    /// Step scale `s`; `None` picks `0.9/λ_max` of the damped operator.
    pub scale: Option<f64>,
    pub repeats: usize,
    /// Stop once the relative residual of the current iterate falls below
    /// this value.
    pub convergence_tol: f64,
    /// Instances per stochastic HVP; `None` uses the full training set, in
    /// which case every repeat is identical and only one is run.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        Self {
            recursion_depth: 5000,
            scale: None,
            repeats: 4,
            convergence_tol: 1e-6,
            batch_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LissaResult {
    pub x: Vec<f64>,
    /// `‖(H + λI)x − b‖ / ‖b‖` with the full operator.
    pub residual: f64,
    /// Recursion steps of the longest repeat.
    pub iterations: usize,
    pub scale: f64,
}

impl<'a> HessianOperator<'a> {
    pub fn new(objective: Box<dyn Objective + 'a>, theta: Vec<f64>, damping: f64, method: HvpMethod, scope: Scope) -> Self {
        assert_eq!(theta.len(), objective.dim(), "theta length must match objective dimension");
        assert!(damping >= 0.0, "damping must be non-negative");
        Self {
            objective,
            theta,
            damping,
            method,
            scope,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn method(&self) -> HvpMethod {
        self.method
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }

    /// Same operator with a different damping.
    pub fn with_damping(self, damping: f64) -> Self {
        Self { damping, ..self }
    }

    pub fn with_method(self, method: HvpMethod) -> Self {
        Self { method, ..self }
    }

    pub fn n_train(&self) -> usize {
        self.objective.n_train()
    }

    /// `(H + λI) v`.
    pub fn hvp(&self, v: &[f64]) -> Result<Vec<f64>, HessianError> {
        self.hvp_subset(v, None)
    }

    /// `(H_S + λI) v` with `H_S` the Hessian of the mean objective over the
    /// training subset `S`.
    pub fn hvp_subset(&self, v: &[f64], subset: Option<&[usize]>) -> Result<Vec<f64>, HessianError> {
        if v.len() != self.dim() {
            return Err(HessianError::Shape {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let vn = norm(v);
        let mut out = if vn == 0.0 {
            vec![0.0; v.len()]
        } else {
            match self.method {
                HvpMethod::AnalyticDoubleBackward => self
                    .objective
                    .hvp(&self.theta, v, subset)
                    .ok_or(HessianError::NoAnalyticHvp)?,
                HvpMethod::GradFiniteDifference => {
                    let h = 1e-4 / vn;
                    let mut up = self.theta.clone();
                    axpy(h, v, &mut up);
                    let mut down = self.theta.clone();
                    axpy(-h, v, &mut down);
                    let gu = self.objective.grad(&up, subset);
                    let gd = self.objective.grad(&down, subset);
                    gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                }
            }
        };
        axpy(self.damping, v, &mut out);
        if let Some(index) = out.iter().position(|x| !x.is_finite()) {
            return Err(HessianError::NonFinite { index });
        }
        Ok(out)
    }

    /// Materializes `H + λI` one column at a time.
    pub fn dense_hessian(&self) -> Result<DenseMatrix, HessianError> {
        let d = self.dim();
        if d > MAX_DENSE_DIM {
            return Err(HessianError::TooLarge { dim: d });
        }
        if d == 0 {
            return Err(HessianError::Empty);
        }
        let mut cols = Vec::with_capacity(d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            cols.push(self.hvp(&e)?);
            e[j] = 0.0;
        }
        Ok(DenseMatrix::from_columns(&cols)?)
    }

    /// Power iteration on the operator as configured (including its
    /// damping) from a seeded random start. Returns the Rayleigh quotient
    /// of the final iterate.
    pub fn top_eigenvalue(&self, max_iters: usize, tol: f64, seed: u64) -> Result<EigenResult, HessianError> {
        let d = self.dim();
        if d == 0 {
            return Err(HessianError::Empty);
        }
        let mut v = RngStream::new(seed).normal(d);
        let n0 = norm(&v);
        v.iter_mut().for_each(|x| *x /= n0);
        let mut prev = f64::NAN;
        let mut lambda = 0.0;
        for k in 1..=max_iters.max(1) {
            let w = self.hvp(&v)?;
            lambda = dot(&v, &w);
            let wn = norm(&w);
            if wn == 0.0 {
                return Ok(EigenResult {
                    value: 0.0,
                    vector: v,
                    iterations: k,
                    converged: true,
                });
            }
            if (lambda - prev).abs() <= tol * lambda.abs() {
                return Ok(EigenResult {
                    value: lambda,
                    vector: v,
                    iterations: k,
                    converged: true,
                });
            }
            prev = lambda;
            v = w.into_iter().map(|x| x / wn).collect();
        }
        Ok(EigenResult {
            value: lambda,
            vector: v,
            iterations: max_iters,
            converged: false,
        })
    }

    fn relative_residual(&self, x: &[f64], b: &[f64]) -> Result<f64, HessianError> {
        let mut r = self.hvp(x)?;
        axpy(-1.0, b, &mut r);
        Ok(norm(&r) / norm(b))
    }

    /// Approximates `(H + λI)⁻¹ b` with the recursion
    /// `x_{j+1} = b + (I − s(H + λI)) x_j`, `x_0 = b`, returning `s·x_J`
    /// averaged over repeats.
    pub fn lissa_inverse_hvp(&self, b: &[f64], cfg: &LissaConfig) -> Result<LissaResult, HessianError> {
        if b.len() != self.dim() {
            return Err(HessianError::Shape {
                expected: self.dim(),
                got: b.len(),
            });
        }
        let bn = norm(b);
        let scale = match cfg.scale {
            Some(s) => s,
            None => {
                let top = self.top_eigenvalue(1000, 1e-6, cfg.seed)?;
                0.9 / top.value.abs().max(f64::MIN_POSITIVE)
            }
        };
        if bn == 0.0 {
            return Ok(LissaResult {
                x: vec![0.0; b.len()],
                residual: 0.0,
                iterations: 0,
                scale,
            });
        }
        let n = self.n_train();
        let stochastic = cfg.batch_size.filter(|&m| m < n);
        let repeats = if stochastic.is_some() { cfg.repeats.max(1) } else { 1 };
        let root = RngStream::new(cfg.seed);
        let mut sum = vec![0.0; b.len()];
        let mut max_iters = 0;
        for r in 0..repeats {
            let mut stream = root.split(r as u64);
            let mut x = b.to_vec();
            let mut last = f64::INFINITY;
            let mut growth = 0;
            let mut iters = 0;
            let mut batch = vec![0usize; stochastic.unwrap_or(0)];
            for j in 0..cfg.recursion_depth {
                let hx = match stochastic {
                    Some(_) => {
                        batch.iter_mut().for_each(|i| *i = stream.index(n));
                        self.hvp_subset(&x, Some(&batch))?
                    }
                    None => self.hvp(&x)?,
                };
                // x_{j+1} − x_j = b − s(H+λI)x_j, the residual of s·x_j
                let mut delta = b.to_vec();
                axpy(-scale, &hx, &mut delta);
                let res = norm(&delta) / bn;
                iters = j + 1;
                if !res.is_finite() {
                    return Err(HessianError::Diverging { iteration: j, residual: res });
                }
                if res > last {
                    growth += 1;
                    if growth >= LISSA_GROWTH_LIMIT {
                        return Err(HessianError::Diverging { iteration: j, residual: res });
                    }
                } else {
                    growth = 0;
                }
                last = res;
                if stochastic.is_none() && res < cfg.convergence_tol {
                    break;
                }
                axpy(1.0, &delta, &mut x);
            }
            max_iters = max_iters.max(iters);
            axpy(1.0, &x, &mut sum);
        }
        let x: Vec<f64> = sum.into_iter().map(|v| scale * v / repeats as f64).collect();
        let residual = self.relative_residual(&x, b)?;
        Ok(LissaResult {
            x,
            residual,
            iterations: max_iters,
            scale,
        })
    }

    /// `(H + λI)⁻¹ b` by Cholesky on the symmetrized dense operator.
    pub fn direct_inverse_hvp(&self, b: &[f64]) -> Result<(Vec<f64>, f64), HessianError> {
        let mut h = self.dense_hessian()?;
        h.symmetrize();
        // an indefinite damped Hessian still has a well-defined inverse
        let x = match crate::linalg::solve_spd(&h, b, 0.0) {
            Err(LinalgError::NotPositiveDefinite { .. }) => crate::linalg::solve_general(&h, b)?,
            other => other?,
        };
        let residual = if norm(b) == 0.0 { 0.0 } else { self.relative_residual(&x, b)? };
        Ok((x, residual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledInstance;
    use crate::linalg::{dense_eigh_max, relative_error};
    use crate::objective::QuadraticObjective;

    fn quad(diag: &[f64]) -> QuadraticObjective {
        let a = DenseMatrix::from_diagonal(diag);
        QuadraticObjective::new(a, vec![LabeledInstance::new(vec![0.0; diag.len()], 0)])
    }

    fn op(q: &QuadraticObjective, damping: f64) -> HessianOperator<'_> {
        HessianOperator::new(Box::new(q), vec![0.3; q.dim()], damping, HvpMethod::AnalyticDoubleBackward, Scope::AllParams)
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let q = quad(&[1.0, 2.0]);
        assert_eq!(op(&q, 0.1).hvp(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(op(&q, 0.1).hvp(&[1.0]), Err(HessianError::Shape { .. })));
    }

    #[test]
    fn dense_quadratic_is_a_plus_damping() {
        let a = DenseMatrix::from_rows(&[vec![3.0, 1.0, 0.0], vec![1.0, 2.0, 0.5], vec![0.0, 0.5, 1.0]]).unwrap();
        let q = QuadraticObjective::new(a.clone(), vec![LabeledInstance::new(vec![1.0, 0.0, 2.0], 0)]);
        for method in [HvpMethod::AnalyticDoubleBackward, HvpMethod::GradFiniteDifference] {
            let h = op(&q, 0.2).with_method(method).dense_hessian().unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let expect = a.get(i, j) + if i == j { 0.2 } else { 0.0 };
                    assert!((h.get(i, j) - expect).abs() < 1e-6);
                }
            }
        }
        let z = quad(&[0.0, 0.0, 0.0]);
        let h = op(&z, 5.0).dense_hessian().unwrap();
        assert_eq!(h, DenseMatrix::from_diagonal(&[5.0; 3]));
    }

    #[test]
    fn power_iteration_examples() {
        let q = quad(&[1.0, 2.0, 10.0]);
        let e = op(&q, 0.0).top_eigenvalue(1000, 1e-10, 1).unwrap();
        assert!(e.converged);
        assert!((e.value - 10.0).abs() < 1e-8);
        assert!((norm(&e.vector) - 1.0).abs() < 1e-12);

        let zero = quad(&[0.0, 0.0]);
        let e = op(&zero, 0.0).top_eigenvalue(100, 1e-10, 1).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.converged);

        // damping shifts the spectrum
        let e = op(&q, 0.5).top_eigenvalue(1000, 1e-10, 1).unwrap();
        assert!((e.value - 10.5).abs() < 1e-8);

        // budget exhausted on a nearly degenerate top pair
        let close = quad(&[1.0, 1.0 + 1e-9]);
        let e = op(&close, 0.0).top_eigenvalue(1, 0.0, 2).unwrap();
        assert!(!e.converged);
    }

    #[test]
    fn power_iteration_matches_dense_oracle_on_random_spd() {
        let mut r = RngStream::new(3);
        let d = 12;
        let b = DenseMatrix::new(d, d, r.normal(d * d)).unwrap();
        let mut a = DenseMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let s: f64 = (0..d).map(|k| b.get(k, i) * b.get(k, j)).sum();
                a.set(i, j, s);
            }
        }
        let q = QuadraticObjective::new(a.clone(), vec![LabeledInstance::new(vec![0.0; d], 0)]);
        let (oracle, _) = dense_eigh_max(&a).unwrap();
        let e = op(&q, 0.0).top_eigenvalue(10_000, 1e-12, 4).unwrap();
        assert!((e.value - oracle).abs() < 1e-3 * oracle);
    }

    #[test]
    fn lissa_examples() {
        let q = quad(&[0.0, 0.0, 0.0]);
        let cfg = LissaConfig {
            scale: Some(0.5),
            ..LissaConfig::default()
        };
        let r = op(&q, 1.0).lissa_inverse_hvp(&[1.0, -2.0, 3.0], &cfg).unwrap();
        assert!(relative_error(&r.x, &[1.0, -2.0, 3.0]) < 1e-6);
        let r = op(&q, 1.0).lissa_inverse_hvp(&[0.0; 3], &cfg).unwrap();
        assert_eq!(r.x, vec![0.0; 3]);

        let q = quad(&[1.0, 4.0, 0.5]);
        let b = [1.0, 1.0, 1.0];
        let r = op(&q, 0.01).lissa_inverse_hvp(&b, &LissaConfig::default()).unwrap();
        let (direct, _) = op(&q, 0.01).direct_inverse_hvp(&b).unwrap();
        assert!(relative_error(&r.x, &direct) < 1e-5);
        assert!(r.residual < 1e-5);
    }

    #[test]
    fn lissa_reports_divergence() {
        let q = quad(&[1.0, 4.0]);
        let cfg = LissaConfig {
            scale: Some(1.0),
            ..LissaConfig::default()
        };
        assert!(matches!(
            op(&q, 0.0).lissa_inverse_hvp(&[1.0, 1.0], &cfg),
            Err(HessianError::Diverging { .. })
        ));
    }
}
