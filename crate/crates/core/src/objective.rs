//! Differentiable training objectives over a flat parameter vector.
//!
//! Every trainer, Hessian operator and influence estimator in the crate
//! talks to models through [`Objective`]. A full network, its last layer with
//! frozen features, and synthetic quadratics all implement it.

use crate::data::LabeledInstance;
use crate::linalg::DenseMatrix;

pub trait Objective: Sync {
    /// Number of parameters the objective is defined over.
    fn dim(&self) -> usize;

    /// Number of training instances.
    fn n_train(&self) -> usize;

    /// Mean training loss over `subset` (every instance when `None`) plus the
    /// regularizer. Overwrites `grad` with the gradient.
    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64;

    fn loss(&self, theta: &[f64], subset: Option<&[usize]>) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.loss_grad(theta, subset, &mut g)
    }

    fn grad(&self, theta: &[f64], subset: Option<&[usize]>) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.loss_grad(theta, subset, &mut g);
        g
    }

    /// Exact Hessian-vector product of the training objective, if the
    /// objective can provide one.
    fn hvp(&self, _theta: &[f64], _v: &[f64], _subset: Option<&[usize]>) -> Option<Vec<f64>> {
        None
    }

    /// Unregularized loss `L(z, θ)` of any instance and its gradient.
    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64;

    fn instance_loss(&self, theta: &[f64], z: &LabeledInstance) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.instance_loss_grad(theta, z, &mut g)
    }

    /// Training instance `i`.
    fn instance(&self, i: usize) -> &LabeledInstance;

    /// Unregularized loss and gradient of training instance `i`.
    fn train_instance_loss_grad(&self, theta: &[f64], i: usize, grad: &mut [f64]) -> f64 {
        self.instance_loss_grad(theta, self.instance(i), grad)
    }

    /// Exact `∇²L(z, θ) v` for a single instance, if available.
    fn instance_hvp(&self, _theta: &[f64], _z: &LabeledInstance, _v: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_train(&self) -> usize {
        (**self).n_train()
    }
    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        (**self).loss_grad(theta, subset, grad)
    }
    fn hvp(&self, theta: &[f64], v: &[f64], subset: Option<&[usize]>) -> Option<Vec<f64>> {
        (**self).hvp(theta, v, subset)
    }
    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        (**self).instance_loss_grad(theta, z, grad)
    }
    fn instance(&self, i: usize) -> &LabeledInstance {
        (**self).instance(i)
    }
    fn train_instance_loss_grad(&self, theta: &[f64], i: usize, grad: &mut [f64]) -> f64 {
        (**self).train_instance_loss_grad(theta, i, grad)
    }
    fn instance_hvp(&self, theta: &[f64], z: &LabeledInstance, v: &[f64]) -> Option<Vec<f64>> {
        (**self).instance_hvp(theta, z, v)
    }
}

/// `R(θ) = 1/n Σ ½ (θ − x_i)ᵀ A (θ − x_i)`, one center per instance.
///
/// Its Hessian is `A` everywhere, which makes it the analytic reference for
/// Hessian, spectral and perturbation checks.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    a: DenseMatrix,
    centers: Vec<LabeledInstance>,
}

impl QuadraticObjective {
    pub fn new(a: DenseMatrix, centers: Vec<LabeledInstance>) -> Self {
        assert!(a.is_square(), "quadratic form must be square");
        assert!(centers.iter().all(|c| c.features.len() == a.rows()));
        Self { a, centers }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    /// Minimizer `mean(x_i)` when `A` is positive definite.
    pub fn minimizer(&self) -> Vec<f64> {
        let d = self.a.rows();
        let mut m = vec![0.0; d];
        for c in &self.centers {
            for (mi, x) in m.iter_mut().zip(&c.features) {
                *mi += x;
            }
        }
        let n = self.centers.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    fn point_loss_grad(&self, theta: &[f64], center: &[f64], weight: f64, grad: &mut [f64]) -> f64 {
        let r: Vec<f64> = theta.iter().zip(center).map(|(t, c)| t - c).collect();
        let ar = self.a.matvec(&r).expect("dimension checked at construction");
        for (g, v) in grad.iter_mut().zip(&ar) {
            *g += weight * v;
        }
        0.5 * weight * crate::linalg::dot(&r, &ar)
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn n_train(&self) -> usize {
        self.centers.len()
    }

    fn loss_grad(&self, theta: &[f64], subset: Option<&[usize]>, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let idx: Vec<usize> = subset.map_or_else(|| (0..self.centers.len()).collect(), <[usize]>::to_vec);
        let w = 1.0 / idx.len().max(1) as f64;
        idx.iter()
            .map(|&i| self.point_loss_grad(theta, &self.centers[i].features, w, grad))
            .sum()
    }

    fn hvp(&self, _theta: &[f64], v: &[f64], _subset: Option<&[usize]>) -> Option<Vec<f64>> {
        self.a.matvec(v).ok()
    }

    fn instance_loss_grad(&self, theta: &[f64], z: &LabeledInstance, grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.point_loss_grad(theta, &z.features, 1.0, grad)
    }

    fn instance(&self, i: usize) -> &LabeledInstance {
        &self.centers[i]
    }

    fn instance_hvp(&self, _theta: &[f64], _z: &LabeledInstance, v: &[f64]) -> Option<Vec<f64>> {
        self.a.matvec(v).ok()
    }
}
