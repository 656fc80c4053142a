//! Influence-function estimation for small neural classifiers, with
//! leave-one-out retraining as ground truth.

pub mod bnn;
pub mod checkpoint;
pub mod data;
pub mod hessian;
pub mod influence;
pub mod linalg;
pub mod loo;
pub mod mlp;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod training;
