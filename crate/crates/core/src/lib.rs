//! Stability-based generalization analysis for SGD.
//!
//! Loss models with analytic gradients and Hessian-vector products, a
//! without-replacement SGD engine with coupled paired runs, power-iteration
//! curvature estimates, measurement estimators and closed-form bounds.

pub mod bounds;
pub mod curvature;
pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod model;
pub mod sgd;
pub mod synthetic;

pub use data::{Dataset, Example, ParamFile, ParamVector};
pub use error::{Error, Result};
pub use model::{Constant, LogisticRegression, LossHead, LossModel, ModelKind, Quadratic, SmoothnessConstants, TanhMlp};
