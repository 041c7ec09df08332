//! Per-example loss models and their smoothness constants.
//!
//! Every model evaluates `f(w, z)`, its gradient in `w`, and Hessian-vector
//! products without forming the Hessian. [`dense_hessian`] assembles the full
//! matrix column by column for verification at small sizes.

mod logistic;
mod mlp;
mod quadratic;

pub use logistic::LogisticRegression;
pub use mlp::{LossHead, MlpLayout, TanhMlp};
pub use quadratic::Quadratic;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Default cap on the parameter dimension for dense Hessian assembly.
pub const DENSE_ORACLE_LIMIT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Convex,
    Nonconvex,
}

/// A constant that may be a finite number, provably unbounded, or left to
/// empirical estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constant {
    Finite(f64),
    Unbounded,
    Empirical,
}

impl Constant {
    pub fn finite(self) -> Option<f64> {
        match self {
            Constant::Finite(v) => Some(v),
            _ => None,
        }
    }
}

/// Lipschitz constant `L`, gradient Lipschitz constant `beta`, Hessian
/// Lipschitz constant `rho` and loss upper bound `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub lipschitz: Constant,
    pub beta: Constant,
    pub rho: Constant,
    pub loss_upper_bound: Constant,
}

/// A differentiable, non-negative per-example loss.
///
/// Implementations are immutable after construction and safe to share
/// across threads.
pub trait LossModel: Send + Sync {
    fn name(&self) -> &str;

    /// Number of parameters `p`.
    fn param_dim(&self) -> usize;

    /// Feature dimension `d` of the examples this model accepts.
    fn input_dim(&self) -> usize;

    fn kind(&self) -> ModelKind;

    fn loss(&self, w: &[f64], z: &Example) -> Result<f64>;

    fn grad(&self, w: &[f64], z: &Example) -> Result<ParamVector>;

    /// `∇²f(w, z) · v`
    fn hvp(&self, w: &[f64], z: &Example, v: &[f64]) -> Result<ParamVector>;

    fn declared_constants(&self, dataset: &Dataset) -> SmoothnessConstants;
}

pub(crate) fn check_point(model: &dyn LossModel, w: &[f64], z: &Example) -> Result<()> {
    if w.len() != model.param_dim() {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected: model.param_dim(),
            got: w.len(),
        });
    }
    if z.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "example features",
            expected: model.input_dim(),
            got: z.dim(),
        });
    }
    Ok(())
}

pub(crate) fn check_direction(model: &dyn LossModel, v: &[f64]) -> Result<()> {
    if v.len() != model.param_dim() {
        return Err(Error::DimensionMismatch {
            what: "direction vector",
            expected: model.param_dim(),
            got: v.len(),
        });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("direction vector is not finite".into()));
    }
    Ok(())
}

/// Dense Hessian `∇²f(w, z)` whose column `j` is `hvp(w, z, e_j)`.
///
/// Refuses when the parameter dimension exceeds `limit`.
pub fn dense_hessian(
    model: &dyn LossModel,
    w: &[f64],
    z: &Example,
    limit: usize,
) -> Result<DenseMatrix> {
    let p = model.param_dim();
    if p > limit {
        return Err(Error::OracleLimit { dim: p, limit });
    }
    let mut h = DenseMatrix::zeros(p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e[j] = 1.0;
        let col = model.hvp(w, z, &e)?;
        for (i, v) in col.iter().enumerate() {
            h.set(i, j, *v);
        }
        e[j] = 0.0;
    }
    Ok(h)
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^s)` without overflow.
pub(crate) fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}
