use crate::data::{Dataset, Example, ParamVector};
use crate::error::{invalid, Result};
use crate::linalg::{dot, norm, scale};
use crate::model::{
    check_direction, check_point, sigmoid, softplus, Constant, LossModel, ModelKind,
    SmoothnessConstants,
};

/// `max |σ''(s)| = 1 / (6√3)`, the bound on the third derivative of the softplus.
pub(crate) const SIGMOID_SECOND_DERIV_MAX: f64 = 0.096_225_044_864_937_63;

/// Binary logistic regression without intercept:
/// `f(w, (x, y)) = ln(1 + e^{wᵀx}) − y·wᵀx` with `y ∈ {0, 1}`.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    dim: usize,
}

impl LogisticRegression {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("logistic regression needs at least one feature"));
        }
        Ok(Self { dim })
    }

    /// Constants valid for every example with `‖x‖ ≤ radius`.
    pub fn constants_for_radius(radius: f64) -> SmoothnessConstants {
        SmoothnessConstants {
            lipschitz: Constant::Finite(radius),
            beta: Constant::Finite(radius * radius / 4.0),
            rho: Constant::Finite(radius.powi(3) * SIGMOID_SECOND_DERIV_MAX),
            loss_upper_bound: Constant::Unbounded,
        }
    }
}

impl LossModel for LogisticRegression {
    fn name(&self) -> &str {
        "logistic"
    }

    fn param_dim(&self) -> usize {
        self.dim
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Convex
    }

    fn loss(&self, w: &[f64], z: &Example) -> Result<f64> {
        check_point(self, w, z)?;
        let s = dot(w, &z.features);
        Ok((softplus(s) - z.label * s).max(0.0))
    }

    fn grad(&self, w: &[f64], z: &Example) -> Result<ParamVector> {
        check_point(self, w, z)?;
        let s = dot(w, &z.features);
        Ok(scale(&z.features, sigmoid(s) - z.label).into())
    }

    fn hvp(&self, w: &[f64], z: &Example, v: &[f64]) -> Result<ParamVector> {
        check_point(self, w, z)?;
        check_direction(self, v)?;
        let p = sigmoid(dot(w, &z.features));
        let curvature = p * (1.0 - p);
        Ok(scale(&z.features, curvature * dot(&z.features, v)).into())
    }

    fn declared_constants(&self, dataset: &Dataset) -> SmoothnessConstants {
        let radius = dataset
            .iter()
            .map(|e| norm(&e.features))
            .fold(0.0, f64::max);
        Self::constants_for_radius(radius)
    }
}
