use crate::data::{Dataset, Example, ParamVector};
use crate::error::{invalid, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::model::{check_direction, check_point, Constant, LossModel, ModelKind, SmoothnessConstants};

/// `f(w, z) = ½ (w − x)ᵀ A (w − x)` for a symmetric positive semi-definite `A`.
///
/// The label is ignored. With `x = 0` this is the plain quadratic `½ wᵀAw`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: DenseMatrix,
    a_norm: f64,
}

impl Quadratic {
    pub fn new(a: DenseMatrix) -> Result<Self> {
        if a.dim() == 0 {
            return Err(invalid("quadratic model needs a non-empty matrix"));
        }
        if a.asymmetry() > 1e-12 {
            return Err(invalid("quadratic model matrix must be symmetric"));
        }
        let eig = a.symmetric_eigenvalues();
        let scale = eig.iter().fold(1.0f64, |m, l| m.max(l.abs()));
        if eig[0] < -1e-12 * scale {
            return Err(invalid("quadratic model matrix must be positive semi-definite"));
        }
        let a_norm = eig.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        Ok(Self { a, a_norm })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DenseMatrix::from_diag(diag))
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::diagonal(&vec![1.0; d])
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn spectral_norm(&self) -> f64 {
        self.a_norm
    }
}

impl LossModel for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn param_dim(&self) -> usize {
        self.a.dim()
    }

    fn input_dim(&self) -> usize {
        self.a.dim()
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Convex
    }

    fn loss(&self, w: &[f64], z: &Example) -> Result<f64> {
        check_point(self, w, z)?;
        let u: Vec<f64> = w.iter().zip(&z.features).map(|(a, b)| a - b).collect();
        Ok((0.5 * dot(&u, &self.a.matvec(&u))).max(0.0))
    }

    fn grad(&self, w: &[f64], z: &Example) -> Result<ParamVector> {
        check_point(self, w, z)?;
        let u: Vec<f64> = w.iter().zip(&z.features).map(|(a, b)| a - b).collect();
        Ok(self.a.matvec(&u).into())
    }

    fn hvp(&self, w: &[f64], z: &Example, v: &[f64]) -> Result<ParamVector> {
        check_point(self, w, z)?;
        check_direction(self, v)?;
        Ok(self.a.matvec(v).into())
    }

    fn declared_constants(&self, _dataset: &Dataset) -> SmoothnessConstants {
        SmoothnessConstants {
            lipschitz: Constant::Unbounded,
            beta: Constant::Finite(self.a_norm),
            rho: Constant::Finite(0.0),
            loss_upper_bound: Constant::Unbounded,
        }
    }
}
