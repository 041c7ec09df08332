//! One-hidden-layer tanh network with a scalar output.
//!
//! Parameters are laid out as `[W1 (h×d, row-major), b1 (h), w2 (h), b2]`.
//! Hessian-vector products use the forward-over-reverse (R-operator) rule:
//! the directional derivative of every forward quantity is propagated
//! alongside the ordinary backward pass.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, ParamVector};
use crate::error::{invalid, Result};
use crate::linalg::norm;
use crate::model::{
    check_direction, check_point, logistic::SIGMOID_SECOND_DERIV_MAX, sigmoid, softplus, Constant,
    LossModel, ModelKind, SmoothnessConstants,
};

/// `max |tanh''|`
const TANH_SECOND_DERIV_MAX: f64 = 0.769_800_358_919_501_3;
/// `max |tanh'''|`
const TANH_THIRD_DERIV_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossHead {
    /// `½ (o − y)²`
    Squared,
    /// `ln(1 + e^o) − y·o`, labels in `[0, 1]`
    CrossEntropy,
}

impl LossHead {
    fn value(self, o: f64, y: f64) -> f64 {
        match self {
            LossHead::Squared => 0.5 * (o - y) * (o - y),
            LossHead::CrossEntropy => (softplus(o) - y * o).max(0.0),
        }
    }

    fn first(self, o: f64, y: f64) -> f64 {
        match self {
            LossHead::Squared => o - y,
            LossHead::CrossEntropy => sigmoid(o) - y,
        }
    }

    fn second(self, o: f64) -> f64 {
        match self {
            LossHead::Squared => 1.0,
            LossHead::CrossEntropy => {
                let p = sigmoid(o);
                p * (1.0 - p)
            }
        }
    }
}

/// Index ranges of each parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpLayout {
    pub input: usize,
    pub hidden: usize,
}

impl MlpLayout {
    pub fn param_dim(&self) -> usize {
        self.hidden * self.input + 2 * self.hidden + 1
    }

    fn b1(&self) -> usize {
        self.hidden * self.input
    }

    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }

    fn b2(&self) -> usize {
        self.w2() + self.hidden
    }
}

/// `o(x) = w2ᵀ tanh(W1 x + b1) + b2` followed by a [`LossHead`].
#[derive(Debug, Clone)]
pub struct TanhMlp {
    layout: MlpLayout,
    head: LossHead,
    weight_box: Option<f64>,
    label_bound: f64,
}

struct Forward {
    hidden: Vec<f64>,
    output: f64,
}

impl TanhMlp {
    pub fn new(input: usize, hidden: usize, head: LossHead) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(invalid("tanh MLP needs positive input and hidden sizes"));
        }
        Ok(Self {
            layout: MlpLayout { input, hidden },
            head,
            weight_box: None,
            label_bound: 1.0,
        })
    }

    /// Declare that every parameter satisfies `|w_k| ≤ bound` and every label
    /// `|y| ≤ label_bound`; constants are then derived from these boxes.
    pub fn with_weight_box(mut self, bound: f64, label_bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) || !(label_bound >= 0.0 && label_bound.is_finite()) {
            return Err(invalid("weight box and label bound must be positive and finite"));
        }
        self.weight_box = Some(bound);
        self.label_bound = label_bound;
        Ok(self)
    }

    pub fn layout(&self) -> MlpLayout {
        self.layout
    }

    pub fn head(&self) -> LossHead {
        self.head
    }

    pub fn weight_box(&self) -> Option<f64> {
        self.weight_box
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> Forward {
        let MlpLayout { input, hidden } = self.layout;
        let b1 = &w[self.layout.b1()..self.layout.w2()];
        let w2 = &w[self.layout.w2()..self.layout.b2()];
        let mut u = Vec::with_capacity(hidden);
        let mut o = w[self.layout.b2()];
        for j in 0..hidden {
            let row = &w[j * input..(j + 1) * input];
            let a: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1[j];
            let t = a.tanh();
            o += w2[j] * t;
            u.push(t);
        }
        Forward {
            hidden: u,
            output: o,
        }
    }

    /// Network output before the loss head.
    pub fn output(&self, w: &[f64], x: &[f64]) -> Result<f64> {
        let z = Example {
            features: x.to_vec(),
            label: 0.0,
        };
        check_point(self, w, &z)?;
        Ok(self.forward(w, x).output)
    }
}

impl LossModel for TanhMlp {
    fn name(&self) -> &str {
        "tanh_mlp"
    }

    fn param_dim(&self) -> usize {
        self.layout.param_dim()
    }

    fn input_dim(&self) -> usize {
        self.layout.input
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Nonconvex
    }

    fn loss(&self, w: &[f64], z: &Example) -> Result<f64> {
        check_point(self, w, z)?;
        let f = self.forward(w, &z.features);
        Ok(self.head.value(f.output, z.label))
    }

    fn grad(&self, w: &[f64], z: &Example) -> Result<ParamVector> {
        check_point(self, w, z)?;
        let MlpLayout { input, hidden } = self.layout;
        let x = &z.features;
        let f = self.forward(w, x);
        let g_o = self.head.first(f.output, z.label);
        let w2 = &w[self.layout.w2()..self.layout.b2()];
        let mut g = vec![0.0; self.param_dim()];
        for j in 0..hidden {
            let u = f.hidden[j];
            let delta = g_o * w2[j] * (1.0 - u * u);
            for k in 0..input {
                g[j * input + k] = delta * x[k];
            }
            g[self.layout.b1() + j] = delta;
            g[self.layout.w2() + j] = g_o * u;
        }
        g[self.layout.b2()] = g_o;
        Ok(g.into())
    }

    fn hvp(&self, w: &[f64], z: &Example, v: &[f64]) -> Result<ParamVector> {
        check_point(self, w, z)?;
        check_direction(self, v)?;
        let MlpLayout { input, hidden } = self.layout;
        let x = &z.features;
        let f = self.forward(w, x);
        let w2 = &w[self.layout.w2()..self.layout.b2()];
        let v_b1 = &v[self.layout.b1()..self.layout.w2()];
        let v_w2 = &v[self.layout.w2()..self.layout.b2()];
        let v_b2 = v[self.layout.b2()];

        // Forward R-pass: directional derivatives of pre-activations, hidden
        // units and the output.
        let mut r_u = Vec::with_capacity(hidden);
        let mut r_o = v_b2;
        for j in 0..hidden {
            let row = &v[j * input..(j + 1) * input];
            let r_a: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + v_b1[j];
            let u = f.hidden[j];
            let ru = (1.0 - u * u) * r_a;
            r_o += v_w2[j] * u + w2[j] * ru;
            r_u.push(ru);
        }

        let g_o = self.head.first(f.output, z.label);
        let r_g_o = self.head.second(f.output) * r_o;

        // Backward R-pass.
        let mut out = vec![0.0; self.param_dim()];
        for j in 0..hidden {
            let u = f.hidden[j];
            let t1 = 1.0 - u * u;
            let r_delta = r_g_o * w2[j] * t1 + g_o * v_w2[j] * t1 - 2.0 * g_o * w2[j] * u * r_u[j];
            for k in 0..input {
                out[j * input + k] = r_delta * x[k];
            }
            out[self.layout.b1() + j] = r_delta;
            out[self.layout.w2() + j] = r_g_o * u + g_o * r_u[j];
        }
        out[self.layout.b2()] = r_g_o;
        Ok(out.into())
    }

    /// Box-derived constants when a weight box is declared, otherwise the
    /// empirical sentinel for `L`, `beta`, `rho`.
    ///
    /// With `|w_k| ≤ W`, `X̃ = sqrt(max‖x‖² + 1)`, output `|o| ≤ W(h+1)` and
    /// `‖∇o‖² ≤ h + 1 + hW²X̃²`. The Hessian and third derivative of `o` are
    /// block diagonal over hidden units, which gives the per-block bounds used
    /// for `beta` and `rho`.
    fn declared_constants(&self, dataset: &Dataset) -> SmoothnessConstants {
        let Some(wb) = self.weight_box else {
            return SmoothnessConstants {
                lipschitz: Constant::Empirical,
                beta: Constant::Empirical,
                rho: Constant::Empirical,
                loss_upper_bound: Constant::Empirical,
            };
        };
        let h = self.layout.hidden as f64;
        let x_max = dataset.iter().map(|e| norm(&e.features)).fold(0.0, f64::max);
        let y_max = dataset
            .iter()
            .map(|e| e.label.abs())
            .fold(self.label_bound, f64::max);
        let xt = (x_max * x_max + 1.0).sqrt();
        let o_max = wb * (h + 1.0);
        let grad_o = (h + 1.0 + h * wb * wb * xt * xt).sqrt();
        let hess_o = xt + wb * TANH_SECOND_DERIV_MAX * xt * xt;
        let third_o = 3.0 * TANH_SECOND_DERIV_MAX * xt * xt + wb * TANH_THIRD_DERIV_MAX * xt.powi(3);
        let (d1, d2, d3, b) = match self.head {
            LossHead::Squared => (o_max + y_max, 1.0, 0.0, 0.5 * (o_max + y_max).powi(2)),
            LossHead::CrossEntropy => (
                1.0f64.max(y_max),
                0.25,
                SIGMOID_SECOND_DERIV_MAX,
                softplus(o_max) + y_max * o_max,
            ),
        };
        SmoothnessConstants {
            lipschitz: Constant::Finite(d1 * grad_o),
            beta: Constant::Finite(d2 * grad_o * grad_o + d1 * hess_o),
            rho: Constant::Finite(d3 * grad_o.powi(3) + 3.0 * d2 * grad_o * hess_o + d1 * third_o),
            loss_upper_bound: Constant::Finite(b),
        }
    }
}
