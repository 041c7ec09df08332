//! Closed-form stability bounds with validity flags and named terms.
//!
//! All functions are pure. A failed assumption never suppresses a value; it is
//! listed in [`BoundReport::validity`] instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sgd::step_conditions;

/// Measured or declared inputs to the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityInputs {
    pub m: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub c: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub beta: f64,
    pub rho: f64,
    pub sigma: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "Rstar", default)]
    pub rstar: f64,
    /// Mean Hessian spectral norm at `w₁`.
    pub hbar: f64,
    /// Expected risk of the output.
    pub r: f64,
    /// Expected empirical risk of the output.
    #[serde(rename = "Remp", default)]
    pub remp: f64,
    /// Loss upper bound; absent when unknown.
    #[serde(rename = "B", default)]
    pub loss_bound: Option<f64>,
}

impl StabilityInputs {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.horizon == 0 {
            return Err(invalid("m and T must be at least 1"));
        }
        for (name, v) in [
            ("c", self.c),
            ("L", self.lipschitz),
            ("beta", self.beta),
            ("rho", self.rho),
            ("sigma", self.sigma),
            ("R1", self.r1),
            ("Rstar", self.rstar),
            ("hbar", self.hbar),
            ("r", self.r),
            ("Remp", self.remp),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if let Some(b) = self.loss_bound {
            if !(b > 0.0) {
                return Err(invalid(format!("B must be positive, got {b}")));
            }
        }
        if self.r1 < self.rstar {
            return Err(invalid(format!("R1 = {} is below Rstar = {}", self.r1, self.rstar)));
        }
        Ok(())
    }

    /// Inputs expressed for the loss `f/B ∈ [0, 1]`. With step sizes scaled
    /// by `B` the SGD iterates are unchanged. Returns `None` when `B` is
    /// unknown or infinite.
    fn rescaled(&self) -> Option<StabilityInputs> {
        let b = self.loss_bound.filter(|b| b.is_finite())?;
        Some(StabilityInputs {
            c: self.c * b,
            lipschitz: self.lipschitz / b,
            beta: self.beta / b,
            rho: self.rho / b,
            sigma: self.sigma / b,
            r1: self.r1 / b,
            rstar: self.rstar / b,
            hbar: self.hbar / b,
            r: self.r / b,
            remp: self.remp / b,
            loss_bound: Some(1.0),
            ..*self
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Exponents in `q = cγ`.
    #[default]
    Theorem,
    /// Exponents in `q = 2cγ`.
    Proof,
}

impl Variant {
    pub fn q(self, c: f64, gamma: f64) -> f64 {
        match self {
            Variant::Theorem => c * gamma,
            Variant::Proof => 2.0 * c * gamma,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Theorem => "theorem",
            Variant::Proof => "proof",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validity {
    pub assumption: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub variant: String,
    /// Bound value; `+∞` when the prefactor diverges.
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
    pub validity: Vec<Validity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl BoundReport {
    fn new(variant: impl Into<String>, value: f64) -> Self {
        Self {
            variant: variant.into(),
            value,
            terms: BTreeMap::new(),
            validity: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn term(mut self, name: &str, v: f64) -> Self {
        self.terms.insert(name.to_string(), v);
        self
    }

    fn check(mut self, assumption: &str, pass: bool) -> Self {
        self.validity.push(Validity {
            assumption: assumption.to_string(),
            pass,
        });
        self
    }

    fn note(mut self, text: impl Into<String>) -> Self {
        self.notes.push(text.into());
        self
    }

    pub fn all_valid(&self) -> bool {
        self.validity.iter().all(|v| v.pass)
    }

    pub fn flag(&self, assumption: &str) -> Option<bool> {
        self.validity.iter().find(|v| v.assumption == assumption).map(|v| v.pass)
    }
}

pub const FLAG_LOSS_UNIT: &str = "loss_in_unit_interval";
pub const FLAG_STEP_NONCONVEX: &str = "nonconvex_ok";
pub const FLAG_STEP_CONVEX: &str = "convex_ok";
pub const FLAG_T_LE_M: &str = "T_le_m";

fn gamma_parts(i: &StabilityInputs) -> (f64, f64) {
    let lt = 1.0 + (i.horizon as f64).ln();
    let raw = i.hbar
        + 2.0 * i.rho * ((i.r1 - i.rstar) * i.c * lt).sqrt()
        + i.rho * i.sigma * ((2.0 * i.c * i.beta).sqrt() + i.c * lt);
    (raw.min(i.beta), raw)
}

/// `γ = min{β, hbar + 2ρ√((R1 − R*)c(1 + ln T)) + ρσ(√(2cβ) + c(1 + ln T))}`
pub fn gamma(inputs: &StabilityInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(gamma_parts(inputs).0)
}

/// `(1 + 1/q)/m · (2cL²)^{1/(1+q)} · (rT)^{q/(1+q)}`
fn nonconvex_core(m: usize, horizon: usize, c: f64, l: f64, q: f64, r: f64) -> f64 {
    (1.0 + 1.0 / q) / m as f64 * (2.0 * c * l * l).powf(1.0 / (1.0 + q)) * (r * horizon as f64).powf(q / (1.0 + q))
}

const DIVERGENT_NOTE: &str = "c·gamma is 0, so the 1 + 1/(c·gamma) prefactor diverges";

/// The effective exponent `q` and the flags shared by the non-convex bounds.
fn nonconvex_setup(inputs: &StabilityInputs, variant: Variant) -> (f64, f64, f64, Vec<Validity>, Vec<String>) {
    let (g, raw) = gamma_parts(inputs);
    let (q, flags, notes) = match inputs.rescaled() {
        Some(s) => {
            let (g_s, _) = gamma_parts(&s);
            let (_, ok, _) = step_conditions(s.c, s.beta, s.horizon);
            (variant.q(s.c, g_s), vec![(FLAG_LOSS_UNIT, true), (FLAG_STEP_NONCONVEX, ok)], vec![])
        }
        None => {
            let (_, ok, _) = step_conditions(inputs.c, inputs.beta, inputs.horizon);
            (
                variant.q(inputs.c, g),
                vec![(FLAG_LOSS_UNIT, false), (FLAG_STEP_NONCONVEX, ok)],
                vec!["loss upper bound B unknown; evaluated without rescaling to [0, 1]".to_string()],
            )
        }
    };
    let mut validity: Vec<Validity> = flags
        .into_iter()
        .map(|(a, pass)| Validity {
            assumption: a.to_string(),
            pass,
        })
        .collect();
    validity.push(Validity {
        assumption: FLAG_T_LE_M.to_string(),
        pass: inputs.horizon <= inputs.m,
    });
    (q, g, raw, validity, notes)
}

/// Data-dependent non-convex bound
/// `(1 + 1/q)/m · (2cL²)^{1/(1+q)} · (rT)^{q/(1+q)}` with `q = cγ` or `2cγ`.
///
/// When `B` is known the loss is rescaled to `[0, 1]` (`c → cB`, constants
/// divided by `B`) before forming `q`; the value is reported in the original
/// loss units.
pub fn nonconvex_stability_bound(inputs: &StabilityInputs, variant: Variant) -> Result<BoundReport> {
    inputs.validate()?;
    let (q, g, raw, validity, notes) = nonconvex_setup(inputs, variant);
    let value = if q > 0.0 {
        nonconvex_core(inputs.m, inputs.horizon, inputs.c, inputs.lipschitz, q, inputs.r)
    } else {
        f64::INFINITY
    };
    let mut rep = BoundReport::new(format!("nonconvex_{}", variant.name()), value)
        .term("gamma", g)
        .term("gamma_unclipped", raw)
        .term("q", q)
        .term("exponent_L", 1.0 / (1.0 + q))
        .term("exponent_rT", q / (1.0 + q));
    rep.validity = validity;
    rep.notes = notes;
    if q <= 0.0 {
        rep = rep.note(DIVERGENT_NOTE);
    }
    Ok(rep)
}

/// Uniform-stability baseline `(1 + 1/(cβ))/m · (2cL²)^{1/(1+cβ)} · T^{cβ/(1+cβ)}`.
pub fn uniform_baseline_bound(m: usize, horizon: usize, c: f64, l: f64, beta: f64) -> Result<BoundReport> {
    uniform_baseline_bound_variant(m, horizon, c, l, beta, Variant::Theorem)
}

pub fn uniform_baseline_bound_variant(
    m: usize,
    horizon: usize,
    c: f64,
    l: f64,
    beta: f64,
    variant: Variant,
) -> Result<BoundReport> {
    if m == 0 || horizon == 0 {
        return Err(invalid("m and T must be at least 1"));
    }
    for (name, v) in [("c", c), ("L", l), ("beta", beta)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(invalid(format!("{name} must be finite and non-negative")));
        }
    }
    let q = variant.q(c, beta);
    let value = if q > 0.0 {
        nonconvex_core(m, horizon, c, l, q, 1.0)
    } else {
        f64::INFINITY
    };
    let (_, ok, _) = step_conditions(c, beta, horizon);
    let mut rep = BoundReport::new(format!("uniform_{}", variant.name()), value)
        .term("q", q)
        .check(FLAG_STEP_NONCONVEX, ok)
        .check(FLAG_T_LE_M, horizon <= m);
    if q <= 0.0 {
        rep = rep.note("c·beta is 0, so the prefactor diverges");
    }
    Ok(rep)
}

/// Convex bound for `α_t = c/√t`:
/// `(2/m)[2√(2c)T^{1/4}√(R1 − R*) + 2cσ(T^{1/4}√(β/2) + √T)]`, times `L`
/// when `include_l_factor` is set.
pub fn convex_stability_bound(inputs: &StabilityInputs, include_l_factor: bool) -> Result<BoundReport> {
    inputs.validate()?;
    let t = inputs.horizon as f64;
    let t4 = t.powf(0.25);
    let risk = 2.0 * (2.0 * inputs.c).sqrt() * t4 * (inputs.r1 - inputs.rstar).sqrt();
    let noise = 2.0 * inputs.c * inputs.sigma * (t4 * (inputs.beta / 2.0).sqrt() + t.sqrt());
    let factor = if include_l_factor { inputs.lipschitz } else { 1.0 };
    let scale = 2.0 / inputs.m as f64 * factor;
    let name = if include_l_factor { "convex_with_L" } else { "convex_without_L" };
    Ok(BoundReport::new(name, scale * (risk + noise))
        .term("risk_term", scale * risk)
        .term("noise_term", scale * noise)
        .term("L_factor", factor)
        .check(FLAG_STEP_CONVEX, inputs.c * inputs.beta <= 1.0)
        .check(FLAG_T_LE_M, inputs.horizon <= inputs.m)
        .note(if include_l_factor {
            "includes the Lipschitz factor L"
        } else {
            "Lipschitz factor L omitted"
        }))
}

/// `(2/m)·tail·L + r·t₀/m` where `tail = Σ_{t>t₀} α_t E‖∇f‖` is supplied by the
/// caller. `L` is dropped when `include_l_factor` is off.
pub fn convex_decomposed_bound(
    tail_path_sum: f64,
    r: f64,
    t0: usize,
    m: usize,
    l: f64,
    include_l_factor: bool,
) -> Result<f64> {
    if m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    if t0 > m {
        return Err(invalid(format!("t0 = {t0} is outside 0..={m}")));
    }
    let factor = if include_l_factor { l } else { 1.0 };
    Ok(2.0 / m as f64 * tail_path_sum * factor + r * t0 as f64 / m as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T0Optimum {
    pub t0_real: f64,
    /// `t0_real` rounded and clamped to `0..=m`.
    pub t0_int: usize,
    pub q: f64,
    /// `(1 + 1/q)/m · (2cL²)^{1/(1+q)} · (rT)^{q/(1+q)}`
    pub bound: f64,
}

/// Minimizer over `t` of `(2cL²/(qm))(T/t)^q + r·t/m`.
#[allow(clippy::too_many_arguments)]
pub fn t0_optimum(c: f64, l: f64, r: f64, horizon: usize, m: usize, gamma_val: f64, variant: Variant) -> Result<T0Optimum> {
    if !(gamma_val > 0.0) || !(c > 0.0) {
        return Err(invalid("t0_optimum needs c > 0 and gamma > 0"));
    }
    if !(r >= 0.0) {
        return Err(invalid("r must be non-negative"));
    }
    let q = variant.q(c, gamma_val);
    if r == 0.0 {
        return Ok(T0Optimum {
            t0_real: 0.0,
            t0_int: 0,
            q,
            bound: 0.0,
        });
    }
    let t0_real = (2.0 * c * l * l / r).powf(1.0 / (1.0 + q)) * (horizon as f64).powf(q / (1.0 + q));
    let t0_int = if t0_real.is_finite() {
        (t0_real.round().max(0.0) as usize).min(m)
    } else {
        m
    };
    Ok(T0Optimum {
        t0_real,
        t0_int,
        q,
        bound: nonconvex_core(m, horizon, c, l, q, r),
    })
}

/// The objective minimized by [`t0_optimum`], at a single `t > 0`.
pub fn t0_objective(c: f64, l: f64, r: f64, horizon: usize, m: usize, q: f64, t: f64) -> f64 {
    let m = m as f64;
    2.0 * c * l * l / (q * m) * (horizon as f64 / t).powf(q) + r * t / m
}

/// Upper bound `max{2^{α/(1−α)} a^{1/(1−α)}, (2c)^α a} + c` on the positive
/// root of `x = a·x^α + c`.
pub fn optimistic_solve(a: f64, c_const: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(a > 0.0) || !(c_const >= 0.0) {
        return Err(invalid("optimistic_solve needs a > 0 and c >= 0"));
    }
    let e = 1.0 / (1.0 - alpha);
    let first = 2f64.powf(alpha * e) * a.powf(e);
    let second = (2.0 * c_const).powf(alpha) * a;
    Ok(first.max(second) + c_const)
}

/// Optimistic bound, the larger of
/// `(2 + 2/q)^{1+q} cL² T^q / m^{1+q}` and
/// `(1 + 1/q)/m · (2cL²)^{1/(1+q)} · (2·Remp·T)^{q/(1+q)}`.
pub fn optimistic_bound(inputs: &StabilityInputs, variant: Variant) -> Result<BoundReport> {
    inputs.validate()?;
    let (q, g, _, validity, notes) = nonconvex_setup(inputs, variant);
    let (c, l) = (inputs.c, inputs.lipschitz);
    let m = inputs.m as f64;
    let t = inputs.horizon as f64;
    let (b1, b2) = if q > 0.0 {
        (
            (2.0 + 2.0 / q).powf(1.0 + q) * c * l * l * t.powf(q) / m.powf(1.0 + q),
            nonconvex_core(inputs.m, inputs.horizon, c, l, q, 2.0 * inputs.remp),
        )
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let mut rep = BoundReport::new(format!("optimistic_{}", variant.name()), b1.max(b2))
        .term("gamma", g)
        .term("q", q)
        .term("branch_1", b1)
        .term("branch_2", b2)
        .term("active_branch", if b2 > b1 { 2.0 } else { 1.0 });
    rep.validity = validity;
    rep.notes = notes;
    if q <= 0.0 {
        rep = rep.note(DIVERGENT_NOTE);
    }
    Ok(rep)
}

/// Comparison bound `2L²Σα_t/m` for convex SGD under uniform stability.
pub fn uniform_convex_bound(l: f64, alpha_sum: f64, m: usize) -> f64 {
    2.0 * l * l * alpha_sum / m as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub empirical_risk: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_plus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_minus: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSelection {
    pub selected: usize,
    pub scores: Vec<CandidateScore>,
    /// The `ln(max(K, 2)/δ)` term used.
    pub log_term: f64,
    /// Set when `K = 1` and `ln K` was replaced by `ln 2`.
    pub degenerate_k: bool,
}

impl TransferSelection {
    pub fn selected_score(&self) -> f64 {
        self.scores
            .iter()
            .find(|s| s.index == self.selected)
            .map(|s| s.score)
            .unwrap_or(f64::NAN)
    }
}

fn argmin(scores: &[CandidateScore]) -> usize {
    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.score < best.score || (s.score == best.score && s.index < best.index) {
            best = s;
        }
    }
    best.index
}

/// Selects the candidate minimizing `R̂_k + √(ln(max(K, 2))/m)`.
pub fn transfer_select_convex(candidates: &[(usize, f64)], m: usize) -> Result<TransferSelection> {
    if candidates.is_empty() {
        return Err(invalid("transfer selection needs at least one candidate"));
    }
    if m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    let k = candidates.len();
    let log_term = (k.max(2) as f64).ln();
    let penalty = (log_term / m as f64).sqrt();
    let scores: Vec<CandidateScore> = candidates
        .iter()
        .map(|&(index, risk)| CandidateScore {
            index,
            empirical_risk: risk,
            hbar: None,
            gamma_plus: None,
            gamma_minus: None,
            score: risk + penalty,
        })
        .collect();
    Ok(TransferSelection {
        selected: argmin(&scores),
        scores,
        log_term,
        degenerate_k: k == 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonconvexCandidate {
    pub index: usize,
    pub empirical_risk: f64,
    pub hbar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub delta_conf: f64,
    /// Floor applied to `γ̂⁻`.
    pub gamma_floor: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            delta_conf: 0.05,
            gamma_floor: 1e-6,
        }
    }
}

/// Selects the candidate minimizing
/// `(1 + 1/(cγ̂⁻))·R̂^{cγ̂⁺/(1+cγ̂⁺)}·√ℓ / m^{1/(1+cγ̂⁺)}` with
/// `γ̂± = ĥ + √R̂ ± (ℓ/m)^{1/4}` and `ℓ = ln(max(K, 2)/δ)`.
pub fn transfer_select_nonconvex(
    candidates: &[NonconvexCandidate],
    c: f64,
    m: usize,
    cfg: &TransferConfig,
) -> Result<TransferSelection> {
    if candidates.is_empty() {
        return Err(invalid("transfer selection needs at least one candidate"));
    }
    if !(c > 0.0) || m == 0 {
        return Err(invalid("transfer selection needs c > 0 and m >= 1"));
    }
    if !(cfg.delta_conf > 0.0 && cfg.delta_conf <= 1.0) || !(cfg.gamma_floor > 0.0) {
        return Err(invalid("delta_conf must lie in (0, 1] and gamma_floor must be positive"));
    }
    let k = candidates.len();
    let log_term = (k.max(2) as f64 / cfg.delta_conf).ln();
    let mf = m as f64;
    let spread = (log_term / mf).powf(0.25);
    let scores = candidates
        .iter()
        .map(|cand| {
            if !(cand.empirical_risk >= 0.0) || !(cand.hbar >= 0.0) {
                return Err(invalid(format!("candidate {} has a negative or NaN risk/curvature", cand.index)));
            }
            let centre = cand.hbar + cand.empirical_risk.sqrt();
            let gp = centre + spread;
            let gm = (centre - spread).max(cfg.gamma_floor);
            let qp = c * gp;
            let score = (1.0 + 1.0 / (c * gm)) * cand.empirical_risk.powf(qp / (1.0 + qp)) * log_term.sqrt()
                / mf.powf(1.0 / (1.0 + qp));
            Ok(CandidateScore {
                index: cand.index,
                empirical_risk: cand.empirical_risk,
                hbar: Some(cand.hbar),
                gamma_plus: Some(gp),
                gamma_minus: Some(gm),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferSelection {
        selected: argmin(&scores),
        scores,
        log_term,
        degenerate_k: k == 1,
    })
}

/// Every bound variant for one set of inputs, in a fixed order.
pub fn all_bounds(inputs: &StabilityInputs) -> Result<Vec<BoundReport>> {
    inputs.validate()?;
    let mut out = Vec::new();
    for v in [Variant::Theorem, Variant::Proof] {
        out.push(nonconvex_stability_bound(inputs, v)?);
    }
    for v in [Variant::Theorem, Variant::Proof] {
        out.push(uniform_baseline_bound_variant(
            inputs.m,
            inputs.horizon,
            inputs.c,
            inputs.lipschitz,
            inputs.beta,
            v,
        )?);
    }
    for v in [Variant::Theorem, Variant::Proof] {
        out.push(optimistic_bound(inputs, v)?);
    }
    out.push(convex_stability_bound(inputs, true)?);
    out.push(convex_stability_bound(inputs, false)?);
    let g = gamma(inputs)?;
    for v in [Variant::Theorem, Variant::Proof] {
        let mut rep = BoundReport::new(format!("t0_{}", v.name()), f64::NAN);
        if g > 0.0 && inputs.c > 0.0 {
            let t = t0_optimum(inputs.c, inputs.lipschitz, inputs.r, inputs.horizon, inputs.m, g, v)?;
            rep.value = t.bound;
            rep = rep
                .term("t0_real", t.t0_real)
                .term("t0_int", t.t0_int as f64)
                .term("q", t.q);
        } else {
            rep = rep.note("t0 undefined: c·gamma is 0");
        }
        out.push(rep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base() -> StabilityInputs {
        StabilityInputs {
            m: 1000,
            horizon: 1000,
            c: 0.01,
            lipschitz: 1.0,
            beta: 10.0,
            rho: 0.0,
            sigma: 0.0,
            r1: 0.5,
            rstar: 0.0,
            hbar: 2.0,
            r: 0.5,
            remp: 0.1,
            loss_bound: Some(1.0),
        }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma(&base()).unwrap(), 2.0);
        let mut i = base();
        i.hbar = 12.0;
        assert_eq!(gamma(&i).unwrap(), 10.0);
        let i = StabilityInputs {
            beta: 5.0,
            rho: 1.0,
            c: 0.01,
            sigma: 1.0,
            r1: 1.0,
            rstar: 0.0,
            horizon: 100,
            hbar: 1.0,
            ..base()
        };
        assert!(close(gamma(&i).unwrap(), 1.845_784_280_354_399_6, 1e-14));
        let mut bad = base();
        bad.rstar = 1.0;
        assert!(gamma(&bad).is_err());
    }

    #[test]
    fn nonconvex_examples() {
        let rep = nonconvex_stability_bound(&base(), Variant::Theorem).unwrap();
        assert!(close(rep.value, 0.001_244_039_842_440_402_8, 1e-13));
        assert_eq!(rep.terms["q"], 0.02);
        let mut i = base();
        i.r = 0.0;
        assert_eq!(nonconvex_stability_bound(&i, Variant::Theorem).unwrap().value, 0.0);
        assert_eq!(nonconvex_stability_bound(&i, Variant::Proof).unwrap().value, 0.0);
    }

    #[test]
    fn zero_curvature_sentinel() {
        let mut i = base();
        i.hbar = 0.0;
        let rep = nonconvex_stability_bound(&i, Variant::Theorem).unwrap();
        assert_eq!(rep.value, f64::INFINITY);
        assert!(!rep.notes.is_empty());
    }

    #[test]
    fn unknown_loss_bound_is_flagged() {
        let mut i = base();
        i.loss_bound = None;
        let rep = nonconvex_stability_bound(&i, Variant::Theorem).unwrap();
        assert_eq!(rep.flag(FLAG_LOSS_UNIT), Some(false));
        assert!(rep.value.is_finite());
    }

    #[test]
    fn rescaling_preserves_value_without_noise_term() {
        let mut i = base();
        i.rho = 0.3;
        i.loss_bound = Some(1.0);
        let a = nonconvex_stability_bound(&i, Variant::Theorem).unwrap().value;
        i.loss_bound = Some(4.0);
        let b = nonconvex_stability_bound(&i, Variant::Theorem).unwrap().value;
        assert!(close(a, b, 1e-12));
    }

    #[test]
    fn substitution_identity() {
        let mut i = base();
        i.hbar = i.beta;
        i.r = 1.0;
        let a = nonconvex_stability_bound(&i, Variant::Theorem).unwrap().value;
        let b = uniform_baseline_bound(i.m, i.horizon, i.c, i.lipschitz, i.beta).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn reference_scale_uniform() {
        let b = uniform_baseline_bound(1000, 1000, 1e-3, 78.72, 1692.28).unwrap();
        assert!(close(b.value, 0.311_458_924_921_911_55, 1e-12));
        assert_eq!(b.flag(FLAG_STEP_NONCONVEX), Some(false));
    }

    #[test]
    fn uniform_monotone_in_t() {
        let mut prev = 0.0;
        for t in [1, 10, 100, 1000, 10_000] {
            let v = uniform_baseline_bound(1000, t, 0.01, 1.0, 5.0).unwrap().value;
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn convex_examples() {
        let i = StabilityInputs {
            m: 100,
            horizon: 100,
            c: 0.05,
            sigma: 0.0,
            r1: 0.5,
            rstar: 0.0,
            beta: 1.0,
            lipschitz: 1.0,
            ..base()
        };
        let rep = convex_stability_bound(&i, true).unwrap();
        assert!(close(rep.value, 0.028_284_271_247_461_9, 1e-13));
        assert_eq!(rep.flag(FLAG_STEP_CONVEX), Some(true));
        let doubled = convex_stability_bound(&StabilityInputs { m: 200, ..i }, true).unwrap();
        assert_eq!(doubled.value * 2.0, rep.value);
        let zero = StabilityInputs { r1: 0.0, sigma: 0.0, ..i };
        assert_eq!(convex_stability_bound(&zero, true).unwrap().value, 0.0);
    }

    #[test]
    fn decomposed_examples() {
        assert_eq!(convex_decomposed_bound(0.0, 0.5, 10, 20, 1.0, true).unwrap(), 0.25);
        assert!(close(convex_decomposed_bound(3.0, 0.5, 0, 10, 2.0, true).unwrap(), 1.2, 1e-15));
        let tail = 1.0 / 2f64.sqrt() + 1.0 / 3f64.sqrt();
        let v = convex_decomposed_bound(tail, 0.5, 1, 10, 1.0, true).unwrap();
        assert!(close(v, 0.306_891_410_075_234_66, 1e-14));
        assert!(convex_decomposed_bound(1.0, 0.5, 11, 10, 1.0, true).is_err());
    }

    #[test]
    fn t0_examples() {
        let t = t0_optimum(0.01, 1.0, 0.5, 1000, 1000, 2.0, Variant::Proof).unwrap();
        assert!(close(t.t0_real, 0.059_048_861_713_399_047, 1e-13));
        assert_eq!(t.t0_int, 0);
        let big = t0_optimum(0.01, 1.0, 1e12, 1000, 1000, 2.0, Variant::Proof).unwrap();
        assert!(big.t0_real < 1e-9);
        let zero = t0_optimum(0.01, 1.0, 0.0, 1000, 1000, 2.0, Variant::Theorem).unwrap();
        assert_eq!((zero.t0_real, zero.bound), (0.0, 0.0));
    }

    #[test]
    fn optimistic_solve_examples() {
        assert_eq!(optimistic_solve(1.0, 0.0, 0.5).unwrap(), 2.0);
        assert!((optimistic_solve(1e-12, 3.0, 0.5).unwrap() - 3.0).abs() < 1e-9);
        assert!(optimistic_solve(1.0, 0.0, 1.0).is_err());
        assert!(optimistic_solve(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn optimistic_examples() {
        let rep = optimistic_bound(&base(), Variant::Theorem).unwrap();
        assert!(close(rep.terms["branch_1"], 0.001_118_850_796_033_773_9, 1e-12));
        assert!(close(rep.terms["branch_2"], 0.001_221_888_406_924_731_6, 1e-12));
        assert_eq!(rep.value, rep.terms["branch_2"]);
        assert_eq!(rep.terms["active_branch"], 2.0);
        let mut i = base();
        i.remp = 0.0;
        let rep = optimistic_bound(&i, Variant::Theorem).unwrap();
        assert_eq!(rep.terms["branch_2"], 0.0);
        assert_eq!(rep.value, rep.terms["branch_1"]);
    }

    #[test]
    fn convex_selection() {
        let s = transfer_select_convex(&[(0, 0.7)], 10).unwrap();
        assert_eq!(s.selected, 0);
        assert!(s.degenerate_k);
        let s = transfer_select_convex(&[(0, 0.2), (1, 0.2)], 10).unwrap();
        assert_eq!(s.selected, 0);
        let s = transfer_select_convex(&[(0, 0.4), (1, 0.1), (2, 0.3)], 100).unwrap();
        assert_eq!(s.selected, 1);
        assert!(transfer_select_convex(&[], 10).is_err());
    }

    #[test]
    fn nonconvex_selection() {
        let cfg = TransferConfig::default();
        let one = [NonconvexCandidate {
            index: 0,
            empirical_risk: 0.3,
            hbar: 1.0,
        }];
        let s = transfer_select_nonconvex(&one, 0.1, 100, &cfg).unwrap();
        assert_eq!(s.selected, 0);
        assert!(s.degenerate_k);
        assert!((s.log_term - (2.0f64 / 0.05).ln()).abs() < 1e-15);

        let two = [
            NonconvexCandidate {
                index: 0,
                empirical_risk: 0.5,
                hbar: 3.0,
            },
            NonconvexCandidate {
                index: 1,
                empirical_risk: 0.05,
                hbar: 0.5,
            },
        ];
        let s = transfer_select_nonconvex(&two, 0.1, 200, &cfg).unwrap();
        // Straight-line re-evaluation of both scores.
        let ell = (2.0f64 / 0.05).ln();
        let spread = (ell / 200.0).powf(0.25);
        let score = |r: f64, h: f64| {
            let gp = 0.1 * (h + r.sqrt() + spread);
            let gm = 0.1 * (h + r.sqrt() - spread);
            (1.0 + 1.0 / gm) * r.powf(gp / (1.0 + gp)) * ell.sqrt() / 200f64.powf(1.0 / (1.0 + gp))
        };
        let (a, b) = (score(0.5, 3.0), score(0.05, 0.5));
        assert!(close(s.scores[0].score, a, 1e-13) && close(s.scores[1].score, b, 1e-13));
        assert_eq!(s.selected, if b < a { 1 } else { 0 });
        assert_eq!(s.selected_score(), s.scores.iter().map(|c| c.score).fold(f64::INFINITY, f64::min));
        assert!(transfer_select_nonconvex(&[], 0.1, 10, &cfg).is_err());
    }

    #[test]
    fn nonconvex_selection_floor() {
        let cand = [NonconvexCandidate {
            index: 4,
            empirical_risk: 0.0,
            hbar: 0.0,
        }];
        let s = transfer_select_nonconvex(&cand, 0.1, 10, &TransferConfig::default()).unwrap();
        assert_eq!(s.scores[0].gamma_minus, Some(1e-6));
        assert_eq!(s.scores[0].score, 0.0);
    }

    #[test]
    fn inputs_parse_with_defaults() {
        let i: StabilityInputs = serde_json::from_str(
            r#"{"m":10,"T":5,"c":0.1,"L":1,"beta":2,"rho":0,"sigma":0,"R1":0.5,"hbar":1,"r":0.1}"#,
        )
        .unwrap();
        assert_eq!(i.rstar, 0.0);
        assert_eq!(i.loss_bound, None);
        assert!(serde_json::from_str::<StabilityInputs>(r#"{"m":10}"#).is_err());
    }

    fn bisect_root(a: f64, c: f64, alpha: f64) -> f64 {
        let f = |x: f64| x - a * x.powf(alpha) - c;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while f(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    fn inputs_strategy() -> impl Strategy<Value = StabilityInputs> {
        (
            1usize..5000,
            1usize..5000,
            1e-5f64..0.5,
            0.01f64..100.0,
            0.01f64..100.0,
            0.0f64..10.0,
            0.0f64..2.0,
            0.0f64..2.0,
            0.0f64..50.0,
            0.0f64..2.0,
        )
            .prop_map(|(m, t, c, l, beta, rho, sigma, r1, hbar, r)| StabilityInputs {
                m,
                horizon: t,
                c,
                lipschitz: l,
                beta,
                rho,
                sigma,
                r1,
                rstar: 0.0,
                hbar,
                r,
                remp: r / 2.0,
                loss_bound: Some(1.0),
            })
    }

    proptest! {
        #[test]
        fn gamma_clipped_and_monotone(i in inputs_strategy(), d in 0.0f64..5.0) {
            let g = gamma(&i).unwrap();
            prop_assert!(g <= i.beta);
            for bumped in [
                StabilityInputs { hbar: i.hbar + d, ..i },
                StabilityInputs { rho: i.rho + d, ..i },
                StabilityInputs { sigma: i.sigma + d, ..i },
                StabilityInputs { r1: i.r1 + d, ..i },
            ] {
                prop_assert!(gamma(&bumped).unwrap() >= g);
            }
        }

        #[test]
        fn substitution_identity_bitwise(i in inputs_strategy()) {
            let i = StabilityInputs { hbar: i.beta, r: 1.0, ..i };
            let a = nonconvex_stability_bound(&i, Variant::Theorem).unwrap().value;
            let b = uniform_baseline_bound(i.m, i.horizon, i.c, i.lipschitz, i.beta).unwrap().value;
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }

        #[test]
        fn nonconvex_scales_inversely_with_m(i in inputs_strategy(), k in 2usize..10) {
            prop_assume!(gamma(&i).unwrap() > 0.0);
            let a = nonconvex_stability_bound(&i, Variant::Theorem).unwrap().value;
            let b = nonconvex_stability_bound(&StabilityInputs { m: i.m * k, ..i }, Variant::Theorem).unwrap().value;
            prop_assert!((a - b * k as f64).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn convex_scales_inversely_with_m(i in inputs_strategy(), k in 2usize..10) {
            let a = convex_stability_bound(&i, true).unwrap().value;
            let b = convex_stability_bound(&StabilityInputs { m: i.m * k, ..i }, true).unwrap().value;
            prop_assert!((a - b * k as f64).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn vanishing_risk(i in inputs_strategy()) {
            prop_assume!(gamma(&i).unwrap() > 0.0);
            let z = StabilityInputs { r: 0.0, ..i };
            prop_assert_eq!(nonconvex_stability_bound(&z, Variant::Theorem).unwrap().value, 0.0);
            let z = StabilityInputs { r1: 0.0, sigma: 0.0, ..i };
            prop_assert_eq!(convex_stability_bound(&z, true).unwrap().value, 0.0);
        }

        #[test]
        fn optimistic_dominates_branches(i in inputs_strategy()) {
            prop_assume!(gamma(&i).unwrap() > 0.0);
            let rep = optimistic_bound(&i, Variant::Theorem).unwrap();
            prop_assert!(rep.value >= rep.terms["branch_1"]);
            prop_assert!(rep.value >= rep.terms["branch_2"]);
        }

        #[test]
        fn optimistic_solve_is_upper(a in 1e-3f64..10.0, c in 0.0f64..10.0, alpha in 0.01f64..0.99) {
            let root = bisect_root(a, c, alpha);
            prop_assert!(optimistic_solve(a, c, alpha).unwrap() >= root - 1e-10 * root.max(1.0));
        }

        #[test]
        fn t0_bound_below_grid(c in 1e-4f64..0.1, l in 0.1f64..10.0, r in 1e-3f64..2.0, t in 10usize..5000, g in 0.1f64..20.0) {
            for v in [Variant::Theorem, Variant::Proof] {
                let opt = t0_optimum(c, l, r, t, t, g, v).unwrap();
                for k in 1..=100usize {
                    let tt = (k * t).div_ceil(100).max(1) as f64;
                    let obj = t0_objective(c, l, r, t, t, opt.q, tt);
                    prop_assert!(opt.bound <= obj * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn invalid_flags_never_suppress(i in inputs_strategy()) {
            for rep in all_bounds(&i).unwrap() {
                prop_assert!(!rep.value.is_nan() || rep.variant.starts_with("t0"));
                prop_assert!(rep.value.is_nan() || rep.value >= 0.0);
            }
        }
    }
}
