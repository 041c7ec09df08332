//! Without-replacement SGD, trajectory recording and coupled paired runs.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded through
//! `SeedableRng::seed_from_u64`; index orders are drawn with the Fisher–Yates
//! shuffle of `rand` 0.9. Child seeds for independent replicates are derived
//! with [`derive_seed`]: output `k` of a SplitMix64 stream started at `master`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, ParamVector};
use crate::error::{invalid, Error, Result};
use crate::linalg::{dist, norm};
use crate::model::{LossModel, SmoothnessConstants};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer applied to `master + (k + 1)·0x9E3779B97F4A7C15`.
pub fn derive_seed(master: u64, k: u64) -> u64 {
    let mut z = master.wrapping_add(k.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random permutation of `0..m`, deterministic in `seed`.
pub fn sample_permutation(m: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from_seed(seed);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Index order for `horizon` steps over `m` examples. The first `m` steps
/// follow one permutation; beyond that a fresh permutation is drawn per pass.
/// The flag reports whether `horizon ≤ m`.
pub fn index_sequence(m: usize, horizon: usize, seed: u64) -> (Vec<usize>, bool) {
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(horizon);
    while out.len() < horizon {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut rng);
        let take = (horizon - out.len()).min(m);
        out.extend_from_slice(&idx[..take]);
    }
    (out, horizon <= m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `α_t = c / √t`
    InvSqrt,
    /// `α_t = c / t`
    InvT,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: ScheduleKind,
    pub c: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl StepSchedule {
    pub fn new(kind: ScheduleKind, c: f64, horizon: usize) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("step constant c must be positive, got {c}")));
        }
        if horizon == 0 {
            return Err(invalid("horizon T must be at least 1"));
        }
        Ok(Self { kind, c, horizon })
    }

    /// Step size at 1-based step `t`.
    pub fn step_size(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.horizon {
            return Err(invalid(format!(
                "step index {t} outside 1..={}",
                self.horizon
            )));
        }
        Ok(self.alpha(t))
    }

    fn alpha(&self, t: usize) -> f64 {
        let t = t as f64;
        match self.kind {
            ScheduleKind::InvSqrt => self.c / t.sqrt(),
            ScheduleKind::InvT => self.c / t,
            ScheduleKind::Constant => self.c,
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        (1..=self.horizon).map(|t| self.alpha(t)).collect()
    }

    /// `Σ_{t=1}^{T} α_t`
    pub fn sum(&self) -> f64 {
        self.alphas().iter().sum()
    }

    /// `Σ_{t=1}^{T} α_t²`
    pub fn sum_sq(&self) -> f64 {
        self.alphas().iter().map(|a| a * a).sum()
    }
}

/// Step-size conditions of the convex and non-convex stability results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValidity {
    /// `max_t α_t = c ≤ 1/β`
    pub convex_ok: bool,
    /// `c ≤ min{1/β, 1/(4(2β ln T)²)}`
    pub nonconvex_ok: bool,
    /// The schedule has the `c/√t` form used by the convex result.
    pub convex_form: bool,
    /// The schedule has the `c/t` form used by the non-convex result.
    pub nonconvex_form: bool,
    pub nonconvex_threshold: f64,
}

/// Never refuses; an unknown `beta` fails both conditions.
pub fn validate_schedule(schedule: &StepSchedule, constants: &SmoothnessConstants) -> ScheduleValidity {
    let (convex_ok, nonconvex_ok, threshold) = match constants.beta.finite() {
        Some(beta) => step_conditions(schedule.c, beta, schedule.horizon),
        None => (false, false, f64::NAN),
    };
    ScheduleValidity {
        convex_ok,
        nonconvex_ok,
        convex_form: schedule.kind == ScheduleKind::InvSqrt,
        nonconvex_form: schedule.kind == ScheduleKind::InvT,
        nonconvex_threshold: threshold,
    }
}

/// `(c ≤ 1/β, c ≤ min{1/β, 1/(4(2β ln T)²)}, min{…})`
pub fn step_conditions(c: f64, beta: f64, horizon: usize) -> (bool, bool, f64) {
    let inv_beta = 1.0 / beta;
    let log_term = 2.0 * beta * (horizon as f64).ln();
    let threshold = inv_beta.min(1.0 / (4.0 * log_term * log_term));
    (c <= inv_beta, c <= threshold, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub schedule: StepSchedule,
    pub seed: u64,
    pub record_iterates: bool,
}

/// Record of one SGD run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    /// `w_1, …, w_{T+1}` when iterates are recorded, otherwise `[w_1, w_{T+1}]`.
    pub iterates: Vec<ParamVector>,
    /// `‖∇f(w_t, z_{j_t})‖` for `t = 1..T`.
    pub step_grad_norms: Vec<f64>,
    pub alphas: Vec<f64>,
    /// `j_1, …, j_T` (0-based example indices).
    pub permutation: Vec<usize>,
    pub schedule: StepSchedule,
    pub record_iterates: bool,
    /// `T ≤ m`, the regime covered by the stability results.
    pub within_theory: bool,
}

impl Trajectory {
    pub fn initial(&self) -> &ParamVector {
        &self.iterates[0]
    }

    pub fn last(&self) -> &ParamVector {
        self.iterates.last().expect("trajectory has at least one iterate")
    }

    pub fn horizon(&self) -> usize {
        self.alphas.len()
    }

    /// Iterate `w_t` (1-based) when iterates are recorded.
    pub fn iterate(&self, t: usize) -> Option<&ParamVector> {
        if self.record_iterates {
            self.iterates.get(t.checked_sub(1)?)
        } else {
            match t {
                1 => self.iterates.first(),
                t if t == self.horizon() + 1 => self.iterates.last(),
                _ => None,
            }
        }
    }

    /// CSV rows `t,alpha_t,j_t,grad_norm,delta_t` with an empty `delta_t`.
    pub fn to_csv_string(&self) -> String {
        steps_csv(&self.alphas, &self.permutation, &self.step_grad_norms, None)
    }
}

fn steps_csv(alphas: &[f64], perm: &[usize], grads: &[f64], deltas: Option<&[f64]>) -> String {
    let mut out = String::from("t,alpha_t,j_t,grad_norm,delta_t\n");
    for t in 0..alphas.len() {
        let delta = deltas.map(|d| d[t + 1].to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t + 1,
            alphas[t],
            perm[t],
            grads[t],
            delta
        ));
    }
    out
}

fn check_dims(model: &dyn LossModel, dataset: &Dataset, w1: &[f64]) -> Result<()> {
    if w1.len() != model.param_dim() {
        return Err(Error::DimensionMismatch {
            what: "initial point",
            expected: model.param_dim(),
            got: w1.len(),
        });
    }
    if dataset.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset features",
            expected: model.input_dim(),
            got: dataset.dim(),
        });
    }
    Ok(())
}

/// `w_{t+1} = w_t − α_t ∇f(w_t, z_{j_t})`, returning the gradient norm.
fn sgd_step(
    model: &dyn LossModel,
    w: &mut [f64],
    z: &Example,
    alpha: f64,
    step: usize,
) -> Result<f64> {
    let g = model.grad(w, z)?;
    for (wi, gi) in w.iter_mut().zip(g.iter()) {
        *wi -= alpha * gi;
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence { step });
    }
    Ok(norm(&g))
}

/// Runs SGD from `w1` for the configured horizon.
pub fn run_sgd(
    model: &dyn LossModel,
    dataset: &Dataset,
    config: &SgdConfig,
    w1: &ParamVector,
) -> Result<Trajectory> {
    check_dims(model, dataset, w1)?;
    let horizon = config.schedule.horizon;
    let (perm, within_theory) = index_sequence(dataset.len(), horizon, config.seed);
    let alphas = config.schedule.alphas();
    let mut w = w1.clone();
    let mut iterates = vec![w1.clone()];
    let mut grads = Vec::with_capacity(horizon);
    for t in 0..horizon {
        grads.push(sgd_step(model, &mut w, &dataset[perm[t]], alphas[t], t + 1)?);
        if config.record_iterates {
            iterates.push(w.clone());
        }
    }
    if !config.record_iterates {
        iterates.push(w);
    }
    Ok(Trajectory {
        iterates,
        step_grad_norms: grads,
        alphas,
        permutation: perm,
        schedule: config.schedule,
        record_iterates: config.record_iterates,
        within_theory,
    })
}

/// Coupled runs on `S` and `S^(i)` sharing one index order and `w_1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedRunRecord {
    pub replaced_index: usize,
    /// First 1-based step with `j_t = i`, `None` when never drawn.
    pub tau: Option<usize>,
    /// `δ_t = ‖w_{S,t} − w_{S^(i),t}‖` for `t = 1..T+1`.
    pub delta_series: Vec<f64>,
    /// `f(w_{S,T+1}, probe) − f(w_{S^(i),T+1}, probe)`
    pub final_loss_gap_on_probe: f64,
    pub original: Trajectory,
    pub perturbed: Trajectory,
}

impl PairedRunRecord {
    pub fn to_csv_string(&self) -> String {
        steps_csv(
            &self.original.alphas,
            &self.original.permutation,
            &self.original.step_grad_norms,
            Some(&self.delta_series),
        )
    }
}

pub fn paired_run(
    model: &dyn LossModel,
    dataset: &Dataset,
    i: usize,
    replacement: &Example,
    probe: &Example,
    config: &SgdConfig,
    w1: &ParamVector,
) -> Result<PairedRunRecord> {
    check_dims(model, dataset, w1)?;
    let perturbed_set = dataset.with_replaced(i, replacement.clone())?;
    let horizon = config.schedule.horizon;
    let (perm, within_theory) = index_sequence(dataset.len(), horizon, config.seed);
    let alphas = config.schedule.alphas();

    let mut w_s = w1.clone();
    let mut w_p = w1.clone();
    let mut it_s = vec![w1.clone()];
    let mut it_p = vec![w1.clone()];
    let mut g_s = Vec::with_capacity(horizon);
    let mut g_p = Vec::with_capacity(horizon);
    let mut deltas = Vec::with_capacity(horizon + 1);
    deltas.push(0.0);
    let mut tau = None;
    for t in 0..horizon {
        let j = perm[t];
        if j == i && tau.is_none() {
            tau = Some(t + 1);
        }
        g_s.push(sgd_step(model, &mut w_s, &dataset[j], alphas[t], t + 1)?);
        g_p.push(sgd_step(model, &mut w_p, &perturbed_set[j], alphas[t], t + 1)?);
        deltas.push(dist(&w_s, &w_p));
        if config.record_iterates {
            it_s.push(w_s.clone());
            it_p.push(w_p.clone());
        }
    }
    let gap = model.loss(&w_s, probe)? - model.loss(&w_p, probe)?;
    if !config.record_iterates {
        it_s.push(w_s);
        it_p.push(w_p);
    }
    let make = |iterates, grads| Trajectory {
        iterates,
        step_grad_norms: grads,
        alphas: alphas.clone(),
        permutation: perm.clone(),
        schedule: config.schedule,
        record_iterates: config.record_iterates,
        within_theory,
    };
    Ok(PairedRunRecord {
        replaced_index: i,
        tau,
        delta_series: deltas,
        final_loss_gap_on_probe: gap,
        original: make(it_s, g_s),
        perturbed: make(it_p, g_p),
    })
}

/// `‖G(w) − G(v)‖ / ‖w − v‖` for the update `G(u) = u − α∇f(u, z)`; 0 when `w = v`.
pub fn gradient_update_expansion(
    model: &dyn LossModel,
    w: &[f64],
    v: &[f64],
    z: &Example,
    alpha: f64,
) -> Result<f64> {
    let base = dist(w, v);
    if base == 0.0 {
        return Ok(0.0);
    }
    let gw = model.grad(w, z)?;
    let gv = model.grad(v, z)?;
    let diff: f64 = w
        .iter()
        .zip(v)
        .zip(gw.iter().zip(gv.iter()))
        .map(|((wi, vi), (a, b))| {
            let d = (wi - alpha * a) - (vi - alpha * b);
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(diff / base)
}
