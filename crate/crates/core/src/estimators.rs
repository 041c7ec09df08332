//! Measured quantities: risks, gradient noise, path sums, expansiveness
//! coefficients, empirical smoothness constants and on-average stability.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{example_hessian_norm, mean_stderr, PowerIterConfig};
use crate::data::{Dataset, Example, ParamVector};
use crate::error::{invalid, Error, Result};
use crate::linalg::{dist, norm};
use crate::model::LossModel;
use crate::sgd::{derive_seed, paired_run, rng_from_seed, PairedRunRecord, SgdConfig, StepSchedule, Trajectory};
use crate::synthetic::DataSource;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub n: usize,
    pub stderr: f64,
}

/// Average loss over `dataset`.
pub fn empirical_risk(model: &dyn LossModel, w: &[f64], dataset: &Dataset) -> Result<RiskEstimate> {
    let losses: Vec<f64> = dataset
        .iter()
        .map(|z| model.loss(w, z))
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_stderr(&losses);
    Ok(RiskEstimate {
        mean,
        n: losses.len(),
        stderr,
    })
}

/// Monte-Carlo estimate of the population risk from held-out data.
pub fn risk_estimate(model: &dyn LossModel, w: &[f64], heldout: &Dataset) -> Result<RiskEstimate> {
    empirical_risk(model, w, heldout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub sigma_sq: f64,
    /// Step indices (1-based) of the iterates used.
    pub evaluation_points: Vec<usize>,
}

impl VarianceEstimate {
    pub fn sigma(&self) -> f64 {
        self.sigma_sq.sqrt()
    }
}

fn gradient_variance(model: &dyn LossModel, w: &[f64], sample: &Dataset) -> Result<f64> {
    let grads: Vec<ParamVector> = sample.iter().map(|z| model.grad(w, z)).collect::<Result<_>>()?;
    let n = grads.len() as f64;
    let p = w.len();
    let mut mean = vec![0.0; p];
    for g in &grads {
        mean.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n);
    Ok(grads.iter().map(|g| dist(g, &mean).powi(2)).sum::<f64>() / n)
}

/// `max_t mean_z ‖∇f(w_t, z) − ∇R̂(w_t)‖²` over the supplied iterates, which
/// are labelled `1, 2, …` in the result.
pub fn sigma_estimate(model: &dyn LossModel, iterates: &[ParamVector], sample: &Dataset) -> Result<VarianceEstimate> {
    let points: Vec<usize> = (1..=iterates.len()).collect();
    sigma_at(model, iterates.iter().zip(points).collect(), sample)
}

fn sigma_at(model: &dyn LossModel, at: Vec<(&ParamVector, usize)>, sample: &Dataset) -> Result<VarianceEstimate> {
    if at.is_empty() {
        return Err(invalid("sigma_estimate needs at least one iterate"));
    }
    let mut sigma_sq: f64 = 0.0;
    let mut points = Vec::with_capacity(at.len());
    for (w, t) in at {
        sigma_sq = sigma_sq.max(gradient_variance(model, w, sample)?);
        points.push(t);
    }
    Ok(VarianceEstimate {
        sigma_sq,
        evaluation_points: points,
    })
}

/// Default evaluation steps `{1} ∪ {k·⌈T/10⌉ + 1}` within `1..=T+1`.
pub fn default_sigma_points(horizon: usize) -> Vec<usize> {
    let stride = horizon.div_ceil(10).max(1);
    let mut pts = vec![1];
    let mut t = stride + 1;
    while t <= horizon + 1 {
        pts.push(t);
        t += stride;
    }
    pts
}

/// [`sigma_estimate`] at the default evaluation steps of a recorded trajectory.
pub fn sigma_estimate_trajectory(model: &dyn LossModel, traj: &Trajectory, sample: &Dataset) -> Result<VarianceEstimate> {
    if !traj.record_iterates {
        return Err(invalid("trajectory was run without recording iterates"));
    }
    let at = default_sigma_points(traj.horizon())
        .into_iter()
        .filter_map(|t| traj.iterate(t).map(|w| (w, t)))
        .collect();
    sigma_at(model, at, sample)
}

/// `Σ_t α_t ‖∇f(w_t, z_{j_t})‖`
pub fn gradient_path_sum(traj: &Trajectory) -> f64 {
    traj.alphas
        .iter()
        .zip(&traj.step_grad_norms)
        .map(|(a, g)| a * g)
        .sum()
}

/// `2√((Σα)(R1 − R* + (βσ²/2)Σα²)) + σΣα` over the whole schedule.
pub fn path_bound(r1: f64, rstar: f64, sigma: f64, beta: f64, schedule: &StepSchedule) -> Result<f64> {
    if r1 < rstar {
        return Err(invalid(format!("R1 = {r1} is below Rstar = {rstar}")));
    }
    if sigma < 0.0 || beta < 0.0 {
        return Err(invalid("sigma and beta must be non-negative"));
    }
    let s1 = schedule.sum();
    let s2 = schedule.sum_sq();
    Ok(2.0 * (s1 * (r1 - rstar + beta * sigma * sigma / 2.0 * s2)).sqrt() + sigma * s1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiSeries {
    pub xi: Vec<f64>,
    /// `min{ξ_t, β}`
    pub psi: Vec<f64>,
}

/// Expansiveness coefficients
/// `ξ_t = ‖∇²f(w₁, z_t)‖ + (ρ/2)‖Σ_{k<t} α_k g_k‖ + (ρ/2)‖Σ_{k<t} α_k g'_k‖`
/// with `g_k`, `g'_k` the stochastic gradients of the runs on `S` and `S^(i)`.
#[allow(clippy::too_many_arguments)]
pub fn xi_expansiveness(
    model: &dyn LossModel,
    dataset: &Dataset,
    replacement: &Example,
    pair: &PairedRunRecord,
    w1: &[f64],
    rho: f64,
    beta: f64,
    cfg: &PowerIterConfig,
) -> Result<XiSeries> {
    if !pair.original.record_iterates || !pair.perturbed.record_iterates {
        return Err(invalid("xi_expansiveness needs recorded iterates on both runs"));
    }
    let perturbed = dataset.with_replaced(pair.replaced_index, replacement.clone())?;
    let p = model.param_dim();
    let mut acc_s = vec![0.0; p];
    let mut acc_p = vec![0.0; p];
    let horizon = pair.original.horizon();
    let mut xi = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let j = pair.original.permutation[t];
        let curv = example_hessian_norm(model, w1, &dataset[j], cfg)?.value;
        xi.push(curv + rho / 2.0 * norm(&acc_s) + rho / 2.0 * norm(&acc_p));
        let a = pair.original.alphas[t];
        let gs = model.grad(&pair.original.iterates[t], &dataset[j])?;
        let gp = model.grad(&pair.perturbed.iterates[t], &perturbed[j])?;
        acc_s.iter_mut().zip(gs.iter()).for_each(|(x, g)| *x += a * g);
        acc_p.iter_mut().zip(gp.iter()).for_each(|(x, g)| *x += a * g);
    }
    let psi = xi.iter().map(|x| x.min(beta)).collect();
    Ok(XiSeries { xi, psi })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConstants {
    #[serde(rename = "L_hat")]
    pub l_hat: f64,
    pub beta_hat: f64,
    pub rho_hat: f64,
    /// False when no consecutive pair moved, in which case `rho_hat` is 0.
    pub rho_defined: bool,
    pub pairs_visited: usize,
    pub pairs_skipped: usize,
}

const RHO_PROBES: usize = 5;
const DEGENERATE_STEP: f64 = 1e-14;

/// Maxima of gradient norm, Hessian norm and Hessian Lipschitz ratio over
/// the visited pairs `(w_t, z_{j_t})` of the given trajectories. `sample` is
/// the training set the trajectories were run on.
pub fn empirical_constants(
    trajectories: &[&Trajectory],
    model: &dyn LossModel,
    sample: &Dataset,
    cfg: &PowerIterConfig,
) -> Result<EmpiricalConstants> {
    if trajectories.is_empty() {
        return Err(invalid("empirical_constants needs at least one trajectory"));
    }
    if trajectories.iter().any(|t| !t.record_iterates) {
        return Err(invalid("empirical_constants needs recorded iterates"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut out = EmpiricalConstants {
        l_hat: 0.0,
        beta_hat: 0.0,
        rho_hat: 0.0,
        rho_defined: false,
        pairs_visited: 0,
        pairs_skipped: 0,
    };
    let p = model.param_dim();
    for traj in trajectories {
        for t in 0..traj.horizon() {
            let z = sample
                .get(traj.permutation[t])
                .ok_or_else(|| invalid("trajectory index outside the sample"))?;
            let w = &traj.iterates[t];
            out.l_hat = out.l_hat.max(norm(&model.grad(w, z)?));
            out.beta_hat = out.beta_hat.max(example_hessian_norm(model, w, z, cfg)?.value);
            out.pairs_visited += 1;
            let next = &traj.iterates[t + 1];
            let step = dist(w, next);
            if step <= DEGENERATE_STEP {
                out.pairs_skipped += 1;
                continue;
            }
            for _ in 0..RHO_PROBES {
                let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                let n = norm(&v);
                let v: Vec<f64> = v.iter().map(|x| x / n).collect();
                let a = model.hvp(next, z, &v)?;
                let b = model.hvp(w, z, &v)?;
                let diff = dist(&a, &b) / step;
                if !diff.is_finite() {
                    return Err(Error::Numeric("non-finite Hessian difference".into()));
                }
                out.rho_hat = out.rho_hat.max(diff);
            }
            out.rho_defined = true;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// Held-out risk minus training risk.
    pub signed: f64,
    pub abs: f64,
    /// `√(se_train² + se_heldout²)`
    pub stderr: f64,
}

pub fn generalization_gap(model: &dyn LossModel, w: &[f64], train: &Dataset, heldout: &Dataset) -> Result<GapEstimate> {
    let tr = empirical_risk(model, w, train)?;
    let te = risk_estimate(model, w, heldout)?;
    let signed = te.mean - tr.mean;
    Ok(GapEstimate {
        signed,
        abs: signed.abs(),
        stderr: (tr.stderr.powi(2) + te.stderr.powi(2)).sqrt(),
    })
}

/// Which training index is replaced in each replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexPolicy {
    Pinned(usize),
    /// Replicate `r` replaces index `r mod m`.
    Sweep,
    /// A fixed random subset of indices drawn from the master seed; replicates
    /// cycle through it.
    Sampled(usize),
}

impl Default for IndexPolicy {
    fn default() -> Self {
        IndexPolicy::Sampled(10)
    }
}

impl IndexPolicy {
    pub fn label(&self) -> &'static str {
        match self {
            IndexPolicy::Pinned(_) => "pinned",
            IndexPolicy::Sweep => "sweep",
            IndexPolicy::Sampled(_) => "sampled-sup",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub m: usize,
    pub schedule: StepSchedule,
    pub n_replicates: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub index_policy: IndexPolicy,
    /// Draw the probe independently of the replacement (diagnostic only).
    #[serde(default)]
    pub independent_probe: bool,
    /// Held-out size for per-replicate generalization gaps; `None` means `5m`,
    /// 0 disables them.
    #[serde(default)]
    pub heldout_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub i: usize,
    pub tau: Option<usize>,
    /// `f(w_{S,T+1}, z) − f(w_{S^(i),T+1}, z)`; NaN when diverged.
    pub gap: f64,
    pub diverged: bool,
    pub generalization_gap: f64,
    pub path_sum: f64,
    pub output_risk: f64,
    pub output_empirical_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMean {
    pub i: usize,
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySample {
    pub rows: Vec<ReplicateRow>,
    /// Mean loss gap pooled over all non-diverged replicates.
    pub mean: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    pub per_index: Vec<IndexMean>,
    /// Largest per-index mean.
    pub sup_mean: f64,
    pub policy: String,
    pub diverged: usize,
    pub generalization_gap_mean: f64,
    pub generalization_gap_stderr: f64,
    pub path_sum_mean: f64,
    pub path_sum_stderr: f64,
    pub output_risk_mean: f64,
    pub output_empirical_risk_mean: f64,
}

impl StabilitySample {
    /// CSV `replicate,seed,i,tau,gap`; `tau` is empty when never drawn.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("replicate,seed,i,tau,gap\n");
        for r in &self.rows {
            let tau = r.tau.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", r.replicate, r.seed, r.i, tau, r.gap));
        }
        out
    }
}

fn replaced_indices(policy: IndexPolicy, m: usize, seed: u64) -> Result<Vec<usize>> {
    match policy {
        IndexPolicy::Pinned(i) if i < m => Ok(vec![i]),
        IndexPolicy::Pinned(i) => Err(invalid(format!("pinned index {i} is outside 0..{m}"))),
        IndexPolicy::Sweep => Ok((0..m).collect()),
        IndexPolicy::Sampled(k) => {
            if k == 0 {
                return Err(invalid("sampled index policy needs at least one index"));
            }
            let perm = crate::sgd::sample_permutation(m, derive_seed(seed, u64::MAX));
            Ok(perm.into_iter().take(k.min(m)).collect())
        }
    }
}

/// On-average stability by coupled runs. Each replicate draws a fresh
/// training set, replacement example and SGD seed from its derived seed.
/// Replicates run in parallel; rows are ordered by replicate id. Diverged
/// replicates are kept as rows but excluded from every mean.
pub fn empirical_stability(
    model: &dyn LossModel,
    source: &dyn DataSource,
    config: &StabilityConfig,
    w1: &ParamVector,
) -> Result<StabilitySample> {
    if config.n_replicates == 0 {
        return Err(invalid("n_replicates must be at least 1"));
    }
    if config.m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    let indices = replaced_indices(config.index_policy, config.m, config.master_seed)?;
    let heldout = config.heldout_size.unwrap_or(5 * config.m);
    let rows: Vec<ReplicateRow> = (0..config.n_replicates)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(config.master_seed, r as u64);
            let i = indices[r % indices.len()];
            replicate(model, source, config, w1, r, seed, i, heldout)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(rows, config.index_policy))
}

#[allow(clippy::too_many_arguments)]
fn replicate(
    model: &dyn LossModel,
    source: &dyn DataSource,
    config: &StabilityConfig,
    w1: &ParamVector,
    r: usize,
    seed: u64,
    i: usize,
    heldout: usize,
) -> Result<ReplicateRow> {
    let train = source.draw(config.m, derive_seed(seed, 0))?;
    let replacement = source.draw(1, derive_seed(seed, 1))?[0].clone();
    let probe = if config.independent_probe {
        source.draw(1, derive_seed(seed, 3))?[0].clone()
    } else {
        replacement.clone()
    };
    let sgd = SgdConfig {
        schedule: config.schedule,
        seed: derive_seed(seed, 2),
        record_iterates: false,
    };
    let diverged_row = || ReplicateRow {
        replicate: r,
        seed,
        i,
        tau: None,
        gap: f64::NAN,
        diverged: true,
        generalization_gap: f64::NAN,
        path_sum: f64::NAN,
        output_risk: f64::NAN,
        output_empirical_risk: f64::NAN,
    };
    let rec = match paired_run(model, &train, i, &replacement, &probe, &sgd, w1) {
        Ok(rec) => rec,
        Err(Error::Divergence { .. }) => return Ok(diverged_row()),
        Err(e) => return Err(e),
    };
    let w_out = rec.original.last();
    let emp = empirical_risk(model, w_out, &train)?.mean;
    let risk = if heldout > 0 {
        let test = source.draw(heldout, derive_seed(seed, 4))?;
        risk_estimate(model, w_out, &test)?.mean
    } else {
        f64::NAN
    };
    Ok(ReplicateRow {
        replicate: r,
        seed,
        i,
        tau: rec.tau,
        gap: rec.final_loss_gap_on_probe,
        diverged: false,
        generalization_gap: risk - emp,
        path_sum: gradient_path_sum(&rec.original),
        output_risk: risk,
        output_empirical_risk: emp,
    })
}

fn summarize(rows: Vec<ReplicateRow>, policy: IndexPolicy) -> StabilitySample {
    let ok: Vec<&ReplicateRow> = rows.iter().filter(|r| !r.diverged).collect();
    let col = |f: fn(&ReplicateRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).filter(|v| v.is_finite()).collect() };
    let (mean, stderr) = mean_stderr(&col(|r| r.gap));
    let (gg_mean, gg_se) = mean_stderr(&col(|r| r.generalization_gap));
    let (ps_mean, ps_se) = mean_stderr(&col(|r| r.path_sum));
    let (risk_mean, _) = mean_stderr(&col(|r| r.output_risk));
    let (emp_mean, _) = mean_stderr(&col(|r| r.output_empirical_risk));
    let mut by_index: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in &ok {
        let e = by_index.entry(r.i).or_insert((0.0, 0));
        e.0 += r.gap;
        e.1 += 1;
    }
    let per_index: Vec<IndexMean> = by_index
        .into_iter()
        .map(|(i, (s, n))| IndexMean { i, mean: s / n as f64, n })
        .collect();
    let sup_mean = per_index.iter().map(|p| p.mean).fold(f64::NEG_INFINITY, f64::max);
    let diverged = rows.len() - ok.len();
    StabilitySample {
        ci95: (mean - 1.96 * stderr, mean + 1.96 * stderr),
        mean,
        stderr,
        per_index,
        sup_mean,
        policy: policy.label().to_string(),
        diverged,
        generalization_gap_mean: gg_mean,
        generalization_gap_stderr: gg_se,
        path_sum_mean: ps_mean,
        path_sum_stderr: ps_se,
        output_risk_mean: risk_mean,
        output_empirical_risk_mean: emp_mean,
        rows,
    }
}
