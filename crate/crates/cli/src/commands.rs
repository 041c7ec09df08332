//! The five subcommands. Each returns its result files in memory; the binary
//! writes them unless `--dry-run` was given.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use stablab::bounds::{
    all_bounds, gamma, transfer_select_convex, transfer_select_nonconvex, uniform_convex_bound, BoundReport,
    NonconvexCandidate, StabilityInputs, TransferSelection,
};
use stablab::curvature::{example_hessian_norm, expected_hessian_norm, HessianNormEstimate};
use stablab::estimators::{
    empirical_constants, empirical_risk, empirical_stability, generalization_gap, path_bound, risk_estimate,
    sigma_estimate_trajectory, EmpiricalConstants, IndexPolicy, RiskEstimate, StabilityConfig, StabilitySample,
    VarianceEstimate,
};
use stablab::sgd::{
    derive_seed, paired_run, run_sgd, step_conditions, validate_schedule, PairedRunRecord, ScheduleKind, SgdConfig,
    StepSchedule,
};
use stablab::synthetic::{gaussian_vector, DataSource, EmpiricalSource, SyntheticSpec};
use stablab::{
    Constant, Dataset, LogisticRegression, LossModel, ModelKind, ParamFile, ParamVector, Quadratic,
    SmoothnessConstants, TanhMlp,
};

use crate::config::{ConstantSource, CurvatureSample, DataSpec, ExperimentConfig, InitSpec, ModelSpec};
use crate::error::CliError;
use crate::output::{num, provenance_line, to_json_pretty, write_plot_tsv, OutputSet, Table};

// Seed offsets under the master seed.
const SEED_REFERENCE_TRAIN: u64 = 1000;
const SEED_REFERENCE_HELDOUT: u64 = 1001;
const SEED_REFERENCE_SGD: u64 = 1002;
const SEED_REFERENCE_REPLACEMENT: u64 = 1003;
const SEED_EXTRA_REFERENCE: u64 = 1100;
const SEED_REPLICATES: u64 = 2000;
const SEED_PRETRAIN: u64 = 3000;
const SEED_LAUNCH: u64 = 4000;
const SEED_INIT: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Stability,
    WarmStartSweep,
    TransferSelect,
    ComputeBounds,
    GenData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Stability => "stability",
            Command::WarmStartSweep => "warm-start-sweep",
            Command::TransferSelect => "transfer-select",
            Command::ComputeBounds => "compute-bounds",
            Command::GenData => "gen-data",
        }
    }

    /// Files the command writes.
    pub fn outputs(self, cfg: Option<&ExperimentConfig>) -> Vec<String> {
        let v = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match self {
            Command::Stability => v(&[
                "summary.json",
                "rows.csv",
                "stability_sample.csv",
                "trajectory.csv",
                "plotdata_delta.tsv",
            ]),
            Command::WarmStartSweep => {
                let mut out = v(&["summary.json", "rows.csv"]);
                out.extend(WARM_VARIANTS.iter().map(|n| format!("plotdata_{n}.tsv")));
                if cfg.is_some_and(|c| c.warm_start.replicates > 0) {
                    out.push("plotdata_epsilon_hat.tsv".into());
                }
                out
            }
            Command::TransferSelect => v(&["summary.json", "rows.csv"]),
            Command::ComputeBounds => v(&["summary.json", "rows.csv"]),
            Command::GenData => {
                let mut out = v(&["summary.json", "train.csv"]);
                if let Some(c) = cfg {
                    if c.gen_data.heldout > 0 {
                        out.push("heldout.csv".into());
                    }
                    if matches!(&c.data, DataSpec::Synthetic { generator: SyntheticSpec::TeacherMlp(_) }) {
                        out.push("teacher.json".into());
                    }
                }
                out.sort();
                out
            }
        }
    }
}

/// A fully parsed invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<ExperimentConfig>,
    /// `compute-bounds` inputs given directly with `--inputs`.
    pub inputs: Option<StabilityInputs>,
    pub seed: Option<u64>,
}

impl Invocation {
    pub fn new(command: Command, config: Option<ExperimentConfig>) -> Self {
        Self {
            command,
            config,
            inputs: None,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_inputs(mut self, inputs: Option<StabilityInputs>) -> Self {
        self.inputs = inputs;
        self
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.or(self.config.as_ref().map(|c| c.seed)).unwrap_or(0)
    }

    /// The config with `--seed` applied, as echoed into every output.
    fn resolved_config(&self) -> Option<ExperimentConfig> {
        self.config.clone().map(|mut c| {
            c.seed = self.effective_seed();
            c
        })
    }

    fn config(&self) -> Result<ExperimentConfig, CliError> {
        self.resolved_config()
            .ok_or_else(|| CliError::Usage(format!("{} needs --config", self.command.name())))
    }

    fn bounds_inputs(&self) -> Result<StabilityInputs, CliError> {
        let inputs = match (&self.inputs, self.config.as_ref().and_then(|c| c.bounds.inputs.as_ref())) {
            (Some(i), _) => *i,
            (None, Some(path)) => load_inputs(path)?,
            (None, None) => {
                return Err(CliError::Usage(
                    "compute-bounds needs --inputs or bounds.inputs in the config".into(),
                ))
            }
        };
        inputs.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(inputs)
    }

    fn provenance(&self) -> Result<Value, CliError> {
        let mut v = json!({});
        if let Some(cfg) = self.resolved_config() {
            v["config"] = to_value(&cfg);
        }
        if self.command == Command::ComputeBounds {
            v["inputs"] = to_value(&self.bounds_inputs()?);
        }
        Ok(v)
    }

    /// Validates everything that can be checked without running an
    /// experiment and describes what would be run.
    pub fn plan(&self) -> Result<Value, CliError> {
        let seed = self.effective_seed();
        let mut plan = json!({
            "command": self.command.name(),
            "seed": seed,
            "outputs": self.command.outputs(self.config.as_ref()),
        });
        if self.command == Command::ComputeBounds {
            plan["inputs"] = to_value(&self.bounds_inputs()?);
            if let Some(cfg) = self.resolved_config() {
                plan["config"] = to_value(&cfg);
            }
            return Ok(plan);
        }
        let cfg = self.config()?;
        let env = Env::new(&cfg, seed)?;
        if self.command == Command::WarmStartSweep && env.model.kind() != ModelKind::Nonconvex {
            return Err(CliError::Usage("warm-start-sweep needs a non-convex model".into()));
        }
        if self.command == Command::TransferSelect {
            load_candidates(&cfg, env.model.as_ref())?;
        }
        plan["config"] = to_value(&cfg);
        plan["model"] = json!({
            "name": env.model.name(),
            "kind": env.model.kind(),
            "param_dim": env.model.param_dim(),
            "input_dim": env.model.input_dim(),
        });
        plan["step_constant"] = match (cfg.sgd.c, cfg.sgd.c_over_beta) {
            (Some(c), _) => json!({ "c": c }),
            (_, k) => json!({ "c_over_beta": k }),
        };
        Ok(plan)
    }

    pub fn run(&self) -> Result<OutputSet, CliError> {
        let seed = self.effective_seed();
        let prov = self.provenance()?;
        let preamble = provenance_line(self.command.name(), seed, &prov);
        match self.command {
            Command::ComputeBounds => compute_bounds(&self.bounds_inputs()?, seed, &prov, &preamble),
            cmd => {
                let cfg = self.config()?;
                let env = Env::new(&cfg, seed)?;
                let ctx = Ctx {
                    cfg: &cfg,
                    seed,
                    prov,
                    preamble,
                    env,
                };
                match cmd {
                    Command::Stability => stability(&ctx),
                    Command::WarmStartSweep => warm_start_sweep(&ctx),
                    Command::TransferSelect => transfer_select(&ctx),
                    Command::GenData => gen_data(&ctx),
                    Command::ComputeBounds => unreachable!(),
                }
            }
        }
    }
}

pub fn load_inputs(path: &Path) -> Result<StabilityInputs, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_inputs(&text)
}

pub fn parse_inputs(text: &str) -> Result<StabilityInputs, CliError> {
    let inputs: StabilityInputs =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("stability inputs: {e}")))?;
    inputs.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(inputs)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("result types serialize")
}

/// Model, data source and initial point built from a config.
pub struct Env {
    pub model: Box<dyn LossModel>,
    pub source: Box<dyn DataSource>,
    pub w1: ParamVector,
}

impl Env {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self, CliError> {
        let source: Box<dyn DataSource> = match &cfg.data {
            DataSpec::Synthetic { generator } => Box::new(generator.clone()),
            DataSpec::Csv { path } => {
                let file =
                    std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                Box::new(EmpiricalSource::new(Dataset::from_csv_reader(file)?))
            }
        };
        let d = source.dim();
        let model: Box<dyn LossModel> = match &cfg.model {
            ModelSpec::Logistic => Box::new(LogisticRegression::new(d)?),
            ModelSpec::TanhMlp {
                hidden,
                head,
                weight_box,
                label_bound,
            } => {
                let mlp = TanhMlp::new(d, *hidden, *head)?;
                Box::new(match weight_box {
                    Some(b) => mlp.with_weight_box(*b, *label_bound)?,
                    None => mlp,
                })
            }
            ModelSpec::Quadratic { diag } => {
                if diag.len() != d {
                    return Err(CliError::Config(format!(
                        "model.diag has {} entries but the data has dimension {d}",
                        diag.len()
                    )));
                }
                Box::new(Quadratic::diagonal(diag)?)
            }
        };
        let p = model.param_dim();
        let w1 = match &cfg.init {
            InitSpec::Zeros => ParamVector::zeros(p),
            InitSpec::Random { scale, seed_offset } => {
                gaussian_vector(p, *scale, derive_seed(seed, SEED_INIT + seed_offset))
            }
            InitSpec::Teacher => teacher_init(cfg, model.as_ref())?,
            InitSpec::File { path } => load_param_file(path, p)?.1,
        };
        Ok(Self { model, source, w1 })
    }
}

fn teacher_init(cfg: &ExperimentConfig, model: &dyn LossModel) -> Result<ParamVector, CliError> {
    let (DataSpec::Synthetic {
        generator: SyntheticSpec::TeacherMlp(t),
    }, ModelSpec::TanhMlp { hidden, head, .. }) = (&cfg.data, &cfg.model)
    else {
        return Err(CliError::Config(
            "init.kind = \"teacher\" needs a teacher_mlp generator and a tanh_mlp model".into(),
        ));
    };
    if *hidden != t.hidden || *head != t.head() {
        return Err(CliError::Config("model shape or loss head differs from the teacher network".into()));
    }
    let w = t.teacher_weights()?;
    debug_assert_eq!(w.len(), model.param_dim());
    Ok(w)
}

fn load_param_file(path: &Path, p: usize) -> Result<(Option<String>, ParamVector), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let file = ParamFile::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if file.params.len() != p {
        return Err(CliError::Config(format!(
            "{}: {} parameters, model needs {p}",
            path.display(),
            file.params.len()
        )));
    }
    Ok((file.label, ParamVector(file.params)))
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    prov: Value,
    preamble: String,
    env: Env,
}

impl Ctx<'_> {
    fn model(&self) -> &dyn LossModel {
        self.env.model.as_ref()
    }

    fn summary(&self, command: &str, body: Value) -> String {
        let mut v = json!({ "command": command, "seed": self.seed });
        if let Value::Object(p) = &self.prov {
            for (k, x) in p {
                v[k] = x.clone();
            }
        }
        if let Value::Object(b) = body {
            for (k, x) in b {
                v[k] = x;
            }
        }
        to_json_pretty(&v)
    }

    /// Reference training and held-out samples for the measurements.
    fn reference_samples(&self) -> Result<(Dataset, Dataset), CliError> {
        let st = &self.cfg.stability;
        Ok((
            self.env.source.draw(st.m, derive_seed(self.seed, SEED_REFERENCE_TRAIN))?,
            self.env.source.draw(st.heldout(), derive_seed(self.seed, SEED_REFERENCE_HELDOUT))?,
        ))
    }

    /// Step constant `c`. With `c_over_beta`, `β` is the declared constant
    /// when finite and otherwise the largest per-example Hessian norm at the
    /// given points over the reference training set.
    fn step_constant(&self, train: &Dataset, points: &[&ParamVector]) -> Result<(f64, Value), CliError> {
        if let Some(c) = self.cfg.sgd.c {
            return Ok((c, json!({ "source": "c" })));
        }
        let k = self.cfg.sgd.c_over_beta.expect("validated config has a step constant");
        if let Some(beta) = self.model().declared_constants(train).beta.finite() {
            return Ok((k / beta, json!({ "source": "c_over_beta", "beta": beta, "beta_source": "declared" })));
        }
        let mut beta: f64 = 0.0;
        for w in points {
            for z in train.iter() {
                beta = beta.max(example_hessian_norm(self.model(), w, z, &self.cfg.power_iteration)?.value);
            }
        }
        if !(beta > 0.0) {
            return Err(CliError::Numeric("measured β at the initial point is zero".into()));
        }
        Ok((k / beta, json!({ "source": "c_over_beta", "beta": beta, "beta_source": "initial_point" })))
    }

    fn schedule(&self, c: f64) -> Result<StepSchedule, CliError> {
        Ok(StepSchedule::new(self.cfg.sgd.schedule, c, self.cfg.sgd.horizon)?)
    }

    fn replicate_index(&self) -> usize {
        match self.cfg.stability.index_policy {
            IndexPolicy::Pinned(i) => i.min(self.cfg.stability.m - 1),
            _ => 0,
        }
    }

    /// Every point-wise quantity the bounds need at `w`.
    fn measure(&self, w: &ParamVector, train: &Dataset, heldout: &Dataset, schedule: StepSchedule) -> Result<Measured, CliError> {
        let model = self.model();
        let pi = &self.cfg.power_iteration;
        let curvature_set = match self.cfg.constants.curvature_sample {
            CurvatureSample::Heldout => heldout,
            CurvatureSample::Train => train,
        };
        let r1 = risk_estimate(model, w, heldout)?;
        let hbar = expected_hessian_norm(model, w, curvature_set, pi)?;
        let replacement = self
            .env
            .source
            .draw(1, derive_seed(self.seed, SEED_REFERENCE_REPLACEMENT))?[0]
            .clone();
        let sgd = SgdConfig {
            schedule,
            seed: derive_seed(self.seed, SEED_REFERENCE_SGD),
            record_iterates: true,
        };
        let reference = paired_run(model, train, self.replicate_index(), &replacement, &replacement, &sgd, w)?;
        let sigma = sigma_estimate_trajectory(model, &reference.original, heldout)?;
        let mut empirical = empirical_constants(&[&reference.original], model, train, pi)?;
        for k in 1..self.cfg.constants.reference_runs {
            let s = self.env.source.draw(train.len(), derive_seed(self.seed, SEED_EXTRA_REFERENCE + 2 * k as u64))?;
            let cfg = SgdConfig {
                seed: derive_seed(self.seed, SEED_EXTRA_REFERENCE + 2 * k as u64 + 1),
                ..sgd
            };
            let traj = run_sgd(model, &s, &cfg, w)?;
            let e = empirical_constants(&[&traj], model, &s, pi)?;
            empirical.l_hat = empirical.l_hat.max(e.l_hat);
            empirical.beta_hat = empirical.beta_hat.max(e.beta_hat);
            empirical.rho_hat = empirical.rho_hat.max(e.rho_hat);
            empirical.rho_defined |= e.rho_defined;
            empirical.pairs_visited += e.pairs_visited;
            empirical.pairs_skipped += e.pairs_skipped;
        }
        let declared = model.declared_constants(train);
        let used = choose_constants(self.cfg.constants.source, &declared, &empirical)?;
        Ok(Measured {
            r1,
            hbar,
            sigma,
            empirical,
            declared,
            used,
            reference,
        })
    }

    fn inputs(&self, schedule: &StepSchedule, m: &Measured, r: f64, remp: f64) -> Result<StabilityInputs, CliError> {
        let rstar = self.cfg.constants.rstar;
        let inputs = StabilityInputs {
            m: self.cfg.stability.m,
            horizon: schedule.horizon,
            c: schedule.c,
            lipschitz: m.used.l,
            beta: m.used.beta,
            rho: m.used.rho,
            sigma: m.sigma.sigma(),
            r1: m.r1.mean.max(rstar),
            rstar,
            hbar: m.hbar.mean,
            r,
            remp,
            loss_bound: m.used.b,
        };
        inputs.validate().map_err(|e| CliError::Numeric(format!("measured inputs: {e}")))?;
        Ok(inputs)
    }

    fn stability_sample(&self, schedule: StepSchedule, w: &ParamVector, replicates: usize) -> Result<StabilitySample, CliError> {
        let st = &self.cfg.stability;
        let cfg = StabilityConfig {
            m: st.m,
            schedule,
            n_replicates: replicates,
            master_seed: derive_seed(self.seed, SEED_REPLICATES),
            index_policy: st.index_policy,
            independent_probe: st.independent_probe,
            heldout_size: Some(st.heldout()),
        };
        let sample = empirical_stability(self.model(), self.env.source.as_ref(), &cfg, w)?;
        if sample.diverged == sample.rows.len() {
            return Err(CliError::Numeric("every replicate diverged".into()));
        }
        Ok(sample)
    }
}

struct Measured {
    r1: RiskEstimate,
    hbar: HessianNormEstimate,
    sigma: VarianceEstimate,
    empirical: EmpiricalConstants,
    declared: SmoothnessConstants,
    used: UsedConstants,
    reference: PairedRunRecord,
}

#[derive(Debug, Clone, Serialize)]
struct UsedConstants {
    #[serde(rename = "L")]
    l: f64,
    beta: f64,
    rho: f64,
    #[serde(rename = "B")]
    b: Option<f64>,
    sources: BTreeMap<&'static str, &'static str>,
}

fn choose_constants(
    source: ConstantSource,
    declared: &SmoothnessConstants,
    empirical: &EmpiricalConstants,
) -> Result<UsedConstants, CliError> {
    let mut sources = BTreeMap::new();
    let mut pick = |name: &'static str, d: Constant, e: f64| -> Result<f64, CliError> {
        let (v, s) = match (source, d.finite()) {
            (ConstantSource::Empirical, _) => (e, "empirical"),
            (_, Some(v)) => (v, "declared"),
            (ConstantSource::Auto, None) => (e, "empirical"),
            (ConstantSource::Declared, None) => {
                return Err(CliError::Config(format!(
                    "constants.source = \"declared\" but the model declares no finite {name}"
                )))
            }
        };
        sources.insert(name, s);
        Ok(v)
    };
    let l = pick("L", declared.lipschitz, empirical.l_hat)?;
    let beta = pick("beta", declared.beta, empirical.beta_hat)?;
    let rho = pick("rho", declared.rho, empirical.rho_hat)?;
    if !(beta > 0.0) {
        return Err(CliError::Numeric("smoothness constant β is zero".into()));
    }
    Ok(UsedConstants {
        l,
        beta,
        rho,
        b: declared.loss_upper_bound.finite(),
        sources,
    })
}

fn used_as_declared(u: &UsedConstants, declared: &SmoothnessConstants) -> SmoothnessConstants {
    SmoothnessConstants {
        lipschitz: Constant::Finite(u.l),
        beta: Constant::Finite(u.beta),
        rho: Constant::Finite(u.rho),
        loss_upper_bound: declared.loss_upper_bound,
    }
}

fn report<'a>(reports: &'a [BoundReport], variant: &str) -> &'a BoundReport {
    reports
        .iter()
        .find(|r| r.variant == variant)
        .unwrap_or_else(|| panic!("all_bounds always reports {variant}"))
}

fn flags(r: &BoundReport) -> String {
    r.validity
        .iter()
        .map(|v| format!("{}={}", v.assumption, v.pass))
        .collect::<Vec<_>>()
        .join(";")
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        f64::INFINITY
    }
}

fn stability(ctx: &Ctx) -> Result<OutputSet, CliError> {
    let model = ctx.model();
    let (train, heldout) = ctx.reference_samples()?;
    let w1 = &ctx.env.w1;
    let (c, c_info) = ctx.step_constant(&train, &[w1])?;
    let schedule = ctx.schedule(c)?;
    let meas = ctx.measure(w1, &train, &heldout, schedule)?;
    let sample = ctx.stability_sample(schedule, w1, ctx.cfg.stability.replicates)?;
    let inputs = ctx.inputs(&schedule, &meas, sample.output_risk_mean, sample.output_empirical_risk_mean)?;
    let reports = all_bounds(&inputs)?;
    let step_validity = validate_schedule(&schedule, &used_as_declared(&meas.used, &meas.declared));

    let comparison = match model.kind() {
        ModelKind::Convex => {
            let convex = report(&reports, "convex_with_L").value;
            let uniform = uniform_convex_bound(inputs.lipschitz, schedule.sum(), inputs.m);
            json!({
                "kind": "convex",
                "convex_bound": convex,
                "convex_bound_without_L": report(&reports, "convex_without_L").value,
                "uniform_convex_bound": uniform,
                "ratio_uniform_over_data_dependent": ratio(uniform, convex),
                "epsilon_hat_within_bound": sample.mean <= convex,
            })
        }
        ModelKind::Nonconvex => {
            let data = report(&reports, "nonconvex_theorem").value;
            let uniform = report(&reports, "uniform_theorem").value;
            json!({
                "kind": "nonconvex",
                "gamma": gamma(&inputs)?,
                "data_dependent_bound": data,
                "uniform_bound": uniform,
                "ratio_uniform_over_data_dependent": ratio(uniform, data),
                "data_dependent_bound_proof": report(&reports, "nonconvex_proof").value,
                "uniform_bound_proof": report(&reports, "uniform_proof").value,
                "ratio_proof": ratio(report(&reports, "uniform_proof").value, report(&reports, "nonconvex_proof").value),
                "epsilon_hat_within_bound": sample.mean <= data,
            })
        }
    };
    let path = path_bound(inputs.r1, inputs.rstar, inputs.sigma, inputs.beta, &schedule)?;
    let body = json!({
        "model": { "name": model.name(), "kind": model.kind(), "param_dim": model.param_dim() },
        "schedule": { "kind": schedule.kind, "c": c, "T": schedule.horizon, "within_theory": schedule.horizon <= inputs.m },
        "step_constant": c_info,
        "step_validity": step_validity,
        "constants": {
            "declared": meas.declared,
            "empirical": meas.empirical,
            "used": meas.used,
        },
        "measurements": {
            "R1": meas.r1,
            "hbar": meas.hbar,
            "hbar_sample": match ctx.cfg.constants.curvature_sample {
                CurvatureSample::Heldout => "heldout",
                CurvatureSample::Train => "train",
            },
            "sigma": { "sigma": meas.sigma.sigma(), "sigma_sq": meas.sigma.sigma_sq, "evaluation_points": meas.sigma.evaluation_points },
        },
        "epsilon_hat": {
            "mean": sample.mean,
            "stderr": sample.stderr,
            "ci95": [sample.ci95.0, sample.ci95.1],
            "sup_mean": sample.sup_mean,
            "policy": sample.policy,
            "per_index": sample.per_index,
            "replicates": sample.rows.len(),
            "diverged": sample.diverged,
        },
        "generalization_gap": { "mean": sample.generalization_gap_mean, "stderr": sample.generalization_gap_stderr },
        "output_risk": { "r": sample.output_risk_mean, "Remp": sample.output_empirical_risk_mean },
        "path_sum": { "mean": sample.path_sum_mean, "stderr": sample.path_sum_stderr, "path_bound": path },
        "inputs": inputs,
        "bounds": reports,
        "comparison": comparison,
    });

    let mut rows = Table::new(&[
        "experiment", "replicate", "seed", "i", "tau", "gap", "generalization_gap", "diverged", "variant", "bound",
        "valid", "flags",
    ]);
    for r in &sample.rows {
        for b in &reports {
            rows.push(vec![
                "stability".into(),
                r.replicate.to_string(),
                r.seed.to_string(),
                r.i.to_string(),
                r.tau.map(|t| t.to_string()).unwrap_or_default(),
                num(r.gap),
                num(r.generalization_gap),
                r.diverged.to_string(),
                b.variant.clone(),
                num(b.value),
                b.all_valid().to_string(),
                flags(b),
            ]);
        }
    }
    let deltas: Vec<(f64, f64)> = meas
        .reference
        .delta_series
        .iter()
        .enumerate()
        .map(|(t, d)| ((t + 1) as f64, *d))
        .collect();

    let mut out = OutputSet::default();
    out.insert("summary.json", ctx.summary("stability", body));
    out.insert("rows.csv", rows.render(&ctx.preamble));
    out.insert("stability_sample.csv", format!("{}{}", ctx.preamble, sample.to_csv_string()));
    out.insert("trajectory.csv", format!("{}{}", ctx.preamble, meas.reference.to_csv_string()));
    out.insert("plotdata_delta.tsv", write_plot_tsv(&ctx.preamble, &deltas));
    Ok(out)
}

const WARM_VARIANTS: [&str; 4] = ["nonconvex_theorem", "nonconvex_proof", "uniform_theorem", "uniform_proof"];

fn warm_start_sweep(ctx: &Ctx) -> Result<OutputSet, CliError> {
    let model = ctx.model();
    if model.kind() != ModelKind::Nonconvex {
        return Err(CliError::Usage("warm-start-sweep needs a non-convex model".into()));
    }
    let ws = &ctx.cfg.warm_start;
    let pretrain_steps = (ws.count - 1) * ws.every;
    let points: Vec<(usize, ParamVector)> = if pretrain_steps == 0 {
        vec![(0, ctx.env.w1.clone())]
    } else {
        let pool = ctx.env.source.draw(ws.pretrain_m, derive_seed(ctx.seed, SEED_PRETRAIN))?;
        let sgd = SgdConfig {
            schedule: StepSchedule::new(ScheduleKind::Constant, ws.pretrain_step, pretrain_steps)?,
            seed: derive_seed(ctx.seed, SEED_PRETRAIN + 1),
            record_iterates: true,
        };
        let traj = run_sgd(model, &pool, &sgd, &ctx.env.w1)?;
        (0..ws.count)
            .map(|j| (j * ws.every, traj.iterates[j * ws.every].clone()))
            .collect()
    };

    let (train, heldout) = ctx.reference_samples()?;
    let (c, c_info) = ctx.step_constant(&train, &[&points[0].1])?;
    let schedule = ctx.schedule(c)?;

    let mut entries = Vec::new();
    let mut rows = Table::new(&[
        "experiment", "warm_start", "step", "R1", "hbar", "sigma", "L", "beta", "rho", "gamma", "r", "epsilon_hat",
        "epsilon_hat_stderr", "nonconvex_theorem", "nonconvex_proof", "uniform_theorem", "uniform_proof",
        "ratio_theorem", "ratio_proof", "nonconvex_ok",
    ]);
    let mut plots: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (j, (step, w)) in points.iter().enumerate() {
        let meas = ctx.measure(w, &train, &heldout, schedule)?;
        let (r, remp, eps) = if ws.replicates > 0 {
            let s = ctx.stability_sample(schedule, w, ws.replicates)?;
            (s.output_risk_mean, s.output_empirical_risk_mean, Some((s.mean, s.stderr)))
        } else {
            let w_out = meas.reference.original.last();
            (risk_estimate(model, w_out, &heldout)?.mean, empirical_risk(model, w_out, &train)?.mean, None)
        };
        let inputs = ctx.inputs(&schedule, &meas, r, remp)?;
        let reports = all_bounds(&inputs)?;
        let g = gamma(&inputs)?;
        let value = |v: &str| report(&reports, v).value;
        let ratio_t = ratio(value("uniform_theorem"), value("nonconvex_theorem"));
        let ratio_p = ratio(value("uniform_proof"), value("nonconvex_proof"));
        let nonconvex_ok = report(&reports, "nonconvex_theorem").flag("nonconvex_ok").unwrap_or(false);
        for v in WARM_VARIANTS {
            plots.entry(v.to_string()).or_default().push((*step as f64, value(v)));
        }
        if let Some((m, _)) = eps {
            plots.entry("epsilon_hat".into()).or_default().push((*step as f64, m));
        }
        rows.push(vec![
            "warm-start-sweep".into(),
            j.to_string(),
            step.to_string(),
            num(inputs.r1),
            num(inputs.hbar),
            num(inputs.sigma),
            num(inputs.lipschitz),
            num(inputs.beta),
            num(inputs.rho),
            num(g),
            num(r),
            eps.map(|e| num(e.0)).unwrap_or_default(),
            eps.map(|e| num(e.1)).unwrap_or_default(),
            num(value("nonconvex_theorem")),
            num(value("nonconvex_proof")),
            num(value("uniform_theorem")),
            num(value("uniform_proof")),
            num(ratio_t),
            num(ratio_p),
            nonconvex_ok.to_string(),
        ]);
        let bounds: BTreeMap<&str, f64> = WARM_VARIANTS.iter().map(|v| (*v, value(v))).collect();
        entries.push(json!({
            "warm_start": j,
            "step": step,
            "R1": meas.r1,
            "hbar": meas.hbar,
            "sigma": meas.sigma.sigma(),
            "constants": meas.used,
            "empirical_constants": meas.empirical,
            "gamma": g,
            "epsilon_hat": eps.map(|(m, s)| json!({ "mean": m, "stderr": s })),
            "inputs": inputs,
            "bounds": bounds,
            "ratio_theorem": ratio_t,
            "ratio_proof": ratio_p,
            "reports": reports.iter().filter(|r| WARM_VARIANTS.contains(&r.variant.as_str())).collect::<Vec<_>>(),
        }));
    }

    let body = json!({
        "model": { "name": model.name(), "kind": model.kind(), "param_dim": model.param_dim() },
        "schedule": { "kind": schedule.kind, "c": c, "T": schedule.horizon },
        "step_constant": c_info,
        "pretraining": { "steps": pretrain_steps, "step_size": ws.pretrain_step, "m": ws.pretrain_m },
        "warm_starts": entries,
    });
    let mut out = OutputSet::default();
    out.insert("summary.json", ctx.summary("warm-start-sweep", body));
    out.insert("rows.csv", rows.render(&ctx.preamble));
    for (name, pts) in plots {
        out.insert(format!("plotdata_{name}.tsv"), write_plot_tsv(&ctx.preamble, &pts));
    }
    Ok(out)
}

struct Candidate {
    label: String,
    path: PathBuf,
    w: ParamVector,
}

fn load_candidates(cfg: &ExperimentConfig, model: &dyn LossModel) -> Result<Vec<Candidate>, CliError> {
    if cfg.transfer.sources.is_empty() {
        return Err(CliError::Config("transfer.sources must list at least one parameter file".into()));
    }
    cfg.transfer
        .sources
        .iter()
        .map(|path| {
            let (label, w) = load_param_file(path, model.param_dim())?;
            let label = label.unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            Ok(Candidate {
                label,
                path: path.clone(),
                w,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
struct LaunchSummary {
    replicates: usize,
    gap_mean: f64,
    gap_stderr: f64,
    abs_gap_mean: f64,
    diverged: usize,
}

/// SGD from `w` on fresh draws, returning the mean generalization gap.
fn launch(ctx: &Ctx, w: &ParamVector, schedule: StepSchedule, n: usize) -> Result<LaunchSummary, CliError> {
    let model = ctx.model();
    let st = &ctx.cfg.stability;
    let mut gaps = Vec::with_capacity(n);
    let mut diverged = 0;
    for r in 0..n {
        let base = derive_seed(ctx.seed, SEED_LAUNCH + r as u64);
        let train = ctx.env.source.draw(st.m, derive_seed(base, 0))?;
        let heldout = ctx.env.source.draw(st.heldout(), derive_seed(base, 1))?;
        let sgd = SgdConfig {
            schedule,
            seed: derive_seed(base, 2),
            record_iterates: false,
        };
        match run_sgd(model, &train, &sgd, w) {
            Ok(traj) => gaps.push(generalization_gap(model, traj.last(), &train, &heldout)?.signed),
            Err(stablab::Error::Divergence { .. }) => diverged += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let k = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / k;
    let var = if gaps.len() > 1 {
        gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Ok(LaunchSummary {
        replicates: n,
        gap_mean: mean,
        gap_stderr: (var / k).sqrt(),
        abs_gap_mean: gaps.iter().map(|g| g.abs()).sum::<f64>() / k,
        diverged,
    })
}

fn transfer_select(ctx: &Ctx) -> Result<OutputSet, CliError> {
    let model = ctx.model();
    let cands = load_candidates(ctx.cfg, model)?;
    let (train, heldout) = ctx.reference_samples()?;
    let m = train.len();
    let curvature_set = match ctx.cfg.constants.curvature_sample {
        CurvatureSample::Heldout => &heldout,
        CurvatureSample::Train => &train,
    };
    let points: Vec<&ParamVector> = cands.iter().map(|c| &c.w).collect();
    let (c, c_info) = ctx.step_constant(&train, &points)?;
    let schedule = ctx.schedule(c)?;
    let risks: Vec<f64> = cands
        .iter()
        .map(|k| Ok(empirical_risk(model, &k.w, &train)?.mean))
        .collect::<Result<_, CliError>>()?;

    let selection: TransferSelection = match model.kind() {
        ModelKind::Convex => {
            let input: Vec<(usize, f64)> = risks.iter().copied().enumerate().collect();
            transfer_select_convex(&input, m)?
        }
        ModelKind::Nonconvex => {
            let mut input = Vec::with_capacity(cands.len());
            for (k, cand) in cands.iter().enumerate() {
                let h = expected_hessian_norm(model, &cand.w, curvature_set, &ctx.cfg.power_iteration)?;
                input.push(NonconvexCandidate {
                    index: k,
                    empirical_risk: risks[k],
                    hbar: h.mean,
                });
            }
            transfer_select_nonconvex(&input, c, m, &ctx.cfg.transfer.selection())?
        }
    };

    let n = ctx.cfg.transfer.launch_replicates;
    let (winner_launch, baseline_launch) = if n > 0 {
        (
            Some(launch(ctx, &cands[selection.selected].w, schedule, n)?),
            Some(launch(ctx, &ctx.env.w1, schedule, n)?),
        )
    } else {
        (None, None)
    };

    let mut rows = Table::new(&["experiment", "index", "label", "path", "empirical_risk", "hbar", "score", "selected"]);
    for s in &selection.scores {
        let cand = &cands[s.index];
        rows.push(vec![
            "transfer-select".into(),
            s.index.to_string(),
            cand.label.replace(',', ";"),
            cand.path.display().to_string().replace(',', ";"),
            num(s.empirical_risk),
            s.hbar.map(num).unwrap_or_default(),
            num(s.score),
            (s.index == selection.selected).to_string(),
        ]);
    }
    let body = json!({
        "model": { "name": model.name(), "kind": model.kind(), "param_dim": model.param_dim() },
        "rule": match model.kind() { ModelKind::Convex => "convex", ModelKind::Nonconvex => "nonconvex" },
        "schedule": { "kind": schedule.kind, "c": c, "T": schedule.horizon },
        "step_constant": c_info,
        "candidates": cands.iter().map(|k| json!({ "label": k.label, "path": k.path })).collect::<Vec<_>>(),
        "selection": selection,
        "winner": { "index": selection.selected, "label": cands[selection.selected].label, "score": selection.selected_score() },
        "launch": { "winner": winner_launch, "baseline_init": baseline_launch },
    });
    let mut out = OutputSet::default();
    out.insert("summary.json", ctx.summary("transfer-select", body));
    out.insert("rows.csv", rows.render(&ctx.preamble));
    Ok(out)
}

fn compute_bounds(inputs: &StabilityInputs, seed: u64, prov: &Value, preamble: &str) -> Result<OutputSet, CliError> {
    let reports = all_bounds(inputs)?;
    let (convex_ok, nonconvex_ok, threshold) = step_conditions(inputs.c, inputs.beta, inputs.horizon);
    let mut v = json!({ "command": "compute-bounds", "seed": seed });
    if let Value::Object(p) = prov {
        for (k, x) in p {
            v[k] = x.clone();
        }
    }
    v["step_conditions"] = json!({ "convex_ok": convex_ok, "nonconvex_ok": nonconvex_ok, "nonconvex_threshold": threshold });
    v["bounds"] = to_value(&reports);
    let mut rows = Table::new(&["experiment", "replicate", "variant", "bound", "valid", "flags"]);
    for r in &reports {
        rows.push(vec![
            "compute-bounds".into(),
            String::new(),
            r.variant.clone(),
            num(r.value),
            r.all_valid().to_string(),
            flags(r),
        ]);
    }
    let mut out = OutputSet::default();
    out.insert("summary.json", to_json_pretty(&v));
    out.insert("rows.csv", rows.render(preamble));
    Ok(out)
}

fn gen_data(ctx: &Ctx) -> Result<OutputSet, CliError> {
    let g = &ctx.cfg.gen_data;
    let train = ctx.env.source.draw(g.m, derive_seed(ctx.seed, 0))?;
    let mut out = OutputSet::default();
    out.insert("train.csv", format!("{}{}", ctx.preamble, train.to_csv_string()));
    let mut body = json!({ "train": { "m": train.len(), "d": train.dim() } });
    if g.heldout > 0 {
        let heldout = ctx.env.source.draw(g.heldout, derive_seed(ctx.seed, 1))?;
        out.insert("heldout.csv", format!("{}{}", ctx.preamble, heldout.to_csv_string()));
        body["heldout"] = json!({ "m": heldout.len(), "d": heldout.dim() });
    }
    if let DataSpec::Synthetic {
        generator: SyntheticSpec::TeacherMlp(t),
    } = &ctx.cfg.data
    {
        let file = ParamFile {
            label: Some("teacher".into()),
            params: t.teacher_weights()?.into_inner(),
        };
        out.insert("teacher.json", file.to_json() + "\n");
        body["teacher"] = json!({ "d": t.d, "hidden": t.hidden, "param_dim": file.params.len() });
    }
    out.insert("summary.json", ctx.summary("gen-data", body));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
version = 1
[model]
kind = "logistic"
[data]
source = "synthetic"
generator = { kind = "gaussian_blobs", d = 2, separation = 3.0 }
"#;

    fn emp() -> EmpiricalConstants {
        EmpiricalConstants {
            l_hat: 2.0,
            beta_hat: 3.0,
            rho_hat: 4.0,
            rho_defined: true,
            pairs_visited: 1,
            pairs_skipped: 0,
        }
    }

    fn declared(beta: Constant) -> SmoothnessConstants {
        SmoothnessConstants {
            lipschitz: Constant::Finite(1.0),
            beta,
            rho: Constant::Unbounded,
            loss_upper_bound: Constant::Finite(2.0),
        }
    }

    #[test]
    fn auto_constants_fall_back_to_measured_ones() {
        let u = choose_constants(ConstantSource::Auto, &declared(Constant::Finite(5.0)), &emp()).unwrap();
        assert_eq!((u.l, u.beta, u.rho, u.b), (1.0, 5.0, 4.0, Some(2.0)));
        assert_eq!(u.sources["rho"], "empirical");
        assert_eq!(u.sources["beta"], "declared");
        let u = choose_constants(ConstantSource::Empirical, &declared(Constant::Finite(5.0)), &emp()).unwrap();
        assert_eq!((u.l, u.beta), (2.0, 3.0));
    }

    #[test]
    fn declared_source_needs_finite_constants() {
        let err = choose_constants(ConstantSource::Declared, &declared(Constant::Finite(5.0)), &emp());
        assert!(matches!(err, Err(CliError::Config(_))));
    }

    #[test]
    fn teacher_init_needs_matching_generator() {
        let text = format!("{BASE}\n[init]\nkind = \"teacher\"\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert!(matches!(Env::new(&cfg, 0), Err(CliError::Config(_))));
    }

    #[test]
    fn quadratic_dimension_is_checked() {
        let text = BASE.replace("kind = \"logistic\"", "kind = \"quadratic\"\ndiag = [1.0]");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert!(matches!(Env::new(&cfg, 0), Err(CliError::Config(_))));
    }

    #[test]
    fn random_init_depends_on_seed_only() {
        let text = format!("{BASE}\n[init]\nkind = \"random\"\nscale = 1.0\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let a = Env::new(&cfg, 4).unwrap().w1;
        assert_eq!(a, Env::new(&cfg, 4).unwrap().w1);
        assert_ne!(a, Env::new(&cfg, 5).unwrap().w1);
    }

    #[test]
    fn compute_bounds_needs_inputs() {
        let inv = Invocation::new(Command::ComputeBounds, None);
        assert!(matches!(inv.run(), Err(CliError::Usage(_))));
        assert!(matches!(Invocation::new(Command::Stability, None).plan(), Err(CliError::Usage(_))));
    }

    #[test]
    fn listed_outputs_match_written_files() {
        let text = format!("{BASE}\n[stability]\nm = 10\nreplicates = 3\n[sgd]\nschedule = \"inv_sqrt\"\nc = 0.1\nT = 10\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let inv = Invocation::new(Command::Stability, Some(cfg.clone()));
        let out = inv.run().unwrap();
        let names: Vec<&str> = out.names().collect();
        let mut listed = Command::Stability.outputs(Some(&cfg));
        listed.sort();
        assert_eq!(names, listed);
        let gen = Invocation::new(Command::GenData, Some(cfg.clone())).run().unwrap();
        assert_eq!(gen.names().collect::<Vec<_>>(), Command::GenData.outputs(Some(&cfg)));
    }
}
