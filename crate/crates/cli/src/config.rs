//! TOML experiment configuration.
//!
//! Schema version 1. Unknown keys are rejected everywhere. Relative paths are
//! resolved against the directory containing the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stablab::bounds::TransferConfig;
use stablab::curvature::PowerIterConfig;
use stablab::estimators::IndexPolicy;
use stablab::sgd::ScheduleKind;
use stablab::synthetic::SyntheticSpec;
use stablab::LossHead;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub sgd: SgdSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub constants: ConstantsSpec,
    #[serde(default)]
    pub stability: StabilitySpec,
    #[serde(default)]
    pub warm_start: WarmStartSpec,
    #[serde(default)]
    pub transfer: TransferSpec,
    #[serde(default)]
    pub power_iteration: PowerIterConfig,
    #[serde(default)]
    pub bounds: BoundsSpec,
    #[serde(default)]
    pub gen_data: GenDataSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Logistic,
    TanhMlp {
        hidden: usize,
        #[serde(default = "squared")]
        head: LossHead,
        /// Declared `|w_k| ≤ weight_box`; enables analytic constants.
        #[serde(default)]
        weight_box: Option<f64>,
        #[serde(default = "one")]
        label_bound: f64,
    },
    Quadratic {
        diag: Vec<f64>,
    },
}

fn squared() -> LossHead {
    LossHead::Squared
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic { generator: SyntheticSpec },
    /// A CSV pool; experiments resample it with replacement.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    pub schedule: ScheduleKind,
    /// Step constant. Exactly one of `c` and `c_over_beta` is required.
    #[serde(default)]
    pub c: Option<f64>,
    /// `c = c_over_beta / β` with `β` the smoothness constant in use.
    #[serde(default)]
    pub c_over_beta: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: usize,
}

impl Default for SgdSpec {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::InvSqrt,
            c: None,
            c_over_beta: Some(0.5),
            horizon: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    #[default]
    Zeros,
    /// i.i.d. `N(0, scale²)` from `derive_seed(seed, offset)`.
    Random {
        scale: f64,
        #[serde(default)]
        seed_offset: u64,
    },
    /// Teacher weights of a `teacher_mlp` generator.
    Teacher,
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstantSource {
    /// Declared when finite, otherwise measured.
    #[default]
    Auto,
    Declared,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureSample {
    #[default]
    Heldout,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSpec {
    pub source: ConstantSource,
    #[serde(rename = "Rstar")]
    pub rstar: f64,
    /// Sample used for the mean Hessian norm at `w₁`.
    pub curvature_sample: CurvatureSample,
    /// Reference trajectories used for `L̂`, `β̂`, `ρ̂`.
    pub reference_runs: usize,
}

impl Default for ConstantsSpec {
    fn default() -> Self {
        Self {
            source: ConstantSource::Auto,
            rstar: 0.0,
            curvature_sample: CurvatureSample::Heldout,
            reference_runs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySpec {
    pub m: usize,
    pub replicates: usize,
    pub index_policy: IndexPolicy,
    pub independent_probe: bool,
    /// Held-out sample size; `None` means `5m`.
    pub heldout_size: Option<usize>,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        Self {
            m: 50,
            replicates: 100,
            index_policy: IndexPolicy::default(),
            independent_probe: false,
            heldout_size: None,
        }
    }
}

impl StabilitySpec {
    pub fn heldout(&self) -> usize {
        self.heldout_size.unwrap_or(5 * self.m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartSpec {
    pub count: usize,
    /// Pretraining steps between consecutive warm starts.
    pub every: usize,
    /// Constant pretraining step size.
    pub pretrain_step: f64,
    /// Size of the pretraining set.
    pub pretrain_m: usize,
    /// Replicates per warm start for the output risk and `ε̂`; 0 skips `ε̂`.
    pub replicates: usize,
}

impl Default for WarmStartSpec {
    fn default() -> Self {
        Self {
            count: 5,
            every: 50,
            pretrain_step: 0.05,
            pretrain_m: 1000,
            replicates: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSpec {
    pub sources: Vec<PathBuf>,
    /// Run SGD from the winner on this many seeds and record the gap.
    pub launch_replicates: usize,
    pub delta_conf: f64,
    pub gamma_floor: f64,
}

impl Default for TransferSpec {
    fn default() -> Self {
        let d = TransferConfig::default();
        Self {
            sources: Vec::new(),
            launch_replicates: 0,
            delta_conf: d.delta_conf,
            gamma_floor: d.gamma_floor,
        }
    }
}

impl TransferSpec {
    pub fn selection(&self) -> TransferConfig {
        TransferConfig {
            delta_conf: self.delta_conf,
            gamma_floor: self.gamma_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSpec {
    /// StabilityInputs JSON for `compute-bounds`.
    pub inputs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataSpec {
    pub m: usize,
    pub heldout: usize,
}

impl Default for GenDataSpec {
    fn default() -> Self {
        Self { m: 200, heldout: 0 }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let DataSpec::Csv { path } = &mut self.data {
            fix(path);
        }
        if let InitSpec::File { path } = &mut self.init {
            fix(path);
        }
        self.transfer.sources.iter_mut().for_each(fix);
        if let Some(p) = &mut self.bounds.inputs {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.version != SCHEMA_VERSION {
            return bad(&format!("unsupported config version {} (expected {SCHEMA_VERSION})", self.version));
        }
        match (self.sgd.c, self.sgd.c_over_beta) {
            (Some(c), None) if c > 0.0 && c.is_finite() => {}
            (None, Some(k)) if k > 0.0 && k.is_finite() => {}
            (Some(_), Some(_)) => return bad("set only one of sgd.c and sgd.c_over_beta"),
            _ => return bad("sgd needs one positive value among c and c_over_beta"),
        }
        if self.sgd.horizon == 0 {
            return bad("sgd.T must be at least 1");
        }
        if self.stability.m == 0 || self.stability.replicates == 0 {
            return bad("stability.m and stability.replicates must be at least 1");
        }
        if let ModelSpec::TanhMlp { hidden: 0, .. } = self.model {
            return bad("model.hidden must be at least 1");
        }
        if let ModelSpec::Quadratic { diag } = &self.model {
            if diag.is_empty() {
                return bad("model.diag must be non-empty");
            }
        }
        if let InitSpec::Random { scale, .. } = self.init {
            if !(scale >= 0.0 && scale.is_finite()) {
                return bad("init.scale must be finite and non-negative");
            }
        }
        if !(self.constants.rstar >= 0.0) {
            return bad("constants.Rstar must be non-negative");
        }
        if self.warm_start.count == 0 || self.warm_start.pretrain_m == 0 {
            return bad("warm_start.count and warm_start.pretrain_m must be at least 1");
        }
        if !(self.warm_start.pretrain_step > 0.0) {
            return bad("warm_start.pretrain_step must be positive");
        }
        if self.gen_data.m == 0 {
            return bad("gen_data.m must be at least 1");
        }
        if !(self.power_iteration.tol > 0.0) || self.power_iteration.max_iter == 0 {
            return bad("power_iteration.tol must be positive and max_iter at least 1");
        }
        Ok(())
    }
}
