//! Synthetic data generators and sampling sources.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, ParamVector};
use crate::error::{invalid, Result};
use crate::linalg::norm;
use crate::model::{LossHead, TanhMlp};
use crate::sgd::{derive_seed, rng_from_seed};

/// Anything that can draw an i.i.d. sample of a given size.
pub trait DataSource: Send + Sync {
    fn draw(&self, n: usize, seed: u64) -> Result<Dataset>;

    fn dim(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    pub d: usize,
    /// Distance between the two class means.
    pub separation: f64,
    /// Probability of flipping each label.
    #[serde(default)]
    pub label_noise: f64,
    /// Rescale any feature vector longer than this onto the sphere.
    #[serde(default)]
    pub max_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherLabels {
    /// `y = o(x) + noise`
    Regression,
    /// `y = 1[o(x) + noise > 0]`
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherParams {
    pub d: usize,
    pub hidden: usize,
    #[serde(default)]
    pub teacher_seed: u64,
    /// Standard deviation of the teacher weights.
    #[serde(default = "one")]
    pub weight_scale: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "regression")]
    pub labels: TeacherLabels,
    /// Standard deviation of each input coordinate.
    #[serde(default = "one")]
    pub input_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn regression() -> TeacherLabels {
    TeacherLabels::Regression
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    GaussianBlobs(BlobParams),
    TeacherMlp(TeacherParams),
}

impl BlobParams {
    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(invalid("blob dimension d must be at least 1"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(invalid("blob separation must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(invalid("label_noise must lie in [0, 1]"));
        }
        if let Some(r) = self.max_norm {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid("max_norm must be positive"));
            }
        }
        Ok(())
    }
}

impl TeacherParams {
    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 {
            return Err(invalid("teacher d and hidden must be at least 1"));
        }
        for (name, v) in [
            ("weight_scale", self.weight_scale),
            ("noise_std", self.noise_std),
            ("input_scale", self.input_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn head(&self) -> LossHead {
        match self.labels {
            TeacherLabels::Regression => LossHead::Squared,
            TeacherLabels::Classification => LossHead::CrossEntropy,
        }
    }

    /// Network with the teacher's shape and loss head.
    pub fn model(&self) -> Result<TanhMlp> {
        TanhMlp::new(self.d, self.hidden, self.head())
    }

    /// Teacher weights, i.i.d. `N(0, weight_scale²)` from `teacher_seed`.
    pub fn teacher_weights(&self) -> Result<ParamVector> {
        self.validate()?;
        let p = self.model()?.layout().param_dim();
        Ok(gaussian_vector(p, self.weight_scale, self.teacher_seed))
    }
}

/// `p` i.i.d. `N(0, scale²)` coordinates drawn from `seed`.
pub fn gaussian_vector(p: usize, scale: f64, seed: u64) -> ParamVector {
    let mut rng = rng_from_seed(seed);
    ParamVector(
        (0..p)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
}

/// Draws `m` examples. Deterministic in `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, m: usize, seed: u64) -> Result<Dataset> {
    if m == 0 {
        return Err(invalid("requested sample size m must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    let examples = match spec {
        SyntheticSpec::GaussianBlobs(p) => {
            p.validate()?;
            (0..m)
                .map(|_| {
                    let positive = rng.random_bool(0.5);
                    let mut x: Vec<f64> = (0..p.d).map(|_| rng.sample(StandardNormal)).collect();
                    x[0] += if positive { p.separation / 2.0 } else { -p.separation / 2.0 };
                    if let Some(r) = p.max_norm {
                        let n = norm(&x);
                        if n > r {
                            x.iter_mut().for_each(|v| *v *= r / n);
                        }
                    }
                    let flip = p.label_noise > 0.0 && rng.random_bool(p.label_noise);
                    let y = if positive != flip { 1.0 } else { 0.0 };
                    Example::new(x, y)
                })
                .collect::<Result<Vec<_>>>()?
        }
        SyntheticSpec::TeacherMlp(p) => {
            let model = p.model()?;
            let w = p.teacher_weights()?;
            (0..m)
                .map(|_| {
                    let x: Vec<f64> = (0..p.d)
                        .map(|_| p.input_scale * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let noise = if p.noise_std > 0.0 {
                        p.noise_std * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    let o = model.output(&w, &x)? + noise;
                    let y = match p.labels {
                        TeacherLabels::Regression => o,
                        TeacherLabels::Classification => f64::from(u8::from(o > 0.0)),
                    };
                    Example::new(x, y)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Dataset::new(examples)
}

impl SyntheticSpec {
    pub fn dim(&self) -> usize {
        match self {
            SyntheticSpec::GaussianBlobs(p) => p.d,
            SyntheticSpec::TeacherMlp(p) => p.d,
        }
    }
}

impl DataSource for SyntheticSpec {
    fn draw(&self, n: usize, seed: u64) -> Result<Dataset> {
        generate_synthetic(self, n, seed)
    }

    fn dim(&self) -> usize {
        SyntheticSpec::dim(self)
    }
}

/// Resamples a fixed pool uniformly with replacement.
#[derive(Debug, Clone)]
pub struct EmpiricalSource {
    pool: Dataset,
}

impl EmpiricalSource {
    pub fn new(pool: Dataset) -> Self {
        Self { pool }
    }

    pub fn pool(&self) -> &Dataset {
        &self.pool
    }
}

impl DataSource for EmpiricalSource {
    fn draw(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(invalid("requested sample size must be at least 1"));
        }
        let mut rng = rng_from_seed(seed);
        let examples = (0..n)
            .map(|_| self.pool[rng.random_range(0..self.pool.len())].clone())
            .collect();
        Dataset::new(examples)
    }

    fn dim(&self) -> usize {
        self.pool.dim()
    }
}

/// Independent training and held-out draws from one master seed.
pub fn train_heldout<S: DataSource + ?Sized>(
    source: &S,
    m: usize,
    heldout: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    Ok((
        source.draw(m, derive_seed(seed, 0))?,
        source.draw(heldout, derive_seed(seed, 1))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LogisticRegression, LossModel};

    fn blobs(sep: f64) -> SyntheticSpec {
        SyntheticSpec::GaussianBlobs(BlobParams {
            d: 2,
            separation: sep,
            label_noise: 0.0,
            max_norm: None,
        })
    }

    fn teacher() -> TeacherParams {
        TeacherParams {
            d: 3,
            hidden: 4,
            teacher_seed: 9,
            weight_scale: 1.0,
            noise_std: 0.0,
            labels: TeacherLabels::Regression,
            input_scale: 1.0,
        }
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(generate_synthetic(&blobs(1.0), 0, 1).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(&blobs(2.0), 30, 5).unwrap();
        assert_eq!(a, generate_synthetic(&blobs(2.0), 30, 5).unwrap());
        assert_ne!(a, generate_synthetic(&blobs(2.0), 30, 6).unwrap());
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        let data = generate_synthetic(&blobs(10.0), 400, 1).unwrap();
        let model = LogisticRegression::new(2).unwrap();
        let mut w = vec![0.0; 2];
        for _ in 0..200 {
            let mut g = vec![0.0; 2];
            for z in data.iter() {
                let gi = model.grad(&w, z).unwrap();
                g.iter_mut().zip(gi.iter()).for_each(|(a, b)| *a += b / data.len() as f64);
            }
            w.iter_mut().zip(&g).for_each(|(a, b)| *a -= 1.0 * b);
        }
        let errors = data
            .iter()
            .filter(|z| {
                let s: f64 = w.iter().zip(&z.features).map(|(a, b)| a * b).sum();
                (s > 0.0) != (z.label > 0.5)
            })
            .count();
        assert!(errors as f64 / data.len() as f64 <= 0.01, "{errors}");
    }

    #[test]
    fn max_norm_clips() {
        let spec = SyntheticSpec::GaussianBlobs(BlobParams {
            d: 3,
            separation: 4.0,
            label_noise: 0.1,
            max_norm: Some(1.5),
        });
        let data = generate_synthetic(&spec, 200, 2).unwrap();
        assert!(data.max_feature_norm() <= 1.5 + 1e-12);
    }

    #[test]
    fn noiseless_teacher_is_realizable() {
        let p = teacher();
        let data = generate_synthetic(&SyntheticSpec::TeacherMlp(p.clone()), 50, 3).unwrap();
        let model = p.model().unwrap();
        let w = p.teacher_weights().unwrap();
        for z in data.iter() {
            assert_eq!(model.loss(&w, z).unwrap(), 0.0);
        }
    }

    #[test]
    fn classification_labels_are_binary() {
        let mut p = teacher();
        p.labels = TeacherLabels::Classification;
        p.noise_std = 0.2;
        let data = generate_synthetic(&SyntheticSpec::TeacherMlp(p), 50, 3).unwrap();
        assert!(data.iter().all(|z| z.label == 0.0 || z.label == 1.0));
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = SyntheticSpec::TeacherMlp(teacher());
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"teacher_mlp\""));
        assert_eq!(serde_json::from_str::<SyntheticSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn empirical_source_draws_from_pool() {
        let pool = generate_synthetic(&blobs(1.0), 10, 1).unwrap();
        let src = EmpiricalSource::new(pool.clone());
        let d = src.draw(25, 4).unwrap();
        assert_eq!(d.len(), 25);
        assert!(d.iter().all(|z| pool.iter().any(|p| p == z)));
    }
}
