//! Spectral norms of per-example Hessians by power iteration on HVPs.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example, ParamVector};
use crate::error::{invalid, Error, Result};
use crate::linalg::{all_finite, dot, norm};
use crate::model::LossModel;
use crate::sgd::rng_from_seed;

const ZERO_IMAGE: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerIterConfig {
    /// Relative change tolerance on the eigenvalue estimate.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 1000,
            seed: 0,
        }
    }
}

impl PowerIterConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid("power iteration tol must be positive"));
        }
        if self.max_iter == 0 {
            return Err(invalid("power iteration max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub value: f64,
    /// Operator applications used.
    pub iterations: usize,
    pub converged: bool,
}

fn unit_random(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn apply_checked<F>(apply: &mut F, v: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let out = apply(v)?;
    if out.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "operator output",
            expected: v.len(),
            got: out.len(),
        });
    }
    if !all_finite(&out) {
        return Err(Error::Numeric("operator returned a non-finite vector".into()));
    }
    Ok(out)
}

enum Sweep {
    Converged(f64),
    Oscillating,
    Exhausted(f64),
}

/// Runs power iteration with Rayleigh quotient `vᵀAv`. `A` is `H` or `H²`
/// depending on `squared`. Returns the estimate of the dominant eigenvalue of
/// `A` and the number of applications of `H`.
fn sweep<F>(
    apply: &mut F,
    start: Vec<f64>,
    cfg: &PowerIterConfig,
    squared: bool,
    used: &mut usize,
) -> Result<Sweep>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut v = start;
    let mut lambda_prev: Option<f64> = None;
    let mut change_prev: Option<f64> = None;
    let mut lambda = 0.0;
    while *used < cfg.max_iter {
        let mut av = apply_checked(apply, &v)?;
        *used += 1;
        if squared {
            av = apply_checked(apply, &av)?;
            *used += 1;
        }
        lambda = dot(&v, &av);
        let n = norm(&av);
        if n <= ZERO_IMAGE {
            return Ok(Sweep::Converged(0.0));
        }
        let residual = av
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if let Some(prev) = lambda_prev {
            let change = (lambda.abs() - prev.abs()).abs() / lambda.abs().max(f64::MIN_POSITIVE);
            // Extrapolated remaining error from the observed contraction rate.
            let extrapolated = match change_prev {
                Some(cp) if cp > 0.0 && change < cp => change * (change / cp) / (1.0 - change / cp),
                Some(_) => f64::INFINITY,
                None => change,
            };
            if change <= cfg.tol {
                if residual <= 1e-3 * lambda.abs() && extrapolated <= cfg.tol {
                    return Ok(Sweep::Converged(lambda));
                }
                if !squared && residual > 1e-2 * lambda.abs() {
                    return Ok(Sweep::Oscillating);
                }
            }
            change_prev = Some(change);
        }
        lambda_prev = Some(lambda);
        v = av.into_iter().map(|x| x / n).collect();
    }
    Ok(Sweep::Exhausted(lambda))
}

/// Estimates `‖H‖₂` for a symmetric linear operator given as a closure.
///
/// When `H` has two dominant eigenvalues of opposite sign the iteration on
/// `H` stalls with a large residual; the estimate then switches to `H²` and
/// reports the square root of its dominant eigenvalue.
pub fn power_iteration_spectral_norm<F>(
    mut apply_h: F,
    dim: usize,
    cfg: &PowerIterConfig,
) -> Result<SpectralEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if dim == 0 {
        return Err(invalid("operator dimension must be at least 1"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut start = unit_random(dim, &mut rng);
    let first = apply_checked(&mut apply_h, &start)?;
    let mut used = 1;
    if norm(&first) <= ZERO_IMAGE {
        start = unit_random(dim, &mut rng);
        let second = apply_checked(&mut apply_h, &start)?;
        used += 1;
        if norm(&second) <= ZERO_IMAGE {
            return Ok(SpectralEstimate {
                value: 0.0,
                iterations: used,
                converged: true,
            });
        }
    }
    let result = sweep(&mut apply_h, start.clone(), cfg, false, &mut used)?;
    let (value, converged) = match result {
        Sweep::Converged(l) => (l.abs(), true),
        Sweep::Exhausted(l) => (l.abs(), false),
        Sweep::Oscillating => {
            let mut squared_cfg = *cfg;
            squared_cfg.max_iter = cfg.max_iter.saturating_mul(2).max(used + 2);
            match sweep(&mut apply_h, start, &squared_cfg, true, &mut used)? {
                Sweep::Converged(mu) => (mu.max(0.0).sqrt(), true),
                Sweep::Exhausted(mu) => (mu.max(0.0).sqrt(), false),
                Sweep::Oscillating => unreachable!("squared sweeps never report oscillation"),
            }
        }
    };
    Ok(SpectralEstimate {
        value,
        iterations: used,
        converged,
    })
}

/// `‖∇²f(w, z)‖₂` by power iteration on `v ↦ hvp(w, z, v)`.
pub fn example_hessian_norm(
    model: &dyn LossModel,
    w: &[f64],
    z: &Example,
    cfg: &PowerIterConfig,
) -> Result<SpectralEstimate> {
    power_iteration_spectral_norm(
        |v| model.hvp(w, z, v).map(ParamVector::into_inner),
        model.param_dim(),
        cfg,
    )
}

/// Mean per-example Hessian spectral norm over a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianNormEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub unconverged: usize,
}

/// Plain mean of [`example_hessian_norm`] over `sample`, evaluated in
/// parallel. The reduction runs in sample order so the result does not depend
/// on scheduling.
pub fn expected_hessian_norm(
    model: &dyn LossModel,
    w1: &[f64],
    sample: &Dataset,
    cfg: &PowerIterConfig,
) -> Result<HessianNormEstimate> {
    let estimates: Vec<SpectralEstimate> = sample
        .examples()
        .par_iter()
        .map(|z| example_hessian_norm(model, w1, z, cfg))
        .collect::<Result<_>>()?;
    let values: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    let (mean, stderr) = mean_stderr(&values);
    Ok(HessianNormEstimate {
        mean,
        stderr,
        n: values.len(),
        unconverged: estimates.iter().filter(|e| !e.converged).count(),
    })
}

/// Mean and standard error (sample std with `n − 1`, divided by `√n`).
pub(crate) fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Central difference `(g(w + hv) − g(w − hv)) / 2h` of a gradient closure.
pub fn hvp_finite_difference<G>(mut grad: G, w: &[f64], z: &Example, v: &[f64], h: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64], &Example) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(invalid("finite difference step must be positive"));
    }
    if w.len() != v.len() {
        return Err(Error::DimensionMismatch {
            what: "direction vector",
            expected: w.len(),
            got: v.len(),
        });
    }
    let plus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(a, b)| a - h * b).collect();
    let gp = grad(&plus, z)?;
    let gm = grad(&minus, z)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::model::{LogisticRegression, LossHead, Quadratic, TanhMlp};
    use proptest::prelude::*;
    use rand::Rng;

    fn operator(m: &DenseMatrix) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
        move |v| Ok(m.matvec(v))
    }

    fn random_symmetric(n: usize, seed: u64) -> DenseMatrix {
        let mut rng = rng_from_seed(seed);
        let mut m = DenseMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.sample(StandardNormal);
                m.set(i, j, x);
                m.set(j, i, x);
            }
        }
        m
    }

    #[test]
    fn zero_operator() {
        let est = power_iteration_spectral_norm(|v| Ok(vec![0.0; v.len()]), 4, &Default::default()).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(est.converged);
    }

    #[test]
    fn diagonal_dominant_magnitude() {
        let m = DenseMatrix::from_diag(&[3.0, 1.0, -5.0]);
        let est = power_iteration_spectral_norm(operator(&m), 3, &Default::default()).unwrap();
        assert!(est.converged);
        assert!((est.value - 5.0).abs() < 1e-7);
    }

    #[test]
    fn opposite_sign_tie() {
        let m = DenseMatrix::from_diag(&[4.0, -4.0, 1.0]);
        let est = power_iteration_spectral_norm(operator(&m), 3, &Default::default()).unwrap();
        assert!(est.converged);
        assert!((est.value - 4.0).abs() < 1e-6, "{}", est.value);
    }

    #[test]
    fn random_symmetric_matches_eigen() {
        for seed in 0..20 {
            let m = random_symmetric(10, seed);
            let est = power_iteration_spectral_norm(operator(&m), 10, &Default::default()).unwrap();
            let exact = m.symmetric_spectral_norm();
            if est.converged {
                assert!((est.value - exact).abs() / exact <= 1e-6, "seed {seed}");
            }
        }
    }

    #[test]
    fn non_finite_operator_is_an_error() {
        let err = power_iteration_spectral_norm(|v| Ok(vec![f64::NAN; v.len()]), 2, &Default::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn max_iter_reports_unconverged() {
        let m = random_symmetric(10, 3);
        let cfg = PowerIterConfig {
            max_iter: 2,
            ..Default::default()
        };
        let est = power_iteration_spectral_norm(operator(&m), 10, &cfg).unwrap();
        assert!(!est.converged);
        assert!(est.value >= 0.0);
    }

    #[test]
    fn quadratic_hessian_norm() {
        let q = Quadratic::diagonal(&[2.0, 7.0]).unwrap();
        let z = Example::new(vec![0.3, -1.0], 0.0).unwrap();
        let est = example_hessian_norm(&q, &[1.0, 1.0], &z, &Default::default()).unwrap();
        assert!((est.value - 7.0).abs() < 1e-7);
    }

    #[test]
    fn logistic_origin_rank_one() {
        let model = LogisticRegression::new(3).unwrap();
        let x = vec![0.6, 0.0, 0.8];
        for y in [0.0, 1.0] {
            let z = Example::new(x.clone(), y).unwrap();
            let est = example_hessian_norm(&model, &[0.0; 3], &z, &Default::default()).unwrap();
            assert!((est.value - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn mlp_matches_dense_oracle() {
        let model = TanhMlp::new(3, 4, LossHead::Squared).unwrap();
        let mut rng = rng_from_seed(11);
        let w: Vec<f64> = (0..model.param_dim()).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.7).collect();
        let z = Example::new(vec![0.5, -1.2, 0.3], 0.8).unwrap();
        let dense = crate::model::dense_hessian(&model, &w, &z, 100).unwrap();
        let exact = dense.symmetric_spectral_norm();
        let est = example_hessian_norm(&model, &w, &z, &Default::default()).unwrap();
        assert!(est.converged);
        assert!((est.value - exact).abs() / exact <= 1e-6);
    }

    #[test]
    fn expected_norm_identical_examples() {
        let model = LogisticRegression::new(2).unwrap();
        let z = Example::new(vec![1.0, 0.0], 1.0).unwrap();
        let data = Dataset::new(vec![z.clone(); 5]).unwrap();
        let est = expected_hessian_norm(&model, &[0.2, 0.1], &data, &Default::default()).unwrap();
        let single = example_hessian_norm(&model, &[0.2, 0.1], &z, &Default::default()).unwrap();
        assert_eq!(est.mean, single.value);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn expected_norm_quadratic() {
        let q = Quadratic::diagonal(&[0.5, 3.0]).unwrap();
        let data = Dataset::new(vec![
            Example::new(vec![0.0, 1.0], 0.0).unwrap(),
            Example::new(vec![2.0, -1.0], 0.0).unwrap(),
        ])
        .unwrap();
        let est = expected_hessian_norm(&q, &[0.0, 0.0], &data, &Default::default()).unwrap();
        assert!((est.mean - 3.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_quadratic_and_zero() {
        let q = Quadratic::diagonal(&[2.0, 5.0]).unwrap();
        let z = Example::new(vec![1.0, 1.0], 0.0).unwrap();
        let g = |w: &[f64], z: &Example| q.grad(w, z).map(ParamVector::into_inner);
        let fd = hvp_finite_difference(g, &[0.3, 0.1], &z, &[1.0, -1.0], 1e-3).unwrap();
        assert!((fd[0] - 2.0).abs() < 1e-10 && (fd[1] + 5.0).abs() < 1e-10);
        let fd = hvp_finite_difference(g, &[0.3, 0.1], &z, &[0.0, 0.0], 1e-3).unwrap();
        assert_eq!(fd, vec![0.0, 0.0]);
        assert!(hvp_finite_difference(g, &[0.3, 0.1], &z, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn finite_difference_mlp() {
        let model = TanhMlp::new(2, 3, LossHead::CrossEntropy).unwrap();
        let mut rng = rng_from_seed(2);
        let p = model.param_dim();
        let w: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let z = Example::new(vec![0.4, -0.9], 1.0).unwrap();
        let g = |w: &[f64], z: &Example| model.grad(w, z).map(ParamVector::into_inner);
        let fd = hvp_finite_difference(g, &w, &z, &v, 1e-5).unwrap();
        let exact = model.hvp(&w, &z, &v).unwrap();
        let err = norm(&crate::linalg::sub(&fd, &exact)) / norm(&exact);
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scale_equivariance(seed in 0u64..1000, s in 0.01f64..100.0) {
            let m = random_symmetric(6, seed);
            let cfg = PowerIterConfig::default();
            let a = power_iteration_spectral_norm(operator(&m), 6, &cfg).unwrap();
            let b = power_iteration_spectral_norm(|v| Ok(m.matvec(v).iter().map(|x| x * s).collect()), 6, &cfg).unwrap();
            prop_assume!(a.converged && b.converged);
            prop_assert!((b.value - s * a.value).abs() <= 1e-6 * s * a.value);
            prop_assert!(a.value >= 0.0);
        }

        #[test]
        fn restart_stability(seed in 0u64..1000, s1 in 0u64..100, s2 in 100u64..200) {
            let m = random_symmetric(6, seed);
            let eig = m.symmetric_eigenvalues();
            let mut mags: Vec<f64> = eig.iter().map(|e| e.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!((mags[0] - mags[1]) / mags[0] >= 1e-3);
            let a = power_iteration_spectral_norm(operator(&m), 6, &PowerIterConfig { seed: s1, ..Default::default() }).unwrap();
            let b = power_iteration_spectral_norm(operator(&m), 6, &PowerIterConfig { seed: s2, ..Default::default() }).unwrap();
            prop_assume!(a.converged && b.converged);
            prop_assert!((a.value - b.value).abs() <= 1e-6 * a.value);
        }
    }
}
