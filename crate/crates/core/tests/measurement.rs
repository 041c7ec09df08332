use stablab::estimators::{
    empirical_risk, empirical_stability, generalization_gap, path_bound, risk_estimate, sigma_estimate, IndexPolicy,
    StabilityConfig,
};
use stablab::model::LossModel;
use stablab::sgd::{ScheduleKind, StepSchedule};
use stablab::synthetic::{BlobParams, DataSource, SyntheticSpec, TeacherLabels, TeacherParams};
use stablab::{LogisticRegression, ParamVector};

fn blobs() -> SyntheticSpec {
    SyntheticSpec::GaussianBlobs(BlobParams {
        d: 3,
        separation: 2.0,
        label_noise: 0.1,
        max_norm: Some(3.0),
    })
}

fn teacher(noise: f64) -> TeacherParams {
    TeacherParams {
        d: 3,
        hidden: 4,
        teacher_seed: 2,
        weight_scale: 1.0,
        noise_std: noise,
        labels: TeacherLabels::Regression,
        input_scale: 1.0,
    }
}

#[test]
fn heldout_risk_is_self_consistent() {
    let model = LogisticRegression::new(3).unwrap();
    let w = [0.5, -0.3, 0.2];
    let small = risk_estimate(&model, &w, &blobs().draw(10_000, 1).unwrap()).unwrap();
    let large = risk_estimate(&model, &w, &blobs().draw(100_000, 2).unwrap()).unwrap();
    assert!((small.mean - large.mean).abs() <= 3.0 * small.stderr);
}

#[test]
fn teacher_weights_are_realizable() {
    let p = teacher(0.0);
    let spec = SyntheticSpec::TeacherMlp(p.clone());
    let model = p.model().unwrap();
    let w = p.teacher_weights().unwrap();
    let train = spec.draw(100, 3).unwrap();
    let test = spec.draw(500, 4).unwrap();
    assert_eq!(risk_estimate(&model, &w, &test).unwrap().mean, 0.0);
    let gap = generalization_gap(&model, &w, &train, &test).unwrap();
    assert!(gap.abs <= gap.stderr + 1e-15);
}

#[test]
fn heldout_equal_to_train() {
    let model = LogisticRegression::new(3).unwrap();
    let data = blobs().draw(50, 9).unwrap();
    let w = [0.1, 0.2, 0.3];
    assert_eq!(empirical_risk(&model, &w, &data).unwrap(), risk_estimate(&model, &w, &data).unwrap());
}

#[test]
fn split_halves_agree() {
    let model = LogisticRegression::new(3).unwrap();
    let data = blobs().draw(50, 0).unwrap();
    let beta = model.declared_constants(&data).beta.finite().unwrap();
    let cfg = |seed| StabilityConfig {
        m: 50,
        schedule: StepSchedule::new(ScheduleKind::InvSqrt, 0.5 / beta, 50).unwrap(),
        n_replicates: 100,
        master_seed: seed,
        index_policy: IndexPolicy::Pinned(0),
        independent_probe: false,
        heldout_size: Some(0),
    };
    let w1 = ParamVector(vec![0.0; 3]);
    let a = empirical_stability(&model, &blobs(), &cfg(1), &w1).unwrap();
    let b = empirical_stability(&model, &blobs(), &cfg(2), &w1).unwrap();
    let pooled = 1.96 * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() <= 2.0 * pooled, "{} vs {}", a.mean, b.mean);
    assert_eq!(a.diverged, 0);
}

#[test]
fn path_sum_lemma_holds_on_average() {
    let model = LogisticRegression::new(3).unwrap();
    let source = blobs();
    let pool = source.draw(50, 0).unwrap();
    let beta = model.declared_constants(&pool).beta.finite().unwrap();
    let schedule = StepSchedule::new(ScheduleKind::InvSqrt, 0.5 / beta, 50).unwrap();
    let cfg = StabilityConfig {
        m: 50,
        schedule,
        n_replicates: 100,
        master_seed: 5,
        index_policy: IndexPolicy::Sweep,
        independent_probe: false,
        heldout_size: Some(0),
    };
    let w1 = ParamVector(vec![0.0; 3]);
    let s = empirical_stability(&model, &source, &cfg, &w1).unwrap();
    let big = source.draw(5000, 77).unwrap();
    let r1 = empirical_risk(&model, &w1, &big).unwrap().mean;
    let sigma = sigma_estimate(&model, &[w1.clone()], &big).unwrap().sigma();
    let bound = path_bound(r1, 0.0, sigma, beta, &schedule).unwrap();
    assert!(s.path_sum_mean <= bound + 3.0 * s.path_sum_stderr);
}
