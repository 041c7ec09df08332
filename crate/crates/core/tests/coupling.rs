use proptest::prelude::*;
use stablab::linalg::{dist, norm, sub};
use stablab::model::LossModel;
use stablab::sgd::{index_sequence, paired_run, run_sgd, ScheduleKind, SgdConfig, StepSchedule};
use stablab::synthetic::{generate_synthetic, BlobParams, DataSource, SyntheticSpec};
use stablab::{Dataset, Example, LogisticRegression, ParamVector};

fn blobs() -> SyntheticSpec {
    SyntheticSpec::GaussianBlobs(BlobParams {
        d: 3,
        separation: 2.0,
        label_noise: 0.1,
        max_norm: None,
    })
}

fn config(c: f64, horizon: usize, seed: u64, record: bool) -> SgdConfig {
    SgdConfig {
        schedule: StepSchedule::new(ScheduleKind::InvSqrt, c, horizon).unwrap(),
        seed,
        record_iterates: record,
    }
}

/// Logistic coupled recursion written without the engine.
fn straight_line(data: &Dataset, i: usize, z: &Example, perm: &[usize], c: f64, w1: &[f64]) -> Vec<f64> {
    let step = |w: &mut Vec<f64>, e: &Example, a: f64| {
        let s: f64 = w.iter().zip(&e.features).map(|(p, q)| p * q).sum();
        let r = 1.0 / (1.0 + (-s).exp()) - e.label;
        for (wk, xk) in w.iter_mut().zip(&e.features) {
            *wk -= a * r * xk;
        }
    };
    let mut a = w1.to_vec();
    let mut b = w1.to_vec();
    let mut out = vec![0.0];
    for (t, &j) in perm.iter().enumerate() {
        let alpha = c / ((t + 1) as f64).sqrt();
        step(&mut a, &data[j], alpha);
        step(&mut b, if j == i { z } else { &data[j] }, alpha);
        out.push(dist(&a, &b));
    }
    out
}

#[test]
fn delta_series_matches_straight_line_oracle() {
    let model = LogisticRegression::new(3).unwrap();
    let data = generate_synthetic(&blobs(), 10, 4).unwrap();
    let z = blobs().draw(1, 99).unwrap()[0].clone();
    let w1 = ParamVector(vec![0.1, -0.2, 0.05]);
    let cfg = config(0.9, 10, 21, false);
    let rec = paired_run(&model, &data, 6, &z, &z, &cfg, &w1).unwrap();
    let (perm, _) = index_sequence(10, 10, 21);
    let oracle = straight_line(&data, 6, &z, &perm, 0.9, &w1);
    assert_eq!(rec.delta_series.len(), 11);
    for (a, b) in rec.delta_series.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn never_drawn_index_leaves_runs_identical() {
    let model = LogisticRegression::new(3).unwrap();
    let data = generate_synthetic(&blobs(), 20, 4).unwrap();
    let z = blobs().draw(1, 5).unwrap()[0].clone();
    let cfg = config(0.5, 5, 3, false);
    let (perm, _) = index_sequence(20, 5, 3);
    let i = (0..20).find(|k| !perm.contains(k)).unwrap();
    let rec = paired_run(&model, &data, i, &z, &z, &cfg, &ParamVector(vec![0.0; 3])).unwrap();
    assert_eq!(rec.tau, None);
    assert!(rec.delta_series.iter().all(|d| *d == 0.0));
    assert_eq!(rec.final_loss_gap_on_probe, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn coupling_invariant_and_first_encounter(seed in any::<u64>(), i in 0usize..15) {
        let model = LogisticRegression::new(3).unwrap();
        let data = generate_synthetic(&blobs(), 15, seed).unwrap();
        let z = blobs().draw(1, seed ^ 0xABCD).unwrap()[0].clone();
        let cfg = config(1.2, 15, seed, true);
        let rec = paired_run(&model, &data, i, &z, &z, &cfg, &ParamVector(vec![0.2, 0.0, -0.1])).unwrap();
        let tau = rec.tau.unwrap();
        prop_assert_eq!(rec.original.permutation[tau - 1], i);
        for t in 1..=tau {
            prop_assert_eq!(rec.delta_series[t - 1], 0.0);
        }
        let w = &rec.original.iterates[tau - 1];
        let g1 = model.grad(w, &data[i]).unwrap();
        let g2 = model.grad(w, &z).unwrap();
        let expected = rec.original.alphas[tau - 1] * norm(&sub(&g1, &g2));
        prop_assert!((rec.delta_series[tau] - expected).abs() <= 1e-12);
    }

    #[test]
    fn convex_runs_contract_away_from_the_encounter(seed in any::<u64>()) {
        let model = LogisticRegression::new(3).unwrap();
        let data = generate_synthetic(&blobs(), 15, seed).unwrap();
        let beta = model.declared_constants(&data).beta.finite().unwrap();
        let z = blobs().draw(1, seed ^ 1).unwrap()[0].clone();
        let cfg = config(2.0 / beta, 15, seed, false);
        let rec = paired_run(&model, &data, 3, &z, &z, &cfg, &ParamVector(vec![0.0; 3])).unwrap();
        let tau = rec.tau.unwrap();
        for t in 1..=15 {
            if t != tau {
                prop_assert!(rec.delta_series[t] <= rec.delta_series[t - 1] + 1e-12);
            }
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic(seed in any::<u64>()) {
        let model = LogisticRegression::new(3).unwrap();
        let data = generate_synthetic(&blobs(), 12, seed).unwrap();
        let cfg = config(0.7, 12, seed, true);
        let w1 = ParamVector(vec![0.3, 0.3, 0.3]);
        let a = run_sgd(&model, &data, &cfg, &w1).unwrap();
        let b = run_sgd(&model, &data, &cfg, &w1).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn update_rule_and_step_bound(seed in any::<u64>()) {
        let model = LogisticRegression::new(3).unwrap();
        let data = generate_synthetic(&blobs(), 12, seed).unwrap();
        let k = model.declared_constants(&data);
        let (l, beta) = (k.lipschitz.finite().unwrap(), k.beta.finite().unwrap());
        let cfg = config(0.7, 12, seed, true);
        let tr = run_sgd(&model, &data, &cfg, &ParamVector(vec![0.1, -0.4, 0.2])).unwrap();
        for t in 0..12 {
            let w = &tr.iterates[t];
            let z = &data[tr.permutation[t]];
            let g = model.grad(w, z).unwrap();
            let back: Vec<f64> = tr.iterates[t + 1].iter().zip(g.iter()).map(|(a, b)| a + tr.alphas[t] * b).collect();
            prop_assert!(dist(&back, w) <= 1e-12);
            let moved = dist(w, &tr.iterates[t + 1]);
            let cap = tr.alphas[t] * (2.0 * beta * model.loss(w, z).unwrap()).sqrt().min(l);
            prop_assert!(moved <= cap + 1e-9);
        }
    }
}
