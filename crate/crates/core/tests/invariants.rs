mod common;

use common::{all_dags, random_estimate, random_panel, unit_grid};
use icmsm::{
    estep, mstep, reduced_gradient, run_em, score, simulate_replicate, EmConfig, ExpectedCounts,
    ScenarioSpec, Target, TransitionGraph,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn model(seed: u64) -> (icmsm::IntensityEstimate, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dags = all_dags(4);
    let graph = Arc::new(dags[rng.random_range(0..dags.len())].clone());
    let k = rng.random_range(1..=6);
    let est = random_estimate(&graph, &unit_grid(k), &mut rng);
    (est, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_matrices_are_stochastic(seed in any::<u64>(), s in 0.0..6.0f64, len in 0.0..6.0f64) {
        let (est, _) = model(seed);
        let p = est.transition_matrix(s, s + len).unwrap();
        for row in 0..p.dim() {
            let r = p.row(row);
            prop_assert!(r.iter().all(|&x| (-1e-15..=1.0 + 1e-15).contains(&x)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chapman_kolmogorov(seed in any::<u64>(), a in 0.0..7.0f64, b in 0.0..7.0f64, c in 0.0..7.0f64) {
        let (est, _) = model(seed);
        let mut t = [a, b, c];
        t.sort_by(f64::total_cmp);
        let left = est.transition_matrix(t[0], t[1]).unwrap().matmul(&est.transition_matrix(t[1], t[2]).unwrap());
        let direct = est.transition_matrix(t[0], t[2]).unwrap();
        prop_assert!(left.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn absorption_probability_never_decreases(seed in any::<u64>(), s in 0.0..3.0f64) {
        let (est, _) = model(seed);
        let graph = est.graph().clone();
        let mut prev = vec![0.0; graph.num_states() * graph.num_states()];
        for i in 0..=14 {
            let t = s + i as f64 * 0.5;
            let p = est.transition_matrix(s, t).unwrap();
            for g in 0..graph.num_states() {
                for h in (0..graph.num_states()).filter(|&h| graph.is_absorbing(h) && h != g) {
                    let x = p.get(g, h);
                    prop_assert!(x >= prev[g * graph.num_states() + h] - 1e-15);
                    prev[g * graph.num_states() + h] = x;
                }
            }
        }
    }

    #[test]
    fn cumulative_intensity_is_monotone(seed in any::<u64>()) {
        let (est, _) = model(seed);
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.2).collect();
        for tr in est.graph().transitions() {
            let vals = Target::cumulative(tr.from, tr.to).fitted(&est, &times).unwrap();
            prop_assert!(vals.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn mstep_is_feasible_and_stationary(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = Arc::new(TransitionGraph::extended_illness_death(&[]).unwrap());
        let k = rng.random_range(1..=5);
        let grid = unit_grid(k);
        let nv = graph.num_transitions();
        let h = graph.num_states();
        let d: Vec<f64> = (0..k * nv).map(|_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random_range(0.0..5.0) }).collect();
        let y: Vec<f64> = (0..k * h).map(|_| rng.random_range(0.0..8.0)).collect();
        let counts = ExpectedCounts::from_parts(graph.clone(), grid, d, y, vec![1.0; k]).unwrap();
        let est = mstep(&counts);
        prop_assert!(est.is_feasible());
        for bin in 0..k {
            for g in 0..h {
                prop_assert!(est.exit_sum(g, bin) <= 1.0);
            }
        }
        // interior optimum of the expected complete-data log-likelihood
        let grad = reduced_gradient(&est, &counts);
        let scale = counts.y_slice().iter().chain(counts.d_slice()).fold(1.0, |a: f64, &b| a.max(b));
        prop_assert!(grad.max_abs <= 1e-9 * scale, "gradient {}", grad.max_abs);
    }

    #[test]
    fn em_loglik_is_monotone(seed in any::<u64>()) {
        let (est, mut rng) = model(seed);
        let data = random_panel(&est, 12, &mut rng);
        let fit = run_em(&data, &EmConfig::default().with_max_iterations(40)).unwrap();
        let mut prev = fit.initial_loglik;
        for &l in &fit.loglik_trace {
            prop_assert!(l >= prev - 1e-9 * prev.abs().max(1.0), "{l} < {prev}");
            prev = l;
        }
        prop_assert!(fit.estimate.is_feasible());
    }

    #[test]
    fn estep_counts_are_bounded(seed in any::<u64>()) {
        let (est, mut rng) = model(seed);
        let data = random_panel(&est, 10, &mut rng);
        let c = estep(&est, &data).unwrap();
        let graph = est.graph();
        for bin in 0..est.num_bins() {
            for g in 0..graph.num_states() {
                prop_assert!(c.exits(g, bin) <= c.y(g, bin) + 1e-12);
            }
        }
    }

    #[test]
    fn rmse_decomposes(values in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 2..20), truth in prop::collection::vec(-5.0..5.0f64, 4)) {
        let times = vec![0.0, 1.0, 2.0, 3.0];
        let m = score(Target::cumulative(0, 1), &times, &values, &truth).unwrap();
        let n = values.len() as f64;
        for j in 0..4 {
            let mean = values.iter().map(|v| v[j]).sum::<f64>() / n;
            prop_assert!((m.bias[j] - (mean - truth[j])).abs() < 1e-12);
            prop_assert!((m.rmse[j].powi(2) - m.variance[j] - m.bias[j].powi(2)).abs() < 1e-9);
            prop_assert!(m.variance[j] >= 0.0);
        }
    }

    #[test]
    fn simulation_is_seeded(seed in any::<u64>(), rep in 0u64..1000) {
        let spec = ScenarioSpec::builtin("4").unwrap();
        let a = simulate_replicate(&spec, 15, seed, rep).unwrap();
        let b = simulate_replicate(&spec, 15, seed, rep).unwrap();
        prop_assert_eq!(&a, &b);
        let c = simulate_replicate(&spec, 15, seed, rep + 1).unwrap();
        prop_assert_ne!(a, c);
    }
}
