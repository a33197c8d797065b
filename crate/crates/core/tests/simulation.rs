use icmsm::simulate::{true_transition_matrices, TRUTH_STEP_FRACTION};
use icmsm::{simulate_panel, true_values, ScenarioSpec, Target, VisitProcess};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn state_at(path: &[(f64, usize)], t: f64) -> usize {
    path.iter().rev().find(|(s, _)| *s <= t).unwrap().1
}

#[test]
fn exponential_truth_matches_closed_form() {
    let spec = ScenarioSpec::builtin("1").unwrap();
    let times = [0.0, 2.5, 5.0, 10.0, 15.0];
    let targets = [
        Target::probability(0, 0, 0.0),
        Target::probability(0, 1, 0.0),
        Target::probability(0, 2, 0.0),
    ];
    let truth = true_values(&spec, &targets, &times).unwrap();
    for (j, &t) in times.iter().enumerate() {
        let p11 = (-0.15 * t).exp();
        let p12 = 2.0 * ((-0.1 * t).exp() - (-0.15 * t).exp());
        assert!((truth.values[0][j] - p11).abs() < 1e-8);
        assert!((truth.values[1][j] - p12).abs() < 1e-8);
        assert!((truth.values[2][j] - (1.0 - p11 - p12)).abs() < 1e-8);
    }
}

#[test]
fn weibull_truth_agrees_with_monte_carlo() {
    let spec = ScenarioSpec::builtin("3").unwrap();
    let times = [5.0, 10.0];
    let truth = true_values(&spec, &[Target::probability(0, 2, 0.0)], &times).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 1_000_000;
    let mut hits = [0usize; 2];
    for _ in 0..n {
        let path = spec.sample_path(&mut rng);
        for (j, &t) in times.iter().enumerate() {
            if state_at(&path, t) == 2 {
                hits[j] += 1;
            }
        }
    }
    for j in 0..2 {
        let p = truth.values[0][j];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let mc = hits[j] as f64 / n as f64;
        assert!(
            (mc - p).abs() < 4.0 * se,
            "t={}: mc {mc} truth {p}",
            times[j]
        );
    }
}

#[test]
fn truth_is_stable_under_step_halving() {
    for name in ["1", "3", "4"] {
        let spec = ScenarioSpec::builtin(name).unwrap();
        let times: Vec<f64> = (0..=15).map(|i| i as f64).collect();
        let step = spec.horizon * TRUTH_STEP_FRACTION;
        for s in [0.0, 2.0] {
            let a = true_transition_matrices(&spec, s, &times, step);
            let b = true_transition_matrices(&spec, s, &times, step / 2.0);
            for (x, y) in a.iter().zip(&b) {
                assert!(x.max_abs_diff(y) < 1e-6, "scenario {name}");
            }
        }
    }
}

#[test]
fn first_event_split_follows_the_hazards() {
    let spec = ScenarioSpec::builtin("1").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut to_illness = 0;
    let mut moved = 0;
    for _ in 0..n {
        let path = spec.sample_path(&mut rng);
        if path.len() > 1 {
            moved += 1;
            if path[1].1 == 1 {
                to_illness += 1;
            }
        }
    }
    let frac = to_illness as f64 / moved as f64;
    let se = (2.0 / 9.0 / moved as f64).sqrt();
    assert!((frac - 2.0 / 3.0).abs() < 4.0 * se, "{frac}");
}

#[test]
fn visits_follow_their_schedule() {
    let spec = ScenarioSpec::builtin("5").unwrap();
    let ds = simulate_panel(&spec, 200, 9).unwrap();
    for s in ds.subjects() {
        let times: Vec<f64> = s.observations.iter().map(|o| o.time).collect();
        assert_eq!(times[0], 0.0);
        assert!(times.windows(2).all(|w| w[1] - w[0] >= 2.8 - 1e-12));
        assert!(*times.last().unwrap() <= spec.horizon);
    }

    let spec = ScenarioSpec::builtin("2").unwrap();
    let ds = simulate_panel(&spec, 200, 9).unwrap();
    let VisitProcess::UniformGap { hi, .. } = spec.visits else {
        unreachable!()
    };
    for s in ds.subjects() {
        let times: Vec<f64> = s.observations.iter().map(|o| o.time).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= hi));
    }
}

#[test]
fn exact_arrivals_are_recorded_at_their_times() {
    let spec = ScenarioSpec::builtin("4").unwrap();
    let ds = simulate_panel(&spec, 300, 4).unwrap();
    let mut off_schedule = 0;
    for s in ds.subjects() {
        let obs = &s.observations;
        for w in obs.windows(2) {
            // an arrival into an exact state is never preceded by that state
            if spec.graph.is_exact(w[1].state) && w[0].state != w[1].state {
                off_schedule += 1;
            }
        }
    }
    assert!(off_schedule > 0);
}
