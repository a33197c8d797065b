//! Shared helpers for the integration tests: random models and data, and a
//! brute-force E-step that enumerates bin-wise state paths.

#![allow(dead_code)]

use icmsm::{BinGrid, FitData, IntensityEstimate, PanelDataset, PanelRow, TransitionGraph};
use rand::Rng;
use std::sync::Arc;

/// Every labeled acyclic graph on `h` states with at least one transition.
pub fn all_dags(h: usize) -> Vec<TransitionGraph> {
    let pairs: Vec<(usize, usize)> = (1..=h)
        .flat_map(|g| (1..=h).filter(move |&k| k != g).map(move |k| (g, k)))
        .collect();
    (1u32..(1 << pairs.len()))
        .filter_map(|mask| {
            let chosen: Vec<(usize, usize)> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &p)| p)
                .collect();
            TransitionGraph::new(h, &chosen, &[]).ok()
        })
        .collect()
}

/// Rebuilds `graph` with a random set of exact states among those that can
/// be entered.
pub fn with_random_exact<R: Rng>(graph: &TransitionGraph, p: f64, rng: &mut R) -> TransitionGraph {
    let pairs: Vec<(usize, usize)> = graph
        .transitions()
        .iter()
        .map(|t| (t.from + 1, t.to + 1))
        .collect();
    let exact: Vec<usize> = (0..graph.num_states())
        .filter(|&g| !graph.predecessors(g).is_empty() && rng.random::<f64>() < p)
        .map(|g| g + 1)
        .collect();
    TransitionGraph::new(graph.num_states(), &pairs, &exact).unwrap()
}

/// Grid with `τ_k = k`.
pub fn unit_grid(k: usize) -> Arc<BinGrid> {
    Arc::new(BinGrid::from_taus((1..=k).map(|x| x as f64).collect()).unwrap())
}

/// Strictly positive feasible jumps: per state and bin, the exits and the
/// staying probability are a random split of 1.
pub fn random_estimate<R: Rng>(
    graph: &Arc<TransitionGraph>,
    grid: &Arc<BinGrid>,
    rng: &mut R,
) -> IntensityEstimate {
    let mut est = IntensityEstimate::zeros(graph.clone(), grid.clone());
    for bin in 0..grid.num_bins() {
        for g in 0..graph.num_states() {
            let out = graph.outgoing(g);
            let weights: Vec<f64> = out.iter().map(|_| rng.random_range(0.01..1.0)).collect();
            let total = rng.random_range(0.01..1.0) + weights.iter().sum::<f64>();
            for (&v, w) in out.iter().zip(weights) {
                est.set(v, bin, w / total);
            }
        }
    }
    est
}

/// Draws a discrete-chain path on grid points `from..=K` started in `state`.
pub fn chain_path<R: Rng>(
    est: &IntensityEstimate,
    from: usize,
    state: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut path = vec![state];
    let mut s = state;
    for bin in from..est.num_bins() {
        let m = est.bin_matrix(bin).unwrap();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = m.row(s);
        let mut next = s;
        for (h, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = h;
                break;
            }
        }
        s = next;
        path.push(s);
    }
    path
}

/// Random panel on the unit grid simulated from the discrete chain of
/// `est`. Subjects may enter late, visits are random, and every arrival
/// into an exact state is observed at its grid point.
pub fn random_panel<R: Rng>(est: &IntensityEstimate, n: usize, rng: &mut R) -> FitData {
    let graph = est.graph().clone();
    let k = est.num_bins();
    let mut rows = Vec::new();
    for i in 0..n {
        let first = rng.random_range(0..k);
        let start = rng.random_range(0..graph.num_states());
        let path = chain_path(est, first, start, rng);
        let mut points = vec![first];
        for p in first + 1..=k {
            let x = path[p - first];
            let prev = path[p - first - 1];
            let exact_arrival = graph.is_exact(x) && prev != x;
            if exact_arrival || rng.random::<f64>() < 0.45 {
                points.push(p);
            }
        }
        if points.len() == 1 {
            points.push(rng.random_range(first + 1..=k));
        }
        for p in points {
            rows.push(PanelRow::new(format!("s{i}"), p as f64, path[p - first]));
        }
    }
    let ds = PanelDataset::ingest(rows, &graph).unwrap();
    FitData::with_grid(graph, ds, est.grid().clone()).unwrap()
}

/// E-step quantities by exhaustive enumeration of bin-wise state paths.
#[derive(Debug, Clone)]
pub struct OracleCounts {
    /// `d[bin * V + v]`.
    pub d: Vec<f64>,
    /// `y[bin * H + g]`.
    pub y: Vec<f64>,
    pub loglik: f64,
}

/// Brute-force conditional expectations. A path must match every observed
/// state; for an observed arrival into an exact state `b` it must also not
/// be in `b` at the preceding grid point.
pub fn oracle(est: &IntensityEstimate, data: &FitData) -> OracleCounts {
    let graph = est.graph();
    let grid = est.grid();
    let h = graph.num_states();
    let nv = graph.num_transitions();
    let k = grid.num_bins();
    let mats: Vec<_> = (0..k).map(|b| est.bin_matrix(b).unwrap()).collect();
    let mut d = vec![0.0; k * nv];
    let mut y = vec![0.0; k * h];
    let mut loglik = 0.0;

    for subject in data.dataset().subjects() {
        let obs: Vec<(usize, usize)> = subject
            .observations
            .iter()
            .map(|o| (grid.point_of(o.time).unwrap(), o.state))
            .collect();
        let first = obs[0].0;
        let last = obs.last().unwrap().0;
        // required[p]: state forced at p; forbidden[p]: state excluded at p
        let mut required = vec![None; last + 1];
        let mut forbidden = vec![None; last + 1];
        for (j, &(p, x)) in obs.iter().enumerate() {
            required[p] = Some(x);
            if j > 0 && graph.is_exact(x) && obs[j - 1].1 != x {
                forbidden[p - 1] = Some(x);
            }
        }

        let mut paths: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut stack = vec![(vec![obs[0].1], 1.0)];
        while let Some((path, w)) = stack.pop() {
            let p = first + path.len() - 1;
            if p == last {
                paths.push((path, w));
                continue;
            }
            let s = *path.last().unwrap();
            for next in 0..h {
                let m = mats[p].get(s, next);
                if m == 0.0 {
                    continue;
                }
                if required[p + 1].is_some_and(|x| x != next) || forbidden[p + 1] == Some(next) {
                    continue;
                }
                let mut np = path.clone();
                np.push(next);
                stack.push((np, w * m));
            }
        }

        let z: f64 = paths.iter().map(|(_, w)| w).sum();
        assert!(z > 0.0, "observed pattern has zero probability");
        loglik += z.ln();
        for (path, w) in &paths {
            for p in first..last {
                let g = path[p - first];
                let nx = path[p - first + 1];
                y[p * h + g] += w / z;
                if nx != g {
                    let v = graph.transition_index(g, nx).unwrap();
                    d[p * nv + v] += w / z;
                }
            }
        }
    }
    OracleCounts { d, y, loglik }
}

/// Largest absolute entry-wise difference.
pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
