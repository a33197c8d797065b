//! Alternative M-steps that reuse the multinomial E-step.
//!
//! Canonical multinomial: per state and bin, the jumps to the successors
//! solve `α = D (1 - M α)` with `D = diag(Q)`, `Q_h = d_h / (Y - Σd + d_h)`
//! and `M` the hollow matrix of ones, i.e. `(I + D M) α = Q`.
//!
//! Multinoulli: one joint system per bin over all transitions with
//! `Q'_v = d_v / (n_k - Σd + d_v)`.

use crate::em::{self, EmConfig, Estimator, ExpectedCounts, FitData, FitResult};
use crate::error::{Error, Result};
use crate::prodint::IntensityEstimate;

/// Pivots smaller than this make a system singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AltVariant {
    Canonical,
    Multinoulli,
}

/// Solves `A x = b` for a dense row-major `A` by LU with partial pivoting.
/// Returns `None` when a pivot falls below [`PIVOT_THRESHOLD`].
pub fn solve_dense(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty");
        if m[piv * n + col].abs() < PIVOT_THRESHOLD {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let p = m[col * n + col];
        for i in col + 1..n {
            let f = m[i * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[i * n + j] -= f * m[col * n + j];
            }
            x[i] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= m[i * n + j] * x[j];
        }
        x[i] = s / m[i * n + i];
    }
    Some(x)
}

/// Solves `(I + diag(q) M) α = q` with `M` the hollow ones matrix.
fn solve_block(q: &[f64]) -> Option<Vec<f64>> {
    let n = q.len();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = if i == j { 1.0 } else { q[i] };
        }
    }
    solve_dense(&a, q)
}

/// Ratios `d_v / (total - Σd + d_v)` with `0/0 = 0`.
fn ratios(d: &[f64], total: f64) -> Vec<f64> {
    let sum: f64 = d.iter().sum();
    d.iter()
        .map(|&dv| {
            if dv == 0.0 {
                0.0
            } else {
                dv / (total - sum + dv)
            }
        })
        .collect()
}

pub(crate) struct AltUpdate {
    pub estimate: IntensityEstimate,
    pub clamped_components: usize,
    pub rescaled_rows: usize,
}

fn clamp_negative(x: &mut [f64]) -> usize {
    let mut n = 0;
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
            n += 1;
        }
    }
    n
}

pub(crate) fn canonical_update(counts: &ExpectedCounts) -> Result<AltUpdate> {
    let graph = counts.graph().clone();
    let mut est = IntensityEstimate::zeros(graph.clone(), counts.grid().clone());
    let mut clamped = 0;
    for bin in 0..counts.num_bins() {
        for g in 0..graph.num_states() {
            let out = graph.outgoing(g);
            if out.is_empty() {
                continue;
            }
            let d: Vec<f64> = out.iter().map(|&v| counts.d(v, bin)).collect();
            let nonzero = d.iter().filter(|&&x| x > 0.0).count();
            if nonzero == 0 {
                continue;
            }
            let y = counts.y(g, bin);
            let exits: f64 = d.iter().sum();
            if nonzero >= 2 && y <= exits {
                return Err(Error::SingularMStep {
                    state: Some(g + 1),
                    bin: bin + 1,
                });
            }
            let mut alpha = solve_block(&ratios(&d, y)).ok_or(Error::SingularMStep {
                state: Some(g + 1),
                bin: bin + 1,
            })?;
            clamped += clamp_negative(&mut alpha);
            for (&v, a) in out.iter().zip(alpha) {
                est.set(v, bin, a);
            }
        }
    }
    if clamped > 0 {
        log::warn!("canonical M-step: {clamped} negative components set to 0");
    }
    let rescaled_rows = em::enforce_exit_bound(&mut est);
    Ok(AltUpdate {
        estimate: est,
        clamped_components: clamped,
        rescaled_rows,
    })
}

pub(crate) fn multinoulli_update(counts: &ExpectedCounts) -> Result<AltUpdate> {
    let graph = counts.graph().clone();
    let nv = graph.num_transitions();
    let mut est = IntensityEstimate::zeros(graph.clone(), counts.grid().clone());
    let mut clamped = 0;
    for bin in 0..counts.num_bins() {
        let d: Vec<f64> = (0..nv).map(|v| counts.d(v, bin)).collect();
        let nonzero = d.iter().filter(|&&x| x > 0.0).count();
        if nonzero == 0 {
            continue;
        }
        let n = counts.at_risk(bin);
        let total: f64 = d.iter().sum();
        if nonzero >= 2 && n <= total {
            return Err(Error::SingularMStep {
                state: None,
                bin: bin + 1,
            });
        }
        let mut alpha = solve_block(&ratios(&d, n)).ok_or(Error::SingularMStep {
            state: None,
            bin: bin + 1,
        })?;
        clamped += clamp_negative(&mut alpha);
        for (v, a) in alpha.into_iter().enumerate() {
            est.set(v, bin, a);
        }
    }
    if clamped > 0 {
        log::warn!("multinoulli M-step: {clamped} negative components set to 0");
    }
    let rescaled_rows = em::enforce_exit_bound(&mut est);
    Ok(AltUpdate {
        estimate: est,
        clamped_components: clamped,
        rescaled_rows,
    })
}

/// Canonical-multinomial M-step by one linear solve per (state, bin).
pub fn mstep_canonical(counts: &ExpectedCounts) -> Result<IntensityEstimate> {
    canonical_update(counts).map(|u| u.estimate)
}

/// Multinoulli M-step by one joint linear solve per bin, using the bin's
/// at-risk count as `n_k`.
pub fn mstep_multinoulli(counts: &ExpectedCounts) -> Result<IntensityEstimate> {
    multinoulli_update(counts).map(|u| u.estimate)
}

/// EM with the multinomial E-step and an alternative M-step.
pub fn run_em_variant(data: &FitData, config: &EmConfig, variant: AltVariant) -> Result<FitResult> {
    let estimator = match variant {
        AltVariant::Canonical => Estimator::Canonical,
        AltVariant::Multinoulli => Estimator::Multinoulli,
    };
    em::run_estimator(data, config, estimator)
}
