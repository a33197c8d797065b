//! Latent-Poisson EM.
//!
//! Every subject carries independent latent Poisson counts `W_gh^k` with
//! means `α_gh^k`. Only the counts of the state occupied just before `τ_k`
//! matter, and only the first jump is realized. The conditional mean of
//! `W_gh^k` is `α` when the subject is not in `g`, and
//! `α · exp(-Σ_{h'≠h} α_gh'^k)` weighted by the jump probability otherwise:
//!
//! `E[W] = (1 - Y_g,i) α + d_gh,i exp(-Σ_{h'≠h} α_gh')`.
//!
//! This is linear in the multinomial expectations, so the aggregate only
//! needs `d`, `Y` and the at-risk counts.

use crate::em::{self, EmConfig, Estimator, ExpectedCounts, FitData, FitResult};
use crate::error::{Error, Result};
use crate::graph::TransitionGraph;
use crate::panel::BinGrid;
use crate::prodint::{IntensityEstimate, Propagator};
use std::sync::Arc;

/// Aggregated expected latent Poisson counts.
///
/// The aggregate `W_gh^k` is stored split into the part carried over from the
/// current estimate, `(n_k - Y_g^k) α_gh^k`, and the part driven by the
/// observed jumps, `d_gh^k exp(-Σ_{h'≠h} α_gh'^k)`. The update divides each by
/// `n_k` separately: when `Y_g^k = 0` the first ratio is exactly 1 and the
/// jump stays bitwise unchanged.
#[derive(Debug, Clone)]
pub struct PoissonExpectedCounts {
    counts: ExpectedCounts,
    prior: IntensityEstimate,
    /// `(n_k - Y_g^k)`, bin-major over states.
    not_in_state: Vec<f64>,
    /// `d_gh^k exp(-Σ_{h'≠h} α_gh'^k)`, bin-major over transitions.
    jump: Vec<f64>,
}

impl PoissonExpectedCounts {
    fn from_counts(counts: ExpectedCounts, prior: &IntensityEstimate) -> Self {
        let graph = counts.graph().clone();
        let h = graph.num_states();
        let nv = graph.num_transitions();
        let k = counts.num_bins();
        let mut not_in_state = vec![0.0; k * h];
        let mut jump = vec![0.0; k * nv];
        for bin in 0..k {
            let n = counts.at_risk(bin);
            for g in 0..h {
                let y = counts.y(g, bin);
                not_in_state[bin * h + g] = if y == 0.0 { n } else { (n - y).max(0.0) };
                let out = graph.outgoing(g);
                let total: f64 = out.iter().map(|&v| prior.get(v, bin)).sum();
                for &v in out {
                    let d = counts.d(v, bin);
                    if d > 0.0 {
                        let others = total - prior.get(v, bin);
                        jump[bin * nv + v] = d * (-others.max(0.0)).exp();
                    }
                }
            }
        }
        Self {
            counts,
            prior: prior.clone(),
            not_in_state,
            jump,
        }
    }

    /// Builds counts directly from aggregated `W` and at-risk numbers.
    pub fn from_expected(
        graph: Arc<TransitionGraph>,
        grid: Arc<BinGrid>,
        w: Vec<f64>,
        at_risk: Vec<f64>,
    ) -> Result<Self> {
        let k = grid.num_bins();
        let h = graph.num_states();
        let y = vec![0.0; k * h];
        let d = vec![0.0; w.len()];
        let counts = ExpectedCounts::from_parts(graph.clone(), grid.clone(), d, y, at_risk)?;
        let prior = IntensityEstimate::zeros(graph, grid);
        Ok(Self {
            counts,
            prior,
            not_in_state: vec![0.0; k * h],
            jump: w,
        })
    }

    /// The multinomial expectations the latent counts were derived from.
    pub fn counts(&self) -> &ExpectedCounts {
        &self.counts
    }

    /// Aggregated `E[W_gh^k]` over subjects at risk in `bin`.
    pub fn w(&self, v: usize, bin: usize) -> f64 {
        let graph = self.counts.graph();
        let g = graph.transition(v).from;
        self.not_in_state[bin * graph.num_states() + g] * self.prior.get(v, bin)
            + self.jump[bin * graph.num_transitions() + v]
    }

    pub fn at_risk(&self, bin: usize) -> f64 {
        self.counts.at_risk(bin)
    }
}

pub(crate) fn estep_with(prop: &Propagator<'_>, data: &FitData) -> Result<PoissonExpectedCounts> {
    let counts = em::estep_with(prop, data)?;
    Ok(PoissonExpectedCounts::from_counts(counts, prop.estimate()))
}

/// Expected latent Poisson counts under `estimate`. Rows with total jump
/// above 1 get a staying probability of 0 in the likelihood.
pub fn estep_poisson(
    estimate: &IntensityEstimate,
    data: &FitData,
) -> Result<PoissonExpectedCounts> {
    if data.graph().has_exact_states() {
        return Err(Error::InvalidConfig(
            "the poisson estimator does not support exactly observed states".into(),
        ));
    }
    if estimate.grid().taus() != data.grid().taus() {
        return Err(Error::ShapeMismatch(
            "estimate grid differs from the data grid".into(),
        ));
    }
    let prop = Propagator::clamping(estimate);
    estep_with(&prop, data)
}

/// Poisson update `α = Σ_i E[W_i] / n_k`. The result is not projected onto
/// the feasible region.
pub fn mstep_poisson(counts: &PoissonExpectedCounts) -> Result<IntensityEstimate> {
    let graph = counts.counts.graph().clone();
    let grid = counts.counts.grid().clone();
    let h = graph.num_states();
    let nv = graph.num_transitions();
    let mut est = IntensityEstimate::zeros(graph.clone(), grid);
    for bin in 0..counts.counts.num_bins() {
        let n = counts.at_risk(bin);
        for (v, t) in graph.transitions().iter().enumerate() {
            let carry = counts.not_in_state[bin * h + t.from];
            let prior = counts.prior.get(v, bin);
            let jump = counts.jump[bin * nv + v];
            if n == 0.0 {
                if carry * prior + jump > 0.0 {
                    return Err(Error::EmptyRiskSet { bin: bin + 1 });
                }
                continue;
            }
            est.set(v, bin, prior * (carry / n) + jump / n);
        }
    }
    Ok(est)
}

/// Latent-Poisson EM.
pub fn run_em_poisson(data: &FitData, config: &EmConfig) -> Result<FitResult> {
    em::run_estimator(data, config, Estimator::Poisson)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{PanelDataset, PanelRow};
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_over_risk_set() {
        let graph = Arc::new(TransitionGraph::new(2, &[(1, 2)], &[]).unwrap());
        let grid = Arc::new(BinGrid::from_taus(vec![1.0]).unwrap());
        let c = PoissonExpectedCounts::from_expected(
            graph.clone(),
            grid.clone(),
            vec![0.1 + 0.3],
            vec![2.0],
        )
        .unwrap();
        assert_abs_diff_eq!(mstep_poisson(&c).unwrap().get(0, 0), 0.2, epsilon = 1e-15);

        let c =
            PoissonExpectedCounts::from_expected(graph.clone(), grid.clone(), vec![0.0], vec![2.0])
                .unwrap();
        assert_eq!(mstep_poisson(&c).unwrap().get(0, 0), 0.0);

        let c = PoissonExpectedCounts::from_expected(graph, grid, vec![0.5], vec![0.0]).unwrap();
        assert!(matches!(
            mstep_poisson(&c),
            Err(Error::EmptyRiskSet { bin: 1 })
        ));
    }

    fn fit_data(rows: Vec<PanelRow>, graph: &Arc<TransitionGraph>) -> FitData {
        let ds = PanelDataset::ingest(rows, graph).unwrap();
        FitData::new(graph.clone(), ds).unwrap()
    }

    #[test]
    fn staying_subject_has_no_latent_jump() {
        let graph = Arc::new(TransitionGraph::new(2, &[(1, 2)], &[]).unwrap());
        let data = fit_data(
            vec![PanelRow::new("a", 0.0, 0), PanelRow::new("a", 1.0, 0)],
            &graph,
        );
        let est = IntensityEstimate::new(graph, data.grid().clone(), vec![0.4]).unwrap();
        let c = estep_poisson(&est, &data).unwrap();
        assert_eq!(c.w(0, 0), 0.0);
    }

    #[test]
    fn unoccupied_state_keeps_its_mean() {
        let graph = Arc::new(TransitionGraph::illness_death());
        let data = fit_data(
            vec![
                PanelRow::new("a", 0.0, 0),
                PanelRow::new("a", 1.0, 1),
                PanelRow::new("a", 2.0, 2),
            ],
            &graph,
        );
        let est = IntensityEstimate::new(
            graph,
            data.grid().clone(),
            vec![0.3, 0.2, 0.37, 0.3, 0.2, 0.5],
        )
        .unwrap();
        let c = estep_poisson(&est, &data).unwrap();
        assert_eq!(c.w(2, 0), 0.37);
        assert_eq!(mstep_poisson(&c).unwrap().get(2, 0), 0.37);
        // single exit from state 2: no competing factor
        assert_eq!(c.w(2, 1), 1.0);
        // observed 1 -> 2 in bin 1 with competitor 1 -> 3
        assert_abs_diff_eq!(c.w(0, 0), (-0.2_f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn exact_states_rejected() {
        let graph = Arc::new(TransitionGraph::new(3, &[(1, 2), (1, 3), (2, 3)], &[3]).unwrap());
        let data = fit_data(
            vec![PanelRow::new("a", 0.0, 0), PanelRow::new("a", 1.0, 1)],
            &graph,
        );
        assert!(matches!(
            run_em_poisson(&data, &EmConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
        assert!(run_em_poisson(&data, &EmConfig::default().with_max_iterations(0)).is_err());
    }
}
