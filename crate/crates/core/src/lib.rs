//! Non-parametric maximum likelihood for interval-censored Markov
//! multi-state models without loops.
//!
//! The cumulative transition intensities are step functions with jumps at
//! the sorted unique observation times. They are estimated by EM, with the
//! multinomial M-step as the main estimator and the latent-Poisson,
//! canonical-multinomial and multinoulli variants as comparators.
//!
//! ```
//! use icmsm::{FitData, EmConfig, PanelDataset, PanelRow, TransitionGraph, run_em};
//! use std::sync::Arc;
//!
//! let graph = Arc::new(TransitionGraph::illness_death());
//! let rows = vec![
//!     PanelRow::new("a", 0.0, 0), PanelRow::new("a", 1.0, 1), PanelRow::new("a", 2.0, 2),
//!     PanelRow::new("b", 0.0, 0), PanelRow::new("b", 1.0, 0), PanelRow::new("b", 2.0, 1),
//! ];
//! let dataset = PanelDataset::ingest(rows, &graph).unwrap();
//! let data = FitData::new(graph, dataset).unwrap();
//! let fit = run_em(&data, &EmConfig::default()).unwrap();
//! assert!(fit.converged);
//! ```

pub mod alt;
pub mod em;
pub mod error;
pub mod graph;
pub mod panel;
pub mod poisson;
pub mod prodint;
pub mod simulate;

pub use alt::{mstep_canonical, mstep_multinoulli, run_em_variant, solve_dense, AltVariant};
pub use em::{
    estep, estep_subject, is_local_max, mstep, observed_loglik, reduced_gradient, run_em,
    run_estimator, run_estimator_observed, Diagnostics, EmConfig, Estimator, ExpectedCounts,
    FitData, FitResult, InitialEstimate, ReducedGradient, StopCriterion, StopReason, TraceRow,
};
pub use error::{Error, Result};
pub use graph::{ReachSets, Transition, TransitionGraph};
pub use panel::{
    subject_bin_context, BinGrid, Interval, IntervalIndex, Observation, PanelDataset, PanelRow,
    SubjectBinContext, SubjectRecord,
};
pub use poisson::{estep_poisson, mstep_poisson, run_em_poisson, PoissonExpectedCounts};
pub use prodint::{BinMatrix, IntensityEstimate, IntervalCache, Propagator, SquareMatrix};
pub use simulate::{
    default_tgrid, score, simulate_panel, simulate_replicate, simulate_replicates, true_values,
    Hazard, MetricsSeries, ScenarioSpec, Target, TargetKind, TrueCurves, VisitProcess,
};
