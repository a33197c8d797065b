//! Multinomial EM: E-step expectations, the KKT M-step, the reduced
//! gradient and the shared EM driver used by every estimator variant.

use crate::alt;
use crate::error::{Error, Result};
use crate::graph::TransitionGraph;
use crate::panel::{BinGrid, Interval, IntervalIndex, PanelDataset};
use crate::poisson::{self, PoissonExpectedCounts};
use crate::prodint::{IntensityEstimate, IntervalCache, Propagator, PROBABILITY_FLOOR};
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;

/// Subjects per work unit in the parallel E-step. Partial sums are formed
/// per chunk in subject order and combined in chunk order, so the result
/// does not depend on the number of worker threads.
const SUBJECT_CHUNK: usize = 16;

/// Progress is logged every this many iterations.
const PROGRESS_EVERY: usize = 50;

/// Log-likelihood drops larger than this are reported.
const LOGLIK_DROP_REPORT: f64 = 1e-6;

/// A validated dataset together with its bin grid and interval index.
#[derive(Debug, Clone)]
pub struct FitData {
    graph: Arc<TransitionGraph>,
    dataset: PanelDataset,
    grid: Arc<BinGrid>,
    index: IntervalIndex,
}

impl FitData {
    pub fn new(graph: Arc<TransitionGraph>, dataset: PanelDataset) -> Result<Self> {
        let grid = BinGrid::from_dataset(&dataset)?;
        Self::with_grid(graph, dataset, Arc::new(grid))
    }

    /// Uses an explicit grid, which must contain every positive observation time.
    pub fn with_grid(
        graph: Arc<TransitionGraph>,
        dataset: PanelDataset,
        grid: Arc<BinGrid>,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let index = IntervalIndex::new(&dataset, &grid, &graph)?;
        Ok(Self {
            graph,
            dataset,
            grid,
            index,
        })
    }

    pub fn graph(&self) -> &Arc<TransitionGraph> {
        &self.graph
    }

    pub fn dataset(&self) -> &PanelDataset {
        &self.dataset
    }

    pub fn grid(&self) -> &Arc<BinGrid> {
        &self.grid
    }

    pub fn index(&self) -> &IntervalIndex {
        &self.index
    }

    fn subject_id(&self, i: usize) -> &str {
        &self.dataset.subjects()[i].id
    }
}

/// Aggregated E-step output: expected transition counts `d_gh^k`, expected
/// occupancy `Y_g^k` just before each grid point, and the observed-data
/// log-likelihood of the estimate the expectations were taken under.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    graph: Arc<TransitionGraph>,
    grid: Arc<BinGrid>,
    /// `d[bin * V + v]`.
    d: Vec<f64>,
    /// `y[bin * H + g]`.
    y: Vec<f64>,
    at_risk: Vec<f64>,
    loglik: f64,
}

impl ExpectedCounts {
    fn zeros(graph: Arc<TransitionGraph>, grid: Arc<BinGrid>) -> Self {
        let k = grid.num_bins();
        let d = vec![0.0; k * graph.num_transitions()];
        let y = vec![0.0; k * graph.num_states()];
        Self {
            graph,
            grid,
            d,
            y,
            at_risk: vec![0.0; k],
            loglik: 0.0,
        }
    }

    /// Assembles counts from raw bin-major grids, e.g. for testing M-steps.
    pub fn from_parts(
        graph: Arc<TransitionGraph>,
        grid: Arc<BinGrid>,
        d: Vec<f64>,
        y: Vec<f64>,
        at_risk: Vec<f64>,
    ) -> Result<Self> {
        let k = grid.num_bins();
        if d.len() != k * graph.num_transitions()
            || y.len() != k * graph.num_states()
            || at_risk.len() != k
        {
            return Err(Error::ShapeMismatch(
                "expected-count grids do not match the model".into(),
            ));
        }
        if d.iter()
            .chain(&y)
            .chain(&at_risk)
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(Error::InvalidConfig(
                "expected counts must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            graph,
            grid,
            d,
            y,
            at_risk,
            loglik: 0.0,
        })
    }

    pub fn graph(&self) -> &Arc<TransitionGraph> {
        &self.graph
    }

    pub fn grid(&self) -> &Arc<BinGrid> {
        &self.grid
    }

    pub fn num_bins(&self) -> usize {
        self.grid.num_bins()
    }

    /// Expected number of `v` transitions in 0-based `bin`.
    pub fn d(&self, v: usize, bin: usize) -> f64 {
        self.d[bin * self.graph.num_transitions() + v]
    }

    /// Expected number of subjects in `g` at the start of `bin`.
    pub fn y(&self, g: usize, bin: usize) -> f64 {
        self.y[bin * self.graph.num_states() + g]
    }

    /// Expected departures from `g` in `bin`.
    pub fn exits(&self, g: usize, bin: usize) -> f64 {
        self.graph.outgoing(g).iter().map(|&v| self.d(v, bin)).sum()
    }

    /// Subjects under observation across `bin`.
    pub fn at_risk(&self, bin: usize) -> f64 {
        self.at_risk[bin]
    }

    pub fn d_slice(&self) -> &[f64] {
        &self.d
    }

    pub fn y_slice(&self) -> &[f64] {
        &self.y
    }

    /// Observed-data log-likelihood at the estimate used for the expectations.
    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    fn add(&mut self, other: &ExpectedCounts) {
        for (a, b) in self.d.iter_mut().zip(&other.d) {
            *a += b;
        }
        for (a, b) in self.y.iter_mut().zip(&other.y) {
            *a += b;
        }
        for (a, b) in self.at_risk.iter_mut().zip(&other.at_risk) {
            *a += b;
        }
        self.loglik += other.loglik;
    }

    /// Adds one interval's conditional expectations.
    fn accumulate(&mut self, prop: &Propagator<'_>, cache: &IntervalCache, interval: &Interval) {
        let h = self.graph.num_states();
        let nv = self.graph.num_transitions();
        let denom = cache.denominator();
        for p in interval.start..interval.end {
            let f = cache.forward(p);
            let here = cache.backward(p);
            let next = cache.backward(p + 1);
            let y = &mut self.y[p * h..(p + 1) * h];
            for g in 0..h {
                y[g] += f[g] * here[g] / denom;
            }
            let alpha = prop.estimate().bin_slice(p);
            let d = &mut self.d[p * nv..(p + 1) * nv];
            for (v, t) in self.graph.transitions().iter().enumerate() {
                d[v] += f[t.from] * alpha[v] * next[t.to] / denom;
            }
            self.at_risk[p] += 1.0;
        }
        self.loglik += denom.ln();
    }
}

fn subject_counts(
    prop: &Propagator<'_>,
    data: &FitData,
    i: usize,
    cache: &mut IntervalCache,
    acc: &mut ExpectedCounts,
) -> Result<()> {
    for interval in data.index.subject(i) {
        cache.fill(prop, interval, data.subject_id(i))?;
        acc.accumulate(prop, cache, interval);
    }
    Ok(())
}

/// E-step with a given propagator; shared by the strict and clamping paths.
pub(crate) fn estep_with(prop: &Propagator<'_>, data: &FitData) -> Result<ExpectedCounts> {
    let n = data.index.num_subjects();
    let chunks: Vec<usize> = (0..n).step_by(SUBJECT_CHUNK).collect();
    let partials: Vec<ExpectedCounts> = chunks
        .par_iter()
        .map(|&lo| {
            let mut acc = ExpectedCounts::zeros(data.graph.clone(), data.grid.clone());
            let mut cache = IntervalCache::new();
            for i in lo..(lo + SUBJECT_CHUNK).min(n) {
                subject_counts(prop, data, i, &mut cache, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = ExpectedCounts::zeros(data.graph.clone(), data.grid.clone());
    for part in &partials {
        total.add(part);
    }
    Ok(total)
}

/// Conditional expectations of transition counts and occupancy given the
/// observations, under a feasible estimate.
pub fn estep(estimate: &IntensityEstimate, data: &FitData) -> Result<ExpectedCounts> {
    check_same_model(estimate, data)?;
    let prop = Propagator::strict(estimate)?;
    estep_with(&prop, data)
}

/// E-step contributions of a single subject.
pub fn estep_subject(
    estimate: &IntensityEstimate,
    data: &FitData,
    i: usize,
) -> Result<ExpectedCounts> {
    check_same_model(estimate, data)?;
    let prop = Propagator::strict(estimate)?;
    let mut acc = ExpectedCounts::zeros(data.graph.clone(), data.grid.clone());
    let mut cache = IntervalCache::new();
    subject_counts(&prop, data, i, &mut cache, &mut acc)?;
    Ok(acc)
}

fn check_same_model(estimate: &IntensityEstimate, data: &FitData) -> Result<()> {
    if estimate.grid().taus() != data.grid.taus() || **estimate.graph() != *data.graph {
        return Err(Error::ShapeMismatch(
            "estimate does not belong to this dataset's grid and model".into(),
        ));
    }
    Ok(())
}

/// Observed-data log-likelihood by forward propagation alone.
///
/// For an exact arrival into `b` the last bin contributes
/// `Σ_m P_am(l, τ_{k-1}) α_mb^k` instead of `P_ab(l, r)`.
pub fn observed_loglik(estimate: &IntensityEstimate, data: &FitData) -> Result<f64> {
    check_same_model(estimate, data)?;
    let prop = Propagator::strict(estimate)?;
    loglik_with(&prop, data)
}

pub(crate) fn loglik_with(prop: &Propagator<'_>, data: &FitData) -> Result<f64> {
    let h = data.graph.num_states();
    let mut total = 0.0;
    let mut row = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for i in 0..data.index.num_subjects() {
        for iv in data.index.subject(i) {
            row.fill(0.0);
            row[iv.from] = 1.0;
            let last = if iv.exact_arrival { iv.end - 1 } else { iv.end };
            for bin in iv.start..last {
                prop.forward(bin, &row, &mut tmp);
                std::mem::swap(&mut row, &mut tmp);
            }
            let term = if iv.exact_arrival {
                let alpha = prop.estimate().bin_slice(iv.end - 1);
                data.graph
                    .incoming(iv.to)
                    .iter()
                    .map(|&v| row[data.graph.transition(v).from] * alpha[v])
                    .sum()
            } else {
                row[iv.to]
            };
            if !(term > 0.0) || term < PROBABILITY_FLOOR {
                return Err(Error::NonFiniteLoglik {
                    subject: data.subject_id(i).to_string(),
                });
            }
            total += term.ln();
        }
    }
    Ok(total)
}

/// Makes `Σ_h α_gh^k <= 1` hold exactly for every state and bin. Returns the
/// number of rows that needed adjusting.
pub(crate) fn enforce_exit_bound(est: &mut IntensityEstimate) -> usize {
    let graph = est.graph().clone();
    let mut adjusted = 0;
    for bin in 0..est.num_bins() {
        for g in 0..graph.num_states() {
            let out = graph.outgoing(g);
            let sum: f64 = out.iter().map(|&v| est.get(v, bin)).sum();
            if sum <= 1.0 {
                continue;
            }
            adjusted += 1;
            for &v in out {
                est.set(v, bin, est.get(v, bin) / sum);
            }
            loop {
                let sum: f64 = out.iter().map(|&v| est.get(v, bin)).sum();
                if sum <= 1.0 {
                    break;
                }
                let &top = out
                    .iter()
                    .max_by(|&&a, &&b| est.get(a, bin).total_cmp(&est.get(b, bin)))
                    .expect("non-empty");
                est.set(top, bin, est.get(top, bin).next_down());
            }
        }
    }
    adjusted
}

/// The multinomial M-step.
///
/// With `μ_g^k = max(0, Σ_h d_gh^k - Y_g^k)`, the update is `d/Y` when
/// `μ = 0` and `d/Σ_h d` otherwise, with `0/0 = 0`.
pub fn mstep(counts: &ExpectedCounts) -> IntensityEstimate {
    let graph = counts.graph.clone();
    let mut est = IntensityEstimate::zeros(graph.clone(), counts.grid.clone());
    for bin in 0..counts.num_bins() {
        for g in 0..graph.num_states() {
            let exits = counts.exits(g, bin);
            let y = counts.y(g, bin);
            let mu = (exits - y).max(0.0);
            let denom = if mu == 0.0 { y } else { exits };
            for &v in graph.outgoing(g) {
                let d = counts.d(v, bin);
                let a = if d == 0.0 { 0.0 } else { d / denom };
                est.set(v, bin, a);
            }
        }
    }
    enforce_exit_bound(&mut est);
    est
}

/// Reduced gradient `∇_gh^k = Y_g^k - d_gh^k / α_gh^k + μ_g^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedGradient {
    /// Bin-major, indexed like the estimate.
    pub values: Vec<f64>,
    /// Largest `|∇|`.
    pub max_abs: f64,
}

/// Evaluates the reduced gradient of the expected complete-data
/// log-likelihood at `estimate`, with `counts` taken under `estimate`.
///
/// Cells with `α = 0` sit on the bound `α >= 0`. There the KKT condition
/// only asks for `Y + μ >= 0`, which always holds, so such cells report 0.
pub fn reduced_gradient(estimate: &IntensityEstimate, counts: &ExpectedCounts) -> ReducedGradient {
    let graph = counts.graph.clone();
    let nv = graph.num_transitions();
    let mut values = vec![0.0; counts.num_bins() * nv];
    let mut max_abs = 0.0_f64;
    for bin in 0..counts.num_bins() {
        for g in 0..graph.num_states() {
            let y = counts.y(g, bin);
            let mu = (counts.exits(g, bin) - y).max(0.0);
            for &v in graph.outgoing(g) {
                let a = estimate.get(v, bin);
                let grad = if a == 0.0 {
                    0.0
                } else {
                    y - counts.d(v, bin) / a + mu
                };
                values[bin * nv + v] = grad;
                max_abs = max_abs.max(grad.abs());
            }
        }
    }
    ReducedGradient { values, max_abs }
}

/// Local-maximum check: every reduced-gradient entry within `tolerance` of 0.
pub fn is_local_max(gradient: &ReducedGradient, tolerance: f64) -> bool {
    gradient.values.iter().all(|g| g.abs() <= tolerance)
}

/// Quantity compared against the tolerance to stop the iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopCriterion {
    /// Largest absolute change of any jump between iterations.
    #[default]
    MaxIntensityChange,
    /// Absolute change of the observed log-likelihood.
    LoglikChange,
    /// Largest absolute reduced-gradient entry.
    ReducedGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    IntensityTol,
    LoglikTol,
    Kkt,
    MaxIter,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::IntensityTol => "intensity_tol",
            StopReason::LoglikTol => "loglik_tol",
            StopReason::Kkt => "kkt",
            StopReason::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialEstimate {
    /// `1/K` on every allowed transition.
    #[default]
    Uniform,
    /// 90% of a unit mass in the first tenth of the bins.
    FrontLoaded,
    /// A user-supplied grid on the data's bins.
    Custom(IntensityEstimate),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub tolerance: f64,
    pub criterion: StopCriterion,
    pub max_iterations: usize,
    pub initial: InitialEstimate,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            criterion: StopCriterion::MaxIntensityChange,
            max_iterations: 5000,
            initial: InitialEstimate::Uniform,
        }
    }
}

impl EmConfig {
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_criterion(mut self, criterion: StopCriterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_initial(mut self, initial: InitialEstimate) -> Self {
        self.initial = initial;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn initial_estimate(&self, data: &FitData) -> Result<IntensityEstimate> {
        match &self.initial {
            InitialEstimate::Uniform => Ok(IntensityEstimate::uniform(
                data.graph.clone(),
                data.grid.clone(),
            )),
            InitialEstimate::FrontLoaded => {
                IntensityEstimate::front_loaded(data.graph.clone(), data.grid.clone())
            }
            InitialEstimate::Custom(est) => {
                check_same_model(est, data)?;
                est.check_feasible()?;
                if est.as_slice().iter().any(|&a| a <= 0.0) {
                    return Err(Error::InvalidConfig(
                        "initial estimate must be strictly positive on every transition and bin"
                            .into(),
                    ));
                }
                Ok(est.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Multinomial,
    Poisson,
    Canonical,
    Multinoulli,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Multinomial => "multinomial",
            Estimator::Poisson => "poisson",
            Estimator::Canonical => "canonical",
            Estimator::Multinoulli => "multinoulli",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multinomial" => Ok(Estimator::Multinomial),
            "poisson" => Ok(Estimator::Poisson),
            "canonical" => Ok(Estimator::Canonical),
            "multinoulli" => Ok(Estimator::Multinoulli),
            _ => Err(Error::InvalidConfig(format!("unknown estimator '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub loglik: f64,
    pub max_delta: f64,
    pub max_reduced_gradient: f64,
}

/// Events the driver repaired or flagged along the way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// (state, bin) rows whose M-step output had `Σ α > 1`.
    pub infeasible_rows: usize,
    /// Negative linear-solve components set to 0.
    pub clamped_components: usize,
    /// (state, bin) cells whose staying probability was clamped at 0 for
    /// likelihood evaluation.
    pub clamped_diagonals: usize,
    /// Iterations where the log-likelihood dropped by more than 1e-6, with the drop.
    pub loglik_drops: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimator: Estimator,
    pub estimate: IntensityEstimate,
    pub initial: IntensityEstimate,
    pub iterations: usize,
    /// Log-likelihood after each iteration.
    pub loglik_trace: Vec<f64>,
    /// Log-likelihood of the initial estimate.
    pub initial_loglik: f64,
    pub trace: Vec<TraceRow>,
    pub final_reduced_gradient: ReducedGradient,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    /// Turns a fit that hit the iteration cap into an error carrying the fit.
    pub fn require_converged(self) -> Result<FitResult> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::MaxIterations(Box::new(self)))
        }
    }

    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace
            .last()
            .copied()
            .unwrap_or(self.initial_loglik)
    }

    /// Writes `iteration,loglik,max_delta,max_reduced_gradient`.
    pub fn write_trace_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["iteration", "loglik", "max_delta", "max_reduced_gradient"])?;
        for row in &self.trace {
            wtr.write_record([
                row.iteration.to_string(),
                row.loglik.to_string(),
                row.max_delta.to_string(),
                row.max_reduced_gradient.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes `from,to,bin,tau,gradient` for the final reduced gradient.
    pub fn write_gradient_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let graph = self.estimate.graph();
        let taus = self.estimate.grid().taus();
        let nv = graph.num_transitions();
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["from", "to", "bin", "tau", "gradient"])?;
        for (v, t) in graph.transitions().iter().enumerate() {
            for (bin, tau) in taus.iter().enumerate() {
                wtr.write_record([
                    (t.from + 1).to_string(),
                    (t.to + 1).to_string(),
                    (bin + 1).to_string(),
                    tau.to_string(),
                    self.final_reduced_gradient.values[bin * nv + v].to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Multinomial EM.
pub fn run_em(data: &FitData, config: &EmConfig) -> Result<FitResult> {
    run_estimator(data, config, Estimator::Multinomial)
}

enum Expectations {
    Multinomial(ExpectedCounts),
    Poisson(PoissonExpectedCounts),
}

impl Expectations {
    fn counts(&self) -> &ExpectedCounts {
        match self {
            Expectations::Multinomial(c) => c,
            Expectations::Poisson(p) => p.counts(),
        }
    }
}

fn expect(
    estimator: Estimator,
    est: &IntensityEstimate,
    data: &FitData,
    diag: &mut Diagnostics,
) -> Result<Expectations> {
    if estimator == Estimator::Poisson {
        let prop = Propagator::clamping(est);
        if prop.clamped_cells() > 0 {
            log::warn!(
                "{} (state, bin) cells have total jump above 1; staying probability clamped at 0",
                prop.clamped_cells()
            );
            diag.clamped_diagonals += prop.clamped_cells();
        }
        Ok(Expectations::Poisson(poisson::estep_with(&prop, data)?))
    } else {
        Ok(Expectations::Multinomial(estep(est, data)?))
    }
}

fn maximize(
    estimator: Estimator,
    exp: &Expectations,
    diag: &mut Diagnostics,
) -> Result<IntensityEstimate> {
    match (estimator, exp) {
        (Estimator::Poisson, Expectations::Poisson(p)) => {
            let est = poisson::mstep_poisson(p)?;
            let infeasible = infeasible_rows(&est);
            if infeasible > 0 {
                log::warn!("{infeasible} (state, bin) rows have total jump above 1 after the Poisson update");
                diag.infeasible_rows += infeasible;
            }
            Ok(est)
        }
        (Estimator::Multinomial, Expectations::Multinomial(c)) => Ok(mstep(c)),
        (Estimator::Canonical, Expectations::Multinomial(c)) => {
            let out = alt::canonical_update(c)?;
            diag.clamped_components += out.clamped_components;
            diag.infeasible_rows += out.rescaled_rows;
            Ok(out.estimate)
        }
        (Estimator::Multinoulli, Expectations::Multinomial(c)) => {
            let out = alt::multinoulli_update(c)?;
            diag.clamped_components += out.clamped_components;
            diag.infeasible_rows += out.rescaled_rows;
            Ok(out.estimate)
        }
        _ => unreachable!("expectation type follows the estimator"),
    }
}

fn infeasible_rows(est: &IntensityEstimate) -> usize {
    let g = est.graph().num_states();
    (0..est.num_bins())
        .map(|bin| (0..g).filter(|&s| est.exit_sum(s, bin) > 1.0).count())
        .sum()
}

/// The EM driver shared by all estimators.
///
/// Each iteration runs one M-step followed by one E-step at the new
/// estimate; that E-step also yields the log-likelihood and the reduced
/// gradient reported for the iteration. Hitting `max_iterations` is not an
/// error here: the result has `converged = false` and
/// [`FitResult::require_converged`] turns it into one.
pub fn run_estimator(data: &FitData, config: &EmConfig, estimator: Estimator) -> Result<FitResult> {
    run_estimator_observed(data, config, estimator, |_, _| {})
}

/// [`run_estimator`] with a callback receiving every M-step output and its
/// iteration number.
pub fn run_estimator_observed<F>(
    data: &FitData,
    config: &EmConfig,
    estimator: Estimator,
    mut observe: F,
) -> Result<FitResult>
where
    F: FnMut(usize, &IntensityEstimate),
{
    config.validate()?;
    if estimator != Estimator::Multinomial && data.graph.has_exact_states() {
        return Err(Error::InvalidConfig(format!(
            "the {estimator} estimator does not support exactly observed states"
        )));
    }
    let initial = config.initial_estimate(data)?;
    let mut diag = Diagnostics::default();
    let at = |iteration: usize| {
        move |e: Error| Error::AtIteration {
            iteration,
            source: Box::new(e),
        }
    };

    let mut current = initial.clone();
    let mut exp = expect(estimator, &current, data, &mut diag).map_err(at(0))?;
    let initial_loglik = exp.counts().loglik();
    let mut prev_loglik = initial_loglik;
    let mut trace = Vec::new();
    let mut loglik_trace = Vec::new();
    let mut stop_reason = StopReason::MaxIter;
    let mut converged = false;
    let mut gradient = reduced_gradient(&current, exp.counts());

    for iteration in 1..=config.max_iterations {
        let next = maximize(estimator, &exp, &mut diag).map_err(at(iteration))?;
        observe(iteration, &next);
        let delta = next.max_abs_diff(&current);
        current = next;
        exp = expect(estimator, &current, data, &mut diag).map_err(at(iteration))?;
        let loglik = exp.counts().loglik();
        if !loglik.is_finite() {
            return Err(at(iteration)(Error::NonFiniteLoglik {
                subject: "?".into(),
            }));
        }
        gradient = reduced_gradient(&current, exp.counts());
        if loglik < prev_loglik - LOGLIK_DROP_REPORT {
            log::warn!(
                "{estimator}: log-likelihood decreased by {:e} at iteration {iteration}",
                prev_loglik - loglik
            );
            diag.loglik_drops.push((iteration, prev_loglik - loglik));
        }
        trace.push(TraceRow {
            iteration,
            loglik,
            max_delta: delta,
            max_reduced_gradient: gradient.max_abs,
        });
        loglik_trace.push(loglik);
        if iteration % PROGRESS_EVERY == 0 {
            log::info!(
                "{estimator}: iteration {iteration}, loglik {loglik:.6}, max delta {delta:.3e}, max gradient {:.3e}",
                gradient.max_abs
            );
        }
        let hit = match config.criterion {
            StopCriterion::MaxIntensityChange => {
                (delta < config.tolerance).then_some(StopReason::IntensityTol)
            }
            StopCriterion::LoglikChange => {
                ((loglik - prev_loglik).abs() < config.tolerance).then_some(StopReason::LoglikTol)
            }
            StopCriterion::ReducedGradient => {
                (gradient.max_abs < config.tolerance).then_some(StopReason::Kkt)
            }
        };
        prev_loglik = loglik;
        if let Some(reason) = hit {
            stop_reason = reason;
            converged = true;
            break;
        }
    }

    let iterations = trace.len();
    log::info!("{estimator}: stopped after {iterations} iterations ({stop_reason})");
    Ok(FitResult {
        estimator,
        estimate: current,
        initial,
        iterations,
        loglik_trace,
        initial_loglik,
        trace,
        final_reduced_gradient: gradient,
        converged,
        stop_reason,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelRow;
    use approx::assert_abs_diff_eq;

    fn id() -> Arc<TransitionGraph> {
        Arc::new(TransitionGraph::illness_death())
    }

    fn grid(k: usize) -> Arc<BinGrid> {
        Arc::new(BinGrid::from_taus((1..=k).map(|x| x as f64).collect()).unwrap())
    }

    fn single_cell_counts(d: f64, y: f64) -> ExpectedCounts {
        let graph = Arc::new(TransitionGraph::new(2, &[(1, 2)], &[]).unwrap());
        ExpectedCounts::from_parts(graph, grid(1), vec![d], vec![y, 0.0], vec![y]).unwrap()
    }

    #[test]
    fn mstep_examples() {
        assert_eq!(mstep(&single_cell_counts(0.0, 3.0)).get(0, 0), 0.0);
        assert_eq!(mstep(&single_cell_counts(0.0, 0.0)).get(0, 0), 0.0);
        assert_eq!(mstep(&single_cell_counts(2.0, 4.0)).get(0, 0), 0.5);
        assert_eq!(mstep(&single_cell_counts(3.0, 2.0)).get(0, 0), 1.0);
    }

    #[test]
    fn reduced_gradient_examples() {
        let counts = single_cell_counts(2.0, 4.0);
        let fixed = mstep(&counts);
        let g = reduced_gradient(&fixed, &counts);
        assert_eq!(g.max_abs, 0.0);
        assert!(is_local_max(&g, 1e-12));

        let mut off = fixed.clone();
        off.set(0, 0, 0.5 * 1.1);
        let g = reduced_gradient(&off, &counts);
        assert_abs_diff_eq!(g.values[0], 4.0 * 0.1 / 1.1, epsilon = 1e-12);
        assert!(!is_local_max(&g, 1e-3));
    }

    fn dataset(rows: Vec<PanelRow>, graph: &Arc<TransitionGraph>) -> FitData {
        let ds = PanelDataset::ingest(rows, graph).unwrap();
        FitData::new(graph.clone(), ds).unwrap()
    }

    fn uniform_bins(data: &FitData, a: [f64; 3]) -> IntensityEstimate {
        let k = data.grid().num_bins();
        let alpha = (0..k).flat_map(|_| a).collect();
        IntensityEstimate::new(data.graph().clone(), data.grid().clone(), alpha).unwrap()
    }

    #[test]
    fn stay_between_adjacent_visits() {
        let g = id();
        let data = dataset(
            vec![
                PanelRow::new("a", 0.0, 1),
                PanelRow::new("a", 1.0, 1),
                PanelRow::new("a", 2.0, 2),
            ],
            &g,
        );
        let est = uniform_bins(&data, [0.3, 0.2, 0.5]);
        let c = estep(&est, &data).unwrap();
        assert_eq!(c.y(1, 0), 1.0);
        assert_eq!(c.d(2, 0), 0.0);
        assert_eq!(c.y(1, 1), 1.0);
        assert_eq!(c.d(2, 1), 1.0);
    }

    #[test]
    fn two_bin_path_enumeration() {
        let g = id();
        let data = dataset(
            vec![
                PanelRow::new("a", 0.0, 0),
                PanelRow::new("a", 2.0, 2),
                PanelRow::new("b", 0.0, 0),
                PanelRow::new("b", 1.0, 0),
            ],
            &g,
        );
        let est = uniform_bins(&data, [0.3, 0.2, 0.5]);
        let c = estep_subject(&est, &data, 0).unwrap();
        // paths 1->1->3 (0.5*0.2), 1->3->3 (0.2), 1->2->3 (0.3*0.5)
        let (p113, p133, p123) = (0.1, 0.2, 0.15);
        let z = p113 + p133 + p123;
        assert_abs_diff_eq!(c.y(0, 1), p113 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(c.y(1, 1), p123 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(c.y(2, 1), p133 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(c.d(0, 0), p123 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(c.d(1, 0), p133 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(c.d(2, 1), p123 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(c.loglik(), z.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            observed_loglik(&est, &data).unwrap(),
            z.ln() + 0.5_f64.ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn exact_arrival_occupancy() {
        let g = Arc::new(TransitionGraph::new(3, &[(1, 2), (1, 3), (2, 3)], &[3]).unwrap());
        let data = dataset(
            vec![
                PanelRow::new("a", 0.0, 0),
                PanelRow::new("a", 2.0, 2),
                PanelRow::new("b", 0.0, 0),
                PanelRow::new("b", 1.0, 0),
            ],
            &g,
        );
        let est = uniform_bins(&data, [0.3, 0.2, 0.5]);
        let c = estep_subject(&est, &data, 0).unwrap();
        let expected = 0.3 * 0.5 / (0.2 * 0.5 + 0.5 * 0.3);
        assert_abs_diff_eq!(c.y(1, 1), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(c.y(0, 1) + c.y(1, 1), 1.0, epsilon = 1e-15);
        assert_eq!(c.y(2, 1), 0.0);
    }

    #[test]
    fn loglik_examples() {
        let g = Arc::new(TransitionGraph::new(2, &[(1, 2)], &[]).unwrap());
        let p: f64 = 0.35;
        for (end, want) in [(1usize, p.ln()), (0, (1.0 - p).ln())] {
            let data = dataset(
                vec![PanelRow::new("a", 0.0, 0), PanelRow::new("a", 1.0, end)],
                &g,
            );
            let est = IntensityEstimate::new(g.clone(), data.grid().clone(), vec![p]).unwrap();
            assert_abs_diff_eq!(observed_loglik(&est, &data).unwrap(), want, epsilon = 1e-15);
        }

        let g = Arc::new(TransitionGraph::new(3, &[(1, 2), (1, 3), (2, 3)], &[3]).unwrap());
        let data = dataset(
            vec![PanelRow::new("a", 0.0, 0), PanelRow::new("a", 1.0, 2)],
            &g,
        );
        let est = IntensityEstimate::new(g, data.grid().clone(), vec![0.3, 0.2, 0.5]).unwrap();
        assert_abs_diff_eq!(
            observed_loglik(&est, &data).unwrap(),
            0.2_f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn max_iterations_one_is_not_converged() {
        let g = id();
        let data = dataset(
            vec![
                PanelRow::new("a", 0.0, 0),
                PanelRow::new("a", 3.0, 1),
                PanelRow::new("b", 0.0, 0),
                PanelRow::new("b", 1.0, 0),
            ],
            &g,
        );
        let fit = run_em(&data, &EmConfig::default().with_max_iterations(1)).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.stop_reason, StopReason::MaxIter);
        assert_eq!(fit.loglik_trace.len(), 1);
        assert!(matches!(
            fit.require_converged(),
            Err(Error::MaxIterations(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig::default()
            .with_max_iterations(0)
            .validate()
            .is_err());
        assert!(EmConfig::default().with_tolerance(0.0).validate().is_err());
        assert!(EmConfig::default()
            .with_tolerance(f64::NAN)
            .validate()
            .is_err());
    }

    #[test]
    fn enforce_bound_is_exact() {
        for (a, b) in [
            (0.75, 0.5),
            (0.7, 0.3000000000000002),
            (1.0 / 3.0, 2.0 / 3.0 + 1e-15),
        ] {
            assert!(a + b > 1.0);
            let mut est = IntensityEstimate::new(id(), grid(1), vec![a, b, 0.2]).unwrap();
            assert_eq!(enforce_exit_bound(&mut est), 1);
            assert!(est.get(0, 0) + est.get(1, 0) <= 1.0);
            assert_eq!(est.get(2, 0), 0.2);
        }
    }
}
