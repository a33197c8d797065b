//! Scenario-driven panel simulation, true curves and Bias/Var/RMSE scoring.

use crate::error::{Error, Result};
use crate::graph::{ModelFile, TransitionGraph};
use crate::panel::{PanelDataset, PanelRow};
use crate::prodint::{IntensityEstimate, SquareMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

/// Transition-specific hazard on the study time scale.
///
/// The Weibull cumulative hazard is `A(t) = λ t^k`, i.e. density
/// `λ k x^{k-1} exp(-λ x^k)`; the exponential is the case `k = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hazard {
    Exponential { rate: f64 },
    Weibull { rate: f64, shape: f64 },
}

impl Hazard {
    fn rate_shape(&self) -> (f64, f64) {
        match *self {
            Hazard::Exponential { rate } => (rate, 1.0),
            Hazard::Weibull { rate, shape } => (rate, shape),
        }
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        let (rate, shape) = self.rate_shape();
        if t <= 0.0 {
            0.0
        } else {
            rate * t.powf(shape)
        }
    }

    /// Event time of this cause given no event up to `s`: the first `T > s`
    /// with `A(T) - A(s) = E`, `E ~ Exp(1)`.
    pub fn sample_after<R: Rng + ?Sized>(&self, s: f64, rng: &mut R) -> f64 {
        let (rate, shape) = self.rate_shape();
        let e: f64 = rng.sample(Exp1);
        ((self.cumulative(s) + e) / rate).powf(1.0 / shape)
    }

    fn validate(&self) -> Result<()> {
        let (rate, shape) = self.rate_shape();
        if !(rate > 0.0 && rate.is_finite() && shape > 0.0 && shape.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "hazard parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// How visit times are generated for each subject. Every schedule starts at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisitProcess {
    /// Independent gaps `U(lo, hi)`; zero gaps are redrawn.
    UniformGap { lo: f64, hi: f64 },
    /// Visit `j` at `j * gap + U(-jitter, jitter)`.
    FixedGapJitter { gap: f64, jitter: f64 },
}

impl VisitProcess {
    fn validate(&self, horizon: f64) -> Result<()> {
        match *self {
            VisitProcess::UniformGap { lo, hi } => {
                if !(lo >= 0.0 && hi > 0.0 && lo <= hi && hi <= horizon) {
                    return Err(Error::InvalidSpec(format!(
                        "uniform gap needs 0 <= lo <= hi <= horizon with hi > 0, got [{lo}, {hi}]"
                    )));
                }
            }
            VisitProcess::FixedGapJitter { gap, jitter } => {
                if !(gap > 0.0 && jitter >= 0.0 && 2.0 * jitter < gap && gap + jitter <= horizon) {
                    return Err(Error::InvalidSpec(format!(
                        "fixed gap needs 0 <= 2 jitter < gap and gap + jitter <= horizon, got gap {gap}, jitter {jitter}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn times<R: Rng + ?Sized>(&self, horizon: f64, rng: &mut R) -> Vec<f64> {
        let mut times = vec![0.0];
        match *self {
            VisitProcess::UniformGap { lo, hi } => {
                let mut t = 0.0;
                loop {
                    let gap = loop {
                        let g = if lo == hi {
                            lo
                        } else {
                            rng.random_range(lo..hi)
                        };
                        if g > 0.0 {
                            break g;
                        }
                    };
                    t += gap;
                    if t > horizon {
                        break;
                    }
                    times.push(t);
                }
            }
            VisitProcess::FixedGapJitter { gap, jitter } => {
                for j in 1.. {
                    let shift = if jitter > 0.0 {
                        rng.random_range(-jitter..jitter)
                    } else {
                        0.0
                    };
                    let t = j as f64 * gap + shift;
                    if t > horizon {
                        break;
                    }
                    times.push(t);
                }
            }
        }
        times
    }
}

/// A simulation scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub graph: Arc<TransitionGraph>,
    /// One hazard per transition, indexed like the graph's transitions.
    pub hazards: Vec<Hazard>,
    /// Probability of each starting state.
    pub start: Vec<f64>,
    pub visits: VisitProcess,
    pub horizon: f64,
    pub seed: u64,
    /// Drop the visits after the first one that finds the subject absorbed.
    /// By default visits continue to the horizon.
    pub stop_at_absorption: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct HazardEntry {
    from: usize,
    to: usize,
    kind: String,
    rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    #[serde(flatten)]
    model: ModelFile,
    horizon: f64,
    #[serde(default)]
    seed: u64,
    start: Vec<f64>,
    visits: VisitProcess,
    #[serde(default)]
    stop_at_absorption: bool,
    hazard: Vec<HazardEntry>,
}

const MEAN_10_SHAPE_HALF: f64 = 0.447_213_595_499_957_9; // 1/sqrt(5)
const MEAN_20_SHAPE_HALF: f64 = 0.316_227_766_016_837_94; // 1/sqrt(10)

impl ScenarioSpec {
    pub fn new(
        graph: Arc<TransitionGraph>,
        hazards: Vec<Hazard>,
        start: Vec<f64>,
        visits: VisitProcess,
        horizon: f64,
        seed: u64,
    ) -> Result<Self> {
        let spec = Self {
            graph,
            hazards,
            start,
            visits,
            horizon,
            seed,
            stop_at_absorption: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if self.hazards.len() != self.graph.num_transitions() {
            return Err(Error::InvalidSpec(format!(
                "{} hazards for {} transitions",
                self.hazards.len(),
                self.graph.num_transitions()
            )));
        }
        for h in &self.hazards {
            h.validate()?;
        }
        if self.start.len() != self.graph.num_states()
            || self.start.iter().any(|p| !(*p >= 0.0))
            || (self.start.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidSpec(
                "start must give one non-negative probability per state, summing to 1".into(),
            ));
        }
        self.visits.validate(self.horizon)
    }

    /// Built-in scenarios `"1"` to `"5"`, `"6a"` (gaps `U(0, 2.44)`) and
    /// `"6b"` (gaps `U(0, 7.33)`); `"6"` is `"6a"`.
    pub fn builtin(name: &str) -> Result<Self> {
        let id = TransitionGraph::illness_death;
        let exp3 = vec![
            Hazard::Exponential { rate: 0.1 },
            Hazard::Exponential { rate: 0.05 },
            Hazard::Exponential { rate: 0.1 },
        ];
        let gap = VisitProcess::UniformGap { lo: 0.0, hi: 4.4 };
        let from_1 = vec![1.0, 0.0, 0.0];
        let from_12 = vec![0.5, 0.5, 0.0];
        let (graph, hazards, start, visits) = match name {
            "1" => (id(), exp3, from_1, gap),
            "2" => (id(), exp3, from_12, gap),
            "3" => {
                let g = gamma_three_halves() / 10.0;
                let weib = vec![
                    Hazard::Weibull {
                        rate: MEAN_10_SHAPE_HALF,
                        shape: 0.5,
                    },
                    Hazard::Weibull {
                        rate: MEAN_20_SHAPE_HALF,
                        shape: 0.5,
                    },
                    Hazard::Weibull {
                        rate: g * g,
                        shape: 2.0,
                    },
                ];
                (id(), weib, from_1, gap)
            }
            "4" => (
                TransitionGraph::extended_illness_death(&[3, 4])?,
                exp3,
                vec![1.0, 0.0, 0.0, 0.0],
                gap,
            ),
            "5" => (
                id(),
                exp3,
                from_12,
                VisitProcess::FixedGapJitter {
                    gap: 3.0,
                    jitter: 0.1,
                },
            ),
            "6" | "6a" => (
                id(),
                exp3,
                from_12,
                VisitProcess::UniformGap { lo: 0.0, hi: 2.44 },
            ),
            "6b" => (
                id(),
                exp3,
                from_12,
                VisitProcess::UniformGap { lo: 0.0, hi: 7.33 },
            ),
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "unknown built-in scenario '{name}'"
                )))
            }
        };
        Self::new(Arc::new(graph), hazards, start, visits, 15.0, 1)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let graph = Arc::new(file.model.into_graph()?);
        let mut hazards: Vec<Option<Hazard>> = vec![None; graph.num_transitions()];
        for entry in file.hazard {
            let v = entry
                .from
                .checked_sub(1)
                .zip(entry.to.checked_sub(1))
                .and_then(|(g, h)| graph.transition_index(g, h))
                .ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "hazard for {}->{} is not a model transition",
                        entry.from, entry.to
                    ))
                })?;
            let hazard = match (entry.kind.as_str(), entry.shape) {
                ("exponential", None) => Hazard::Exponential { rate: entry.rate },
                ("weibull", Some(shape)) => Hazard::Weibull {
                    rate: entry.rate,
                    shape,
                },
                ("weibull", None) => {
                    return Err(Error::InvalidSpec("weibull hazard needs a shape".into()))
                }
                (kind, _) => {
                    return Err(Error::InvalidSpec(format!("unknown hazard kind '{kind}'")))
                }
            };
            if hazards[v].replace(hazard).is_some() {
                return Err(Error::InvalidSpec(format!(
                    "duplicate hazard for {}->{}",
                    entry.from, entry.to
                )));
            }
        }
        let hazards = hazards
            .into_iter()
            .enumerate()
            .map(|(v, h)| {
                h.ok_or_else(|| {
                    let t = graph.transition(v);
                    Error::InvalidSpec(format!("no hazard for {}->{}", t.from + 1, t.to + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut spec = Self::new(
            graph,
            hazards,
            file.start,
            file.visits,
            file.horizon,
            file.seed,
        )?;
        spec.stop_at_absorption = file.stop_at_absorption;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        let model: ModelFile =
            toml::from_str(&self.graph.to_model_string()).expect("model round trip");
        let hazard = self
            .graph
            .transitions()
            .iter()
            .zip(&self.hazards)
            .map(|(t, h)| {
                let (kind, rate, shape) = match *h {
                    Hazard::Exponential { rate } => ("exponential", rate, None),
                    Hazard::Weibull { rate, shape } => ("weibull", rate, Some(shape)),
                };
                HazardEntry {
                    from: t.from + 1,
                    to: t.to + 1,
                    kind: kind.into(),
                    rate,
                    shape,
                }
            })
            .collect();
        let file = ScenarioFile {
            model,
            horizon: self.horizon,
            seed: self.seed,
            start: self.start.clone(),
            visits: self.visits,
            stop_at_absorption: self.stop_at_absorption,
            hazard,
        };
        toml::to_string(&file).expect("scenario serializes")
    }

    fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (g, p) in self.start.iter().enumerate() {
            acc += p;
            if u < acc {
                return g;
            }
        }
        self.start
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("start distribution has mass")
    }

    /// One continuous-time trajectory up to the horizon as `(entry time, state)`
    /// pairs, starting with `(0, start state)`.
    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(f64, usize)> {
        let mut state = self.sample_start(rng);
        let mut t = 0.0;
        let mut path = vec![(0.0, state)];
        loop {
            let mut next: Option<(f64, usize)> = None;
            for &v in self.graph.outgoing(state) {
                let time = self.hazards[v].sample_after(t, rng);
                if next.is_none_or(|(best, _)| time < best) {
                    next = Some((time, self.graph.transition(v).to));
                }
            }
            match next {
                Some((time, to)) if time <= self.horizon => {
                    t = time;
                    state = to;
                    path.push((t, state));
                }
                _ => break,
            }
        }
        path
    }
}

/// `Γ(1.5) = √π / 2`.
fn gamma_three_halves() -> f64 {
    std::f64::consts::PI.sqrt() / 2.0
}

fn observe(
    spec: &ScenarioSpec,
    id: &str,
    path: &[(f64, usize)],
    visits: &[f64],
    rows: &mut Vec<PanelRow>,
) {
    let graph = &spec.graph;
    let stop = spec.stop_at_absorption;
    let state_at = |t: f64| {
        path.iter()
            .rev()
            .find(|(s, _)| *s <= t)
            .expect("path starts at 0")
            .1
    };
    let mut exact_arrivals = path
        .iter()
        .skip(1)
        .filter(|(_, g)| graph.is_exact(*g))
        .copied()
        .peekable();
    for &v in visits {
        while let Some(&(te, g)) = exact_arrivals.peek() {
            if te >= v {
                break;
            }
            rows.push(PanelRow::new(id, te, g));
            exact_arrivals.next();
            if stop && graph.is_absorbing(g) {
                return;
            }
        }
        let g = state_at(v);
        if exact_arrivals.peek().is_some_and(|&(te, _)| te == v) {
            exact_arrivals.next();
        }
        rows.push(PanelRow::new(id, v, g));
        if stop && graph.is_absorbing(g) {
            return;
        }
    }
    for (te, g) in exact_arrivals {
        rows.push(PanelRow::new(id, te, g));
        if stop && graph.is_absorbing(g) {
            return;
        }
    }
}

/// Simulates replicate `rep` of a panel of `n` subjects. Replicates use
/// independent streams of the same seed.
pub fn simulate_replicate(
    spec: &ScenarioSpec,
    n: usize,
    seed: u64,
    rep: u64,
) -> Result<PanelDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidSpec("need at least one subject".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    let mut rows = Vec::new();
    for i in 1..=n {
        let id = i.to_string();
        let path = spec.sample_path(&mut rng);
        let visits = spec.visits.times(spec.horizon, &mut rng);
        observe(spec, &id, &path, &visits, &mut rows);
    }
    PanelDataset::ingest(rows, &spec.graph)
}

/// Simulates one panel of `n` subjects; identical inputs give identical data.
pub fn simulate_panel(spec: &ScenarioSpec, n: usize, seed: u64) -> Result<PanelDataset> {
    simulate_replicate(spec, n, seed, 0)
}

/// Replicates `0..reps` in parallel.
pub fn simulate_replicates(
    spec: &ScenarioSpec,
    n: usize,
    seed: u64,
    reps: usize,
) -> Result<Vec<PanelDataset>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|rep| simulate_replicate(spec, n, seed, rep))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// `A_gh(t) - A_gh(s)`.
    CumIntensity,
    /// `P_gh(s, t)`.
    TransProb,
}

/// A curve to compare against the truth. States are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub kind: TargetKind,
    pub from: usize,
    pub to: usize,
    pub s: f64,
}

impl Target {
    pub fn cumulative(from: usize, to: usize) -> Self {
        Self {
            kind: TargetKind::CumIntensity,
            from,
            to,
            s: 0.0,
        }
    }

    pub fn probability(from: usize, to: usize, s: f64) -> Self {
        Self {
            kind: TargetKind::TransProb,
            from,
            to,
            s,
        }
    }

    /// Parses `kind:g:h[:s]` with kind `cumintensity` or `transprob`.
    pub fn parse(token: &str, graph: &TransitionGraph) -> Result<Self> {
        let parts: Vec<&str> = token.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::Parse(format!(
                "target '{token}' is not kind:from:to[:s]"
            )));
        }
        let kind = match parts[0] {
            "cumintensity" | "A" => TargetKind::CumIntensity,
            "transprob" | "P" => TargetKind::TransProb,
            k => return Err(Error::Parse(format!("unknown target kind '{k}'"))),
        };
        let from = graph.parse_state(parts[1])?;
        let to = graph.parse_state(parts[2])?;
        let s = match parts.get(3) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Parse(format!("bad start time '{s}'")))?,
            None => 0.0,
        };
        let target = Self { kind, from, to, s };
        target.check(graph)?;
        Ok(target)
    }

    fn check(&self, graph: &TransitionGraph) -> Result<()> {
        let h = graph.num_states();
        if self.from >= h || self.to >= h {
            return Err(Error::InvalidConfig(format!(
                "target {self} references an unknown state"
            )));
        }
        if self.kind == TargetKind::CumIntensity
            && graph.transition_index(self.from, self.to).is_none()
        {
            return Err(Error::InvalidConfig(format!(
                "target {self} is not an allowed transition"
            )));
        }
        if !(self.s >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "target {self} has a negative start time"
            )));
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            TargetKind::CumIntensity => "cumintensity",
            TargetKind::TransProb => "transprob",
        }
    }

    /// Evaluates the target on a fitted step-function estimate.
    pub fn fitted(&self, est: &IntensityEstimate, times: &[f64]) -> Result<Vec<f64>> {
        self.check(est.graph())?;
        match self.kind {
            TargetKind::CumIntensity => {
                let v = est
                    .graph()
                    .transition_index(self.from, self.to)
                    .expect("checked");
                let base = est.cumulative(v, self.s);
                Ok(times
                    .iter()
                    .map(|&t| {
                        if t <= self.s {
                            0.0
                        } else {
                            est.cumulative(v, t) - base
                        }
                    })
                    .collect())
            }
            TargetKind::TransProb => times
                .iter()
                .map(|&t| {
                    if t <= self.s {
                        Ok(if self.from == self.to { 1.0 } else { 0.0 })
                    } else {
                        Ok(est.transition_matrix(self.s, t)?.get(self.from, self.to))
                    }
                })
                .collect(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind_name(), self.from + 1, self.to + 1)?;
        if self.s != 0.0 {
            write!(f, ":{}", self.s)?;
        }
        Ok(())
    }
}

/// The evaluation grid `0, 0.1, ..., 15`.
pub fn default_tgrid() -> Vec<f64> {
    (0..=150).map(|i| i as f64 / 10.0).collect()
}

/// True curves of a scenario on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueCurves {
    pub targets: Vec<Target>,
    pub times: Vec<f64>,
    /// `values[target][time]`.
    pub values: Vec<Vec<f64>>,
}

/// `exp(Q)` for a small generator increment by Taylor series.
fn expm_small(q: &SquareMatrix) -> SquareMatrix {
    let n = q.dim();
    let mut result = SquareMatrix::identity(n);
    let mut term = SquareMatrix::identity(n);
    for k in 1..30 {
        term = term.matmul(q);
        let scale = 1.0 / k as f64;
        let mut largest = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let v = term.get(i, j) * scale;
                term.set(i, j, v);
                result.set(i, j, result.get(i, j) + v);
                largest = largest.max(v.abs());
            }
        }
        if largest < 1e-18 {
            break;
        }
    }
    result
}

/// Relative step of the fine grid used for true transition probabilities.
pub const TRUTH_STEP_FRACTION: f64 = 1e-4;

/// `P(s, t)` of the true model for every `t` in `times` (`t <= s` gives the identity).
pub fn true_transition_matrices(
    spec: &ScenarioSpec,
    s: f64,
    times: &[f64],
    step: f64,
) -> Vec<SquareMatrix> {
    let h = spec.graph.num_states();
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = vec![SquareMatrix::identity(h); times.len()];
    let mut p = SquareMatrix::identity(h);
    let mut u = s;
    for idx in order {
        let t = times[idx];
        while u < t {
            let next = (u + step).min(t);
            let mut q = SquareMatrix::zeros(h);
            for (v, tr) in spec.graph.transitions().iter().enumerate() {
                let inc = spec.hazards[v].cumulative(next) - spec.hazards[v].cumulative(u);
                q.set(tr.from, tr.to, inc);
                q.set(tr.from, tr.from, q.get(tr.from, tr.from) - inc);
            }
            p = p.matmul(&expm_small(&q));
            u = next;
        }
        if t > s {
            out[idx] = p.clone();
        }
    }
    out
}

/// True cumulative intensities (closed form) and transition probabilities
/// (fine-grid product integration) for each target.
pub fn true_values(spec: &ScenarioSpec, targets: &[Target], times: &[f64]) -> Result<TrueCurves> {
    let step = spec.horizon * TRUTH_STEP_FRACTION;
    let mut values = Vec::with_capacity(targets.len());
    let mut cache: Vec<(f64, Vec<SquareMatrix>)> = Vec::new();
    for target in targets {
        target.check(&spec.graph)?;
        let curve = match target.kind {
            TargetKind::CumIntensity => {
                let v = spec
                    .graph
                    .transition_index(target.from, target.to)
                    .expect("checked");
                let hz = spec.hazards[v];
                times
                    .iter()
                    .map(|&t| {
                        if t <= target.s {
                            0.0
                        } else {
                            hz.cumulative(t) - hz.cumulative(target.s)
                        }
                    })
                    .collect()
            }
            TargetKind::TransProb => {
                let pos = match cache.iter().position(|(s, _)| *s == target.s) {
                    Some(p) => p,
                    None => {
                        cache.push((
                            target.s,
                            true_transition_matrices(spec, target.s, times, step),
                        ));
                        cache.len() - 1
                    }
                };
                cache[pos]
                    .1
                    .iter()
                    .map(|m| m.get(target.from, target.to))
                    .collect()
            }
        };
        values.push(curve);
    }
    Ok(TrueCurves {
        targets: targets.to_vec(),
        times: times.to_vec(),
        values,
    })
}

/// Bias, variance and RMSE of replicate curves against the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSeries {
    pub target: Target,
    pub times: Vec<f64>,
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub rmse: Vec<f64>,
    pub replicates: usize,
}

/// Scores replicate curves: `bias = mean(Â - A)`, variance of `Â` with
/// divisor `N - 1`, `rmse = sqrt(variance + bias²)`.
pub fn score(
    target: Target,
    times: &[f64],
    estimates: &[Vec<f64>],
    truth: &[f64],
) -> Result<MetricsSeries> {
    if estimates.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "scoring needs at least 2 replicates, got {}",
            estimates.len()
        )));
    }
    if truth.len() != times.len() || estimates.iter().any(|e| e.len() != times.len()) {
        return Err(Error::ShapeMismatch(
            "replicate curves and truth must share the time grid".into(),
        ));
    }
    let n = estimates.len() as f64;
    let mut bias = Vec::with_capacity(times.len());
    let mut variance = Vec::with_capacity(times.len());
    let mut rmse = Vec::with_capacity(times.len());
    for j in 0..times.len() {
        let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / n;
        let b = mean - truth[j];
        let var = estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        bias.push(b);
        variance.push(var);
        rmse.push((var + b * b).sqrt());
    }
    Ok(MetricsSeries {
        target,
        times: times.to_vec(),
        bias,
        variance,
        rmse,
        replicates: estimates.len(),
    })
}

impl MetricsSeries {
    /// Writes `target,from,to,t,bias,variance,rmse` rows for several series.
    pub fn write_csv<W: Write>(series: &[MetricsSeries], writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["target", "from", "to", "t", "bias", "variance", "rmse"])?;
        for m in series {
            for j in 0..m.times.len() {
                wtr.write_record([
                    m.target.kind_name().to_string(),
                    (m.target.from + 1).to_string(),
                    (m.target.to + 1).to_string(),
                    m.times[j].to_string(),
                    m.bias[j].to_string(),
                    m.variance[j].to_string(),
                    m.rmse[j].to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}
