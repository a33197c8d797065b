//! Product-integral kernel.
//!
//! An [`IntensityEstimate`] holds the jumps `α_gh^k` of the cumulative
//! intensities at the grid points. Each bin contributes the row-stochastic
//! matrix `I + dA(τ_k)` (off-diagonal `α_gh^k`, diagonal `1 - Σ_h α_gh^k`),
//! and transition probabilities are ordered products of these matrices.
//!
//! The E-step never forms `P(s, t)` explicitly: [`IntervalCache`] runs one
//! forward and one backward sweep over the bins of an observation interval.

use crate::error::{Error, Result};
use crate::graph::TransitionGraph;
use crate::panel::{BinGrid, Interval};
use std::io::{Read, Write};
use std::sync::Arc;

/// Row sums of `α` may exceed 1 by at most this much before an estimate is
/// treated as infeasible.
pub const FEASIBILITY_SLACK: f64 = 1e-12;

/// Interval probabilities below this are treated as impossible.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

/// Dense row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matmul(&self, other: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, other.n);
        let n = self.n;
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn max_abs_diff(&self, other: &SquareMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `I + dA(τ_k)` for one bin.
pub type BinMatrix = SquareMatrix;

/// Jumps of the cumulative intensities on a bin grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityEstimate {
    graph: Arc<TransitionGraph>,
    grid: Arc<BinGrid>,
    /// `alpha[bin * V + v]`.
    alpha: Vec<f64>,
}

impl IntensityEstimate {
    /// Wraps a bin-major jump grid (`alpha[bin * V + v]`). Entries must be
    /// finite and non-negative; feasibility is checked separately.
    pub fn new(graph: Arc<TransitionGraph>, grid: Arc<BinGrid>, alpha: Vec<f64>) -> Result<Self> {
        let expected = grid.num_bins() * graph.num_transitions();
        if alpha.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "jump grid has {} entries, expected {}",
                alpha.len(),
                expected
            )));
        }
        if let Some(x) = alpha.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "jump {x} is negative or not finite"
            )));
        }
        Ok(Self { graph, grid, alpha })
    }

    pub fn zeros(graph: Arc<TransitionGraph>, grid: Arc<BinGrid>) -> Self {
        let alpha = vec![0.0; grid.num_bins() * graph.num_transitions()];
        Self { graph, grid, alpha }
    }

    /// The default starting point `α = 1/K` on every allowed transition.
    ///
    /// When a state has at least `K` successors, `1/K` would leave no mass
    /// for staying; such rows use `1/(out-degree + 1)` instead.
    pub fn uniform(graph: Arc<TransitionGraph>, grid: Arc<BinGrid>) -> Self {
        let k = grid.num_bins();
        let nv = graph.num_transitions();
        let mut alpha = vec![0.0; k * nv];
        let base = 1.0 / k as f64;
        for v in 0..nv {
            let deg = graph.outgoing(graph.transition(v).from).len();
            let value = base.min(1.0 / (deg as f64 + 1.0));
            for b in 0..k {
                alpha[b * nv + v] = value;
            }
        }
        Self { graph, grid, alpha }
    }

    /// A start that puts 90% of every transition's total jump mass of 1 in
    /// the first `floor(K/10)` bins and spreads the rest over the others.
    pub fn front_loaded(graph: Arc<TransitionGraph>, grid: Arc<BinGrid>) -> Result<Self> {
        let k = grid.num_bins();
        let head = k / 10;
        if head == 0 || head == k {
            return Err(Error::InvalidConfig(format!(
                "front-loaded start needs at least 10 bins and a non-empty tail (K = {k})"
            )));
        }
        let nv = graph.num_transitions();
        let mut alpha = vec![0.0; k * nv];
        let early = 0.9 / head as f64;
        let late = 0.1 / (k - head) as f64;
        for b in 0..k {
            let value = if b < head { early } else { late };
            for v in 0..nv {
                alpha[b * nv + v] = value;
            }
        }
        let est = Self { graph, grid, alpha };
        est.check_feasible()?;
        Ok(est)
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

    pub fn num_transitions(&self) -> usize {
        self.graph.num_transitions()
    }

    /// Jump of transition `v` in 0-based bin `bin`.
    pub fn get(&self, v: usize, bin: usize) -> f64 {
        self.alpha[bin * self.num_transitions() + v]
    }

    pub fn set(&mut self, v: usize, bin: usize, value: f64) {
        let nv = self.num_transitions();
        self.alpha[bin * nv + v] = value;
    }

    /// Jumps of all transitions in one bin, indexed by transition.
    pub fn bin_slice(&self, bin: usize) -> &[f64] {
        let nv = self.num_transitions();
        &self.alpha[bin * nv..(bin + 1) * nv]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    /// Total jump out of state `g` in `bin`.
    pub fn exit_sum(&self, g: usize, bin: usize) -> f64 {
        let row = self.bin_slice(bin);
        self.graph.outgoing(g).iter().map(|&v| row[v]).sum()
    }

    /// Verifies `α >= 0` and `Σ_h α_gh^k <= 1` (up to [`FEASIBILITY_SLACK`]).
    pub fn check_feasible(&self) -> Result<()> {
        for bin in 0..self.num_bins() {
            for g in 0..self.graph.num_states() {
                let sum = self.exit_sum(g, bin);
                if sum > 1.0 + FEASIBILITY_SLACK {
                    return Err(Error::InfeasibleEstimate {
                        state: g + 1,
                        bin: bin + 1,
                        sum,
                    });
                }
            }
        }
        if self.alpha.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidConfig("negative jump".into()));
        }
        Ok(())
    }

    pub fn is_feasible(&self) -> bool {
        self.check_feasible().is_ok()
    }

    /// Largest absolute entry-wise difference to another estimate on the same grid.
    pub fn max_abs_diff(&self, other: &IntensityEstimate) -> f64 {
        self.alpha
            .iter()
            .zip(&other.alpha)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `I + dA(τ_k)` for 0-based `bin`.
    pub fn bin_matrix(&self, bin: usize) -> Result<BinMatrix> {
        let h = self.graph.num_states();
        let mut m = SquareMatrix::identity(h);
        let row = self.bin_slice(bin);
        for g in 0..h {
            let mut sum = 0.0;
            for &v in self.graph.outgoing(g) {
                let t = self.graph.transition(v);
                m.set(g, t.to, row[v]);
                sum += row[v];
            }
            if sum > 1.0 + FEASIBILITY_SLACK {
                return Err(Error::InfeasibleEstimate {
                    state: g + 1,
                    bin: bin + 1,
                    sum,
                });
            }
            m.set(g, g, 1.0 - sum);
        }
        Ok(m)
    }

    /// `P(s, t)`: ordered product of bin matrices over bins with `s < τ_k <= t`.
    pub fn transition_matrix(&self, s: f64, t: f64) -> Result<SquareMatrix> {
        if !(s >= 0.0 && s <= t) {
            return Err(Error::InvalidConfig(format!(
                "transition matrix needs 0 <= s <= t, got s={s}, t={t}"
            )));
        }
        let first = self.grid.points_up_to(s);
        let last = self.grid.points_up_to(t);
        let prop = Propagator::strict(self)?;
        let h = self.graph.num_states();
        let mut p = SquareMatrix::identity(h);
        let mut tmp = vec![0.0; h];
        for g in 0..h {
            let mut row = p.row(g).to_vec();
            for bin in first..last {
                prop.forward(bin, &row, &mut tmp);
                std::mem::swap(&mut row, &mut tmp);
            }
            for (j, x) in row.into_iter().enumerate() {
                p.set(g, j, x);
            }
        }
        Ok(p)
    }

    /// Cumulative intensity `A_gh(t) = Σ_{τ_k <= t} α_gh^k`.
    pub fn cumulative(&self, v: usize, t: f64) -> f64 {
        let last = self.grid.points_up_to(t);
        (0..last).map(|bin| self.get(v, bin)).sum()
    }

    /// Writes `from,to,bin,tau,alpha`, ordered by transition then bin.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["from", "to", "bin", "tau", "alpha"])?;
        for (v, t) in self.graph.transitions().iter().enumerate() {
            for bin in 0..self.num_bins() {
                wtr.write_record([
                    (t.from + 1).to_string(),
                    (t.to + 1).to_string(),
                    (bin + 1).to_string(),
                    self.grid.taus()[bin].to_string(),
                    self.get(v, bin).to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the `from,to,bin,tau,alpha` export. The bin grid is rebuilt from
    /// the `tau` column; every allowed transition must be present for every bin.
    pub fn read_csv<R: Read>(reader: R, graph: Arc<TransitionGraph>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["from", "to", "bin", "tau", "alpha"] {
            return Err(Error::Parse(
                "intensity header must be 'from,to,bin,tau,alpha'".into(),
            ));
        }
        let parse_err = |what: &str, s: &str| Error::Parse(format!("bad {what} '{s}'"));
        let mut rows = Vec::new();
        let mut taus: Vec<Option<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let g = graph.parse_state(&rec[0])?;
            let h = graph.parse_state(&rec[1])?;
            let bin: usize = rec[2].parse().map_err(|_| parse_err("bin", &rec[2]))?;
            let tau: f64 = rec[3].parse().map_err(|_| parse_err("tau", &rec[3]))?;
            let alpha: f64 = rec[4].parse().map_err(|_| parse_err("alpha", &rec[4]))?;
            if bin == 0 {
                return Err(parse_err("bin", &rec[2]));
            }
            let v = graph.transition_index(g, h).ok_or_else(|| {
                Error::Parse(format!(
                    "transition {}->{} is not in the model",
                    g + 1,
                    h + 1
                ))
            })?;
            if taus.len() < bin {
                taus.resize(bin, None);
            }
            match taus[bin - 1] {
                Some(t) if t != tau => {
                    return Err(Error::Parse(format!("bin {bin} has conflicting times")))
                }
                _ => taus[bin - 1] = Some(tau),
            }
            rows.push((v, bin - 1, alpha));
        }
        let taus: Vec<f64> = taus
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::Parse(format!("bin {} missing", i + 1))))
            .collect::<Result<_>>()?;
        let grid = Arc::new(BinGrid::from_taus(taus)?);
        let nv = graph.num_transitions();
        let mut alpha = vec![f64::NAN; grid.num_bins() * nv];
        for (v, bin, a) in rows {
            alpha[bin * nv + v] = a;
        }
        if alpha.iter().any(|a| a.is_nan()) {
            return Err(Error::Parse(
                "intensity file does not cover every transition and bin".into(),
            ));
        }
        Self::new(graph, grid, alpha)
    }

    /// Writes `from,to,s,t,prob` rows of `P(s, t)` for each `t` in `times`,
    /// restricted to the given starting states.
    pub fn write_probabilities_csv<W: Write>(
        &self,
        writer: W,
        from_states: &[usize],
        s: f64,
        times: &[f64],
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["from", "to", "s", "t", "prob"])?;
        for &t in times {
            let p = self.transition_matrix(s, t)?;
            for &g in from_states {
                for h in 0..self.graph.num_states() {
                    wtr.write_record([
                        (g + 1).to_string(),
                        (h + 1).to_string(),
                        s.to_string(),
                        t.to_string(),
                        p.get(g, h).to_string(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Bin-wise vector propagation through `I + dA(τ_k)`.
///
/// The strict constructor rejects infeasible estimates. The clamping
/// constructor replaces negative staying probabilities by 0 and counts how
/// many (state, bin) cells needed it; only the latent-Poisson driver uses it.
#[derive(Debug)]
pub struct Propagator<'a> {
    est: &'a IntensityEstimate,
    /// `stay[bin * H + g] = 1 - Σ_h α_gh^bin`.
    stay: Vec<f64>,
    clamped: usize,
}

impl<'a> Propagator<'a> {
    pub fn strict(est: &'a IntensityEstimate) -> Result<Self> {
        Self::build(est, false)
    }

    pub fn clamping(est: &'a IntensityEstimate) -> Self {
        Self::build(est, true).expect("clamping never fails")
    }

    fn build(est: &'a IntensityEstimate, clamp: bool) -> Result<Self> {
        let h = est.graph.num_states();
        let k = est.num_bins();
        let mut stay = vec![1.0; k * h];
        let mut clamped = 0;
        for bin in 0..k {
            for g in 0..h {
                let sum = est.exit_sum(g, bin);
                if sum > 1.0 + FEASIBILITY_SLACK {
                    if !clamp {
                        return Err(Error::InfeasibleEstimate {
                            state: g + 1,
                            bin: bin + 1,
                            sum,
                        });
                    }
                    clamped += 1;
                }
                stay[bin * h + g] = (1.0 - sum).max(0.0);
            }
        }
        Ok(Self { est, stay, clamped })
    }

    pub fn estimate(&self) -> &IntensityEstimate {
        self.est
    }

    /// Number of (state, bin) cells whose staying probability was clamped.
    pub fn clamped_cells(&self) -> usize {
        self.clamped
    }

    pub fn stay(&self, g: usize, bin: usize) -> f64 {
        self.stay[bin * self.est.graph.num_states() + g]
    }

    /// Row vector times bin matrix: `out = row · (I + dA)`.
    pub fn forward(&self, bin: usize, row: &[f64], out: &mut [f64]) {
        let h = row.len();
        let stay = &self.stay[bin * h..(bin + 1) * h];
        for g in 0..h {
            out[g] = row[g] * stay[g];
        }
        let alpha = self.est.bin_slice(bin);
        for (v, t) in self.est.graph.transitions().iter().enumerate() {
            out[t.to] += row[t.from] * alpha[v];
        }
    }

    /// Bin matrix times column vector: `out = (I + dA) · col`.
    pub fn backward(&self, bin: usize, col: &[f64], out: &mut [f64]) {
        let h = col.len();
        let stay = &self.stay[bin * h..(bin + 1) * h];
        for g in 0..h {
            out[g] = stay[g] * col[g];
        }
        let alpha = self.est.bin_slice(bin);
        for (v, t) in self.est.graph.transitions().iter().enumerate() {
            out[t.from] += alpha[v] * col[t.to];
        }
    }
}

/// Forward and backward vectors over one observation interval `(l, r]`.
///
/// For grid points `p` from `l` to `r`, `forward(p)` is row `a` of
/// `P(l, τ_p)` and `backward(p)` is the probability of the observation at
/// `r` given the state at `τ_p`. For an ordinary interval that is column `b`
/// of `P(τ_p, r)`; for an exact arrival into `b` the last step only admits a
/// direct jump into `b`. In both cases `forward(p) · backward(p)` equals the
/// interval likelihood for every `p < r`.
#[derive(Debug, Clone, Default)]
pub struct IntervalCache {
    h: usize,
    start: usize,
    end: usize,
    forward: Vec<f64>,
    backward: Vec<f64>,
    denominator: f64,
}

impl IntervalCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fills the cache for `interval`, reusing the buffers.
    pub fn fill(
        &mut self,
        prop: &Propagator<'_>,
        interval: &Interval,
        subject: &str,
    ) -> Result<()> {
        let h = prop.est.graph.num_states();
        let len = interval.end - interval.start;
        debug_assert!(len >= 1);
        self.h = h;
        self.start = interval.start;
        self.end = interval.end;
        self.forward.clear();
        self.forward.resize((len + 1) * h, 0.0);
        self.backward.clear();
        self.backward.resize((len + 1) * h, 0.0);

        self.forward[interval.from] = 1.0;
        for j in 0..len {
            let (done, rest) = self.forward.split_at_mut((j + 1) * h);
            prop.forward(interval.start + j, &done[j * h..], &mut rest[..h]);
        }

        self.backward[len * h + interval.to] = 1.0;
        let mut j = len;
        if interval.exact_arrival {
            // Arrival exactly at r: the subject sits in a predecessor of b
            // just before r and jumps in the last bin.
            let bin = interval.end - 1;
            let alpha = prop.est.bin_slice(bin);
            let col = &mut self.backward[(len - 1) * h..len * h];
            for &v in prop.est.graph.incoming(interval.to) {
                col[prop.est.graph.transition(v).from] = alpha[v];
            }
            j -= 1;
        }
        while j > 0 {
            let (head, tail) = self.backward.split_at_mut(j * h);
            prop.backward(interval.start + j - 1, &tail[..h], &mut head[(j - 1) * h..]);
            j -= 1;
        }

        self.denominator = self.backward[interval.from];
        if !(self.denominator >= PROBABILITY_FLOOR) {
            let grid = prop.est.grid();
            return Err(Error::ZeroDenominator {
                subject: subject.to_string(),
                from_time: grid.point_time(interval.start),
                to_time: grid.point_time(interval.end),
                value: self.denominator,
            });
        }
        Ok(())
    }

    /// Builds a fresh cache for one interval.
    pub fn build(prop: &Propagator<'_>, interval: &Interval, subject: &str) -> Result<Self> {
        let mut c = Self::new();
        c.fill(prop, interval, subject)?;
        Ok(c)
    }

    /// Forward row vector at grid point `p`.
    pub fn forward(&self, p: usize) -> &[f64] {
        let j = p - self.start;
        &self.forward[j * self.h..(j + 1) * self.h]
    }

    /// Backward column vector at grid point `p`.
    pub fn backward(&self, p: usize) -> &[f64] {
        let j = p - self.start;
        &self.backward[j * self.h..(j + 1) * self.h]
    }

    /// Likelihood of the interval's right observation given its left one.
    pub fn denominator(&self) -> f64 {
        self.denominator
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }
}
