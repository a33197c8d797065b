//! Panel observations and the bin grid.
//!
//! Subjects are visited at their own times; the union of all visit times
//! (excluding 0) forms the grid `0 = τ_0 < τ_1 < ... < τ_K`. Bin `b`
//! (0-based) is the interval `(τ_b, τ_{b+1}]`. Every visit time sits exactly
//! on a grid point, so each subject's observation interval `(l, r]` covers a
//! contiguous run of bins.
//!
//! Visits are assumed to follow a conditionally independent visit process;
//! nothing here can check that.

use crate::error::{Error, Result};
use crate::graph::TransitionGraph;
use std::collections::HashMap;
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    /// 0-based state.
    pub state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// Strictly increasing in time.
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    subjects: Vec<SubjectRecord>,
}

/// One input row: subject id, visit time and 0-based state.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub id: String,
    pub time: f64,
    pub state: usize,
}

impl PanelRow {
    pub fn new(id: impl Into<String>, time: f64, state: usize) -> Self {
        Self {
            id: id.into(),
            time,
            state,
        }
    }
}

impl PanelDataset {
    /// Groups rows by subject, orders them in time and validates each
    /// subject's sequence against the graph.
    ///
    /// Subjects keep the order of their first row. Identical duplicate rows
    /// are merged.
    pub fn ingest<I>(rows: I, graph: &TransitionGraph) -> Result<Self>
    where
        I: IntoIterator<Item = PanelRow>,
    {
        let mut order: Vec<String> = Vec::new();
        let mut by_id: HashMap<String, Vec<Observation>> = HashMap::new();
        for row in rows {
            if !row.time.is_finite() || row.time < 0.0 {
                return Err(Error::InvalidTime {
                    subject: row.id,
                    time: row.time,
                });
            }
            if row.state >= graph.num_states() {
                return Err(Error::UnknownState((row.state + 1).to_string()));
            }
            let entry = by_id.entry(row.id.clone()).or_insert_with(|| {
                order.push(row.id.clone());
                Vec::new()
            });
            entry.push(Observation {
                time: row.time,
                state: row.state,
            });
        }
        if order.is_empty() {
            return Err(Error::EmptyDataset);
        }

        let mut subjects = Vec::with_capacity(order.len());
        let mut singles = Vec::new();
        for id in order {
            let mut obs = by_id.remove(&id).expect("grouped id");
            obs.sort_by(|a, b| a.time.total_cmp(&b.time));
            let mut dedup: Vec<Observation> = Vec::with_capacity(obs.len());
            for o in obs {
                match dedup.last() {
                    Some(prev) if prev.time == o.time => {
                        if prev.state != o.state {
                            return Err(Error::DuplicateTime {
                                subject: id,
                                time: o.time,
                                first: prev.state + 1,
                                second: o.state + 1,
                            });
                        }
                    }
                    _ => dedup.push(o),
                }
            }
            if dedup.len() < 2 {
                singles.push(id);
                continue;
            }
            let states: Vec<usize> = dedup.iter().map(|o| o.state).collect();
            let times: Vec<f64> = dedup.iter().map(|o| o.time).collect();
            graph.check_sequence(&id, &states, &times)?;
            subjects.push(SubjectRecord {
                id,
                observations: dedup,
            });
        }
        if !singles.is_empty() {
            return Err(Error::SingleObservation(singles));
        }
        Ok(Self { subjects })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn num_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.observations.len()).sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = PanelRow> + '_ {
        self.subjects.iter().flat_map(|s| {
            s.observations
                .iter()
                .map(move |o| PanelRow::new(s.id.clone(), o.time, o.state))
        })
    }

    /// Reads `id,time,state` delimited text. States may be 1-based numbers
    /// or labels from the model.
    pub fn read_csv<R: Read>(reader: R, graph: &TransitionGraph) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols != ["id", "time", "state"] {
            return Err(Error::Parse(format!(
                "panel header must be 'id,time,state', found '{}'",
                cols.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = rec[0].to_string();
            let time: f64 = rec[1]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad time '{}'", line + 2, &rec[1])))?;
            let state = graph.parse_state(&rec[2])?;
            rows.push(PanelRow::new(id, time, state));
        }
        Self::ingest(rows, graph)
    }

    /// Writes the `id,time,state` format with 1-based state numbers.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["id", "time", "state"])?;
        for row in self.rows() {
            wtr.write_record([
                row.id.as_str(),
                &row.time.to_string(),
                &(row.state + 1).to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Sorted unique positive observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    taus: Vec<f64>,
}

impl BinGrid {
    pub fn from_dataset(dataset: &PanelDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut taus: Vec<f64> = dataset
            .subjects()
            .iter()
            .flat_map(|s| s.observations.iter().map(|o| o.time))
            .filter(|&t| t > 0.0)
            .collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let grid = Self { taus };
        log::debug!(
            "bin grid: K = {}, max bin width = {}",
            grid.num_bins(),
            grid.max_gap()
        );
        Ok(grid)
    }

    /// Builds a grid from explicit positive, strictly increasing times.
    pub fn from_taus(taus: Vec<f64>) -> Result<Self> {
        let ok =
            taus.iter().all(|t| t.is_finite() && *t > 0.0) && taus.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidConfig(
                "grid times must be positive and strictly increasing".into(),
            ));
        }
        Ok(Self { taus })
    }

    /// Number of bins `K`.
    pub fn num_bins(&self) -> usize {
        self.taus.len()
    }

    /// `τ_1 .. τ_K`.
    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// Time of grid point `p` (`p = 0` is time 0).
    pub fn point_time(&self, p: usize) -> f64 {
        if p == 0 {
            0.0
        } else {
            self.taus[p - 1]
        }
    }

    /// Grid point index of an exact observation time.
    pub fn point_of(&self, t: f64) -> Option<usize> {
        if t == 0.0 {
            return Some(0);
        }
        self.taus
            .binary_search_by(|x| x.total_cmp(&t))
            .ok()
            .map(|i| i + 1)
    }

    /// Number of grid points `p >= 1` with `τ_p <= t`.
    pub fn points_up_to(&self, t: f64) -> usize {
        self.taus.partition_point(|&x| x <= t)
    }

    /// Largest bin width `max_k |τ_k - τ_{k-1}|`.
    pub fn max_gap(&self) -> f64 {
        let mut prev = 0.0;
        let mut gap = 0.0_f64;
        for &t in &self.taus {
            gap = gap.max(t - prev);
            prev = t;
        }
        gap
    }
}

/// The observation interval of a subject that brackets a given bin.
///
/// `l` is the subject's largest visit time at or before the bin start and
/// `r` the smallest at or after the bin end; `a`/`b` are the states seen
/// there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectBinContext {
    pub l: f64,
    pub r: f64,
    pub a: usize,
    pub b: usize,
    /// Grid point of `l`.
    pub l_point: usize,
    /// Grid point of `r` (`τ_{k_r} = r`).
    pub r_point: usize,
}

/// Bracketing context of subject `i` for 0-based bin `bin`, or `None` when
/// the subject is not under observation across the whole bin.
pub fn subject_bin_context(
    dataset: &PanelDataset,
    grid: &BinGrid,
    subject: usize,
    bin: usize,
) -> Option<SubjectBinContext> {
    let obs = &dataset.subjects()[subject].observations;
    let start = grid.point_time(bin);
    let end = grid.point_time(bin + 1);
    let left = obs.iter().rposition(|o| o.time <= start)?;
    let right = obs.iter().position(|o| o.time >= end)?;
    let (lo, ro) = (obs[left], obs[right]);
    Some(SubjectBinContext {
        l: lo.time,
        r: ro.time,
        a: lo.state,
        b: ro.state,
        l_point: grid.point_of(lo.time).expect("visit time on grid"),
        r_point: grid.point_of(ro.time).expect("visit time on grid"),
    })
}

/// One observation interval of a subject, in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub subject: usize,
    /// Grid point of the left visit.
    pub start: usize,
    /// Grid point of the right visit; bins `start..end` are covered.
    pub end: usize,
    pub from: usize,
    pub to: usize,
    /// The right visit records the exact entry time into an exact state.
    pub exact_arrival: bool,
}

/// Per-subject observation intervals on a fixed grid, shared by every
/// estimator pass over the data.
#[derive(Debug, Clone)]
pub struct IntervalIndex {
    per_subject: Vec<Vec<Interval>>,
    at_risk: Vec<usize>,
}

impl IntervalIndex {
    pub fn new(dataset: &PanelDataset, grid: &BinGrid, graph: &TransitionGraph) -> Result<Self> {
        let k = grid.num_bins();
        let mut at_risk = vec![0usize; k];
        let mut per_subject = Vec::with_capacity(dataset.len());
        for (i, s) in dataset.subjects().iter().enumerate() {
            let mut points = Vec::with_capacity(s.observations.len());
            for o in &s.observations {
                let p = grid.point_of(o.time).ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "subject {}: time {} is not on the bin grid",
                        s.id, o.time
                    ))
                })?;
                points.push(p);
            }
            let first = points[0];
            let last = *points.last().expect("two observations");
            for count in &mut at_risk[first..last] {
                *count += 1;
            }
            let intervals = s
                .observations
                .windows(2)
                .zip(points.windows(2))
                .map(|(o, p)| Interval {
                    subject: i,
                    start: p[0],
                    end: p[1],
                    from: o[0].state,
                    to: o[1].state,
                    exact_arrival: graph.is_exact(o[1].state) && o[0].state != o[1].state,
                })
                .collect();
            per_subject.push(intervals);
        }
        Ok(Self {
            per_subject,
            at_risk,
        })
    }

    pub fn subject(&self, i: usize) -> &[Interval] {
        &self.per_subject[i]
    }

    pub fn num_subjects(&self) -> usize {
        self.per_subject.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interval> {
        self.per_subject.iter().flatten()
    }

    /// Subjects under observation across each bin.
    pub fn at_risk(&self) -> &[usize] {
        &self.at_risk
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id_graph() -> TransitionGraph {
        TransitionGraph::illness_death()
    }

    #[test]
    fn ingest_minimal() {
        let rows = vec![
            PanelRow::new("A", 0.0, 0),
            PanelRow::new("A", 5.0, 2),
            PanelRow::new("A", 2.0, 0),
        ];
        let d = PanelDataset::ingest(rows, &id_graph()).unwrap();
        assert_eq!(d.len(), 1);
        let times: Vec<f64> = d.subjects()[0]
            .observations
            .iter()
            .map(|o| o.time)
            .collect();
        assert_eq!(times, vec![0.0, 2.0, 5.0]);
    }

    #[test]
    fn duplicate_time_rejected() {
        let rows = vec![PanelRow::new("A", 0.0, 0), PanelRow::new("A", 0.0, 1)];
        assert!(matches!(
            PanelDataset::ingest(rows, &id_graph()),
            Err(Error::DuplicateTime { .. })
        ));
    }

    #[test]
    fn single_observation_lists_ids() {
        let rows = vec![
            PanelRow::new("A", 0.0, 0),
            PanelRow::new("B", 0.0, 0),
            PanelRow::new("B", 1.0, 0),
            PanelRow::new("C", 3.0, 1),
        ];
        match PanelDataset::ingest(rows, &id_graph()) {
            Err(Error::SingleObservation(ids)) => assert_eq!(ids, vec!["A", "C"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreachable_sequence_and_negative_times() {
        let rows = vec![PanelRow::new("A", 0.0, 1), PanelRow::new("A", 1.0, 0)];
        assert!(matches!(
            PanelDataset::ingest(rows, &id_graph()),
            Err(Error::UnreachableObservation { .. })
        ));
        let rows = vec![PanelRow::new("A", -1.0, 0), PanelRow::new("A", 1.0, 0)];
        assert!(matches!(
            PanelDataset::ingest(rows, &id_graph()),
            Err(Error::InvalidTime { .. })
        ));
    }

    #[test]
    fn grid_is_sorted_union() {
        let rows = vec![
            PanelRow::new("A", 0.0, 0),
            PanelRow::new("A", 2.0, 0),
            PanelRow::new("A", 5.0, 2),
            PanelRow::new("B", 0.0, 0),
            PanelRow::new("B", 3.0, 1),
            PanelRow::new("B", 5.0, 1),
        ];
        let d = PanelDataset::ingest(rows, &id_graph()).unwrap();
        let g = BinGrid::from_dataset(&d).unwrap();
        assert_eq!(g.taus(), &[2.0, 3.0, 5.0]);
        assert_eq!(g.num_bins(), 3);
        assert_eq!(g.max_gap(), 2.0);

        let single = PanelDataset::ingest(
            vec![PanelRow::new("A", 0.0, 0), PanelRow::new("A", 1.0, 0)],
            &id_graph(),
        )
        .unwrap();
        assert_eq!(BinGrid::from_dataset(&single).unwrap().taus(), &[1.0]);
    }

    #[test]
    fn bin_contexts() {
        let rows = vec![
            PanelRow::new("A", 0.0, 0),
            PanelRow::new("A", 2.0, 0),
            PanelRow::new("A", 5.0, 2),
            PanelRow::new("B", 0.0, 0),
            PanelRow::new("B", 3.0, 0),
            PanelRow::new("B", 7.0, 0),
        ];
        let d = PanelDataset::ingest(rows, &id_graph()).unwrap();
        let g = BinGrid::from_dataset(&d).unwrap();
        assert_eq!(g.taus(), &[2.0, 3.0, 5.0, 7.0]);
        // bin (2,3]
        let c = subject_bin_context(&d, &g, 0, 1).unwrap();
        assert_eq!((c.l, c.r, c.a, c.b, c.r_point), (2.0, 5.0, 0, 2, 3));
        // bin (0,2]
        let c = subject_bin_context(&d, &g, 0, 0).unwrap();
        assert_eq!((c.l, c.r, c.a, c.b), (0.0, 2.0, 0, 0));
        // bin (5,7]: subject A last seen at 5
        assert!(subject_bin_context(&d, &g, 0, 3).is_none());
        assert!(subject_bin_context(&d, &g, 1, 3).is_some());
    }

    #[test]
    fn interval_index_and_risk_sets() {
        let rows = vec![
            PanelRow::new("A", 0.0, 0),
            PanelRow::new("A", 2.0, 0),
            PanelRow::new("A", 5.0, 2),
            PanelRow::new("B", 3.0, 0),
            PanelRow::new("B", 7.0, 1),
        ];
        let graph = TransitionGraph::new(3, &[(1, 2), (1, 3), (2, 3)], &[3]).unwrap();
        let d = PanelDataset::ingest(rows, &graph).unwrap();
        let g = BinGrid::from_dataset(&d).unwrap();
        let idx = IntervalIndex::new(&d, &g, &graph).unwrap();
        assert_eq!(idx.at_risk(), &[1, 1, 2, 1]);
        let a = idx.subject(0);
        assert_eq!(a.len(), 2);
        assert_eq!((a[1].start, a[1].end, a[1].exact_arrival), (1, 3, true));
        assert!(!a[0].exact_arrival);
    }

    #[test]
    fn csv_round_trip() {
        let text = "id,time,state\nA,0,1\nA,2.5,1\nA,5,3\nB,0,2\nB,1.25,3\n";
        let d = PanelDataset::read_csv(text.as_bytes(), &id_graph()).unwrap();
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let text = "subject,t,s\nA,0,1\n";
        assert!(PanelDataset::read_csv(text.as_bytes(), &id_graph()).is_err());
    }
}
