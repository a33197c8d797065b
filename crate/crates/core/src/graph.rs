//! Multi-state model structure.
//!
//! A [`TransitionGraph`] holds the state space, the allowed direct
//! transitions and the subset of states whose entry times are observed
//! exactly. Graphs are validated once at construction: they must be acyclic,
//! so every downstream computation may assume a topological order exists.
//!
//! States are 0-based indices internally. The model file, panel files and
//! all error messages use 1-based state numbers.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// A direct transition `from -> to` between two 0-based states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
}

/// Predecessor and successor sets of every state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachSets {
    /// `predecessors[h]` holds every `g` with `g -> h` allowed.
    pub predecessors: Vec<Vec<usize>>,
    /// `successors[g]` holds every `h` with `g -> h` allowed.
    pub successors: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGraph {
    num_states: usize,
    /// Sorted by `(from, to)`; position in this list is the transition index.
    transitions: Vec<Transition>,
    exact: Vec<bool>,
    labels: Option<Vec<String>>,
    reach: ReachSets,
    /// Transition indices leaving each state.
    outgoing: Vec<Vec<usize>>,
    /// Transition indices entering each state.
    incoming: Vec<Vec<usize>>,
    /// `reachable[g * H + h]`: a directed path (possibly empty) from g to h exists.
    reachable: Vec<bool>,
    topo_order: Vec<usize>,
}

impl TransitionGraph {
    /// Builds and validates a graph from 1-based transition pairs and exact states.
    pub fn new(
        num_states: usize,
        transitions: &[(usize, usize)],
        exact_states: &[usize],
    ) -> Result<Self> {
        if num_states < 2 {
            return Err(Error::TooFewStates(num_states));
        }
        let mut set = BTreeSet::new();
        for &(g, h) in transitions {
            if g == 0 || h == 0 || g > num_states || h > num_states {
                return Err(Error::InvalidState {
                    from: g,
                    to: h,
                    num_states,
                });
            }
            if g == h {
                return Err(Error::SelfLoop(g));
            }
            set.insert(Transition {
                from: g - 1,
                to: h - 1,
            });
        }
        let transitions: Vec<Transition> = set.into_iter().collect();

        let mut exact = vec![false; num_states];
        for &e in exact_states {
            if e == 0 || e > num_states {
                return Err(Error::InvalidExactState(e));
            }
            exact[e - 1] = true;
        }

        let mut predecessors = vec![Vec::new(); num_states];
        let mut successors = vec![Vec::new(); num_states];
        let mut outgoing = vec![Vec::new(); num_states];
        let mut incoming = vec![Vec::new(); num_states];
        for (v, t) in transitions.iter().enumerate() {
            successors[t.from].push(t.to);
            predecessors[t.to].push(t.from);
            outgoing[t.from].push(v);
            incoming[t.to].push(v);
        }

        if let Some(cycle) = find_cycle(&successors) {
            return Err(Error::Cycle(cycle.into_iter().map(|s| s + 1).collect()));
        }
        let topo_order = topological_order(&successors);

        // Closure in reverse topological order: a state reaches itself and
        // everything its successors reach.
        let mut reachable = vec![false; num_states * num_states];
        for &g in topo_order.iter().rev() {
            reachable[g * num_states + g] = true;
            for &h in &successors[g] {
                for z in 0..num_states {
                    if reachable[h * num_states + z] {
                        reachable[g * num_states + z] = true;
                    }
                }
            }
        }

        Ok(Self {
            num_states,
            transitions,
            exact,
            labels: None,
            reach: ReachSets {
                predecessors,
                successors,
            },
            outgoing,
            incoming,
            reachable,
            topo_order,
        })
    }

    /// Attaches presentation labels, one per state.
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.num_states {
            return Err(Error::InvalidConfig(format!(
                "{} labels given for {} states",
                labels.len(),
                self.num_states
            )));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::InvalidConfig("state labels must be unique".into()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// The illness-death model: 1 -> 2, 1 -> 3, 2 -> 3.
    pub fn illness_death() -> Self {
        Self::new(3, &[(1, 2), (1, 3), (2, 3)], &[]).expect("valid graph")
    }

    /// The extended illness-death model with separate death states:
    /// 1 -> 2, 1 -> 3, 2 -> 4.
    pub fn extended_illness_death(exact_states: &[usize]) -> Result<Self> {
        Self::new(4, &[(1, 2), (1, 3), (2, 4)], exact_states)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_transitions(&self) -> usize {
        self.transitions.len()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transition(&self, v: usize) -> Transition {
        self.transitions[v]
    }

    /// Index of the 0-based transition `from -> to`, if allowed.
    pub fn transition_index(&self, from: usize, to: usize) -> Option<usize> {
        self.transitions
            .binary_search(&Transition { from, to })
            .ok()
    }

    pub fn reach_sets(&self) -> &ReachSets {
        &self.reach
    }

    pub fn successors(&self, g: usize) -> &[usize] {
        &self.reach.successors[g]
    }

    pub fn predecessors(&self, h: usize) -> &[usize] {
        &self.reach.predecessors[h]
    }

    /// Transition indices leaving `g`.
    pub fn outgoing(&self, g: usize) -> &[usize] {
        &self.outgoing[g]
    }

    /// Transition indices entering `h`.
    pub fn incoming(&self, h: usize) -> &[usize] {
        &self.incoming[h]
    }

    pub fn is_absorbing(&self, g: usize) -> bool {
        self.reach.successors[g].is_empty()
    }

    pub fn is_exact(&self, g: usize) -> bool {
        self.exact[g]
    }

    pub fn has_exact_states(&self) -> bool {
        self.exact.iter().any(|&e| e)
    }

    /// 0-based exact states in ascending order.
    pub fn exact_states(&self) -> Vec<usize> {
        (0..self.num_states).filter(|&g| self.exact[g]).collect()
    }

    /// Whether a directed path (possibly empty) leads from `g` to `h`.
    pub fn reaches(&self, g: usize, h: usize) -> bool {
        self.reachable[g * self.num_states + h]
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Display name of a 0-based state: its label, or its 1-based number.
    pub fn state_name(&self, g: usize) -> String {
        match &self.labels {
            Some(l) => l[g].clone(),
            None => (g + 1).to_string(),
        }
    }

    /// Resolves a state token from a data file: a 1-based number or a label.
    pub fn parse_state(&self, token: &str) -> Result<usize> {
        let token = token.trim();
        if let Ok(n) = token.parse::<usize>() {
            if n >= 1 && n <= self.num_states {
                return Ok(n - 1);
            }
        }
        if let Some(labels) = &self.labels {
            if let Some(pos) = labels.iter().position(|l| l == token) {
                return Ok(pos);
            }
        }
        Err(Error::UnknownState(token.to_string()))
    }

    /// Checks that consecutive observed states (0-based) are connected by a
    /// directed path. The returned error carries 1-based states; the caller
    /// fills in subject and times through [`Self::check_sequence`].
    pub fn validate_observation_sequence(&self, states: &[usize]) -> Result<()> {
        let times: Vec<f64> = (0..states.len()).map(|j| j as f64).collect();
        self.check_sequence("<sequence>", states, &times)
    }

    pub(crate) fn check_sequence(
        &self,
        subject: &str,
        states: &[usize],
        times: &[f64],
    ) -> Result<()> {
        if states.is_empty() {
            return Err(Error::InvalidConfig("empty observation sequence".into()));
        }
        for (j, w) in states.windows(2).enumerate() {
            if !self.reaches(w[0], w[1]) {
                return Err(Error::UnreachableObservation {
                    subject: subject.to_string(),
                    from: w[0] + 1,
                    to: w[1] + 1,
                    from_time: times[j],
                    to_time: times[j + 1],
                });
            }
        }
        Ok(())
    }

    /// Serializes to the model file format.
    pub fn to_model_string(&self) -> String {
        let spec = ModelFile {
            states: self.num_states,
            transitions: self
                .transitions
                .iter()
                .map(|t| [t.from + 1, t.to + 1])
                .collect(),
            exact: self.exact_states().iter().map(|g| g + 1).collect(),
            labels: self.labels.clone(),
        };
        toml::to_string(&spec).expect("model spec serializes")
    }

    /// Parses the model file format.
    pub fn from_model_str(text: &str) -> Result<Self> {
        let spec: ModelFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.into_graph()
    }
}

/// On-disk model description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ModelFile {
    pub states: usize,
    pub transitions: Vec<[usize; 2]>,
    #[serde(default)]
    pub exact: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl ModelFile {
    pub(crate) fn into_graph(self) -> Result<TransitionGraph> {
        let pairs: Vec<(usize, usize)> = self.transitions.iter().map(|p| (p[0], p[1])).collect();
        let graph = TransitionGraph::new(self.states, &pairs, &self.exact)?;
        match self.labels {
            Some(l) => graph.with_labels(l),
            None => Ok(graph),
        }
    }
}

fn find_cycle(successors: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let n = successors.len();
    let mut mark = vec![Mark::White; n];
    let mut stack: Vec<usize> = Vec::new();

    fn visit(
        g: usize,
        successors: &[Vec<usize>],
        mark: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        mark[g] = Mark::Grey;
        stack.push(g);
        for &h in &successors[g] {
            match mark[h] {
                Mark::Grey => {
                    let start = stack.iter().position(|&s| s == h).expect("on stack");
                    let mut cycle = stack[start..].to_vec();
                    cycle.push(h);
                    return Some(cycle);
                }
                Mark::White => {
                    if let Some(c) = visit(h, successors, mark, stack) {
                        return Some(c);
                    }
                }
                Mark::Black => {}
            }
        }
        stack.pop();
        mark[g] = Mark::Black;
        None
    }

    for g in 0..n {
        if mark[g] == Mark::White {
            if let Some(c) = visit(g, successors, &mut mark, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

fn topological_order(successors: &[Vec<usize>]) -> Vec<usize> {
    let n = successors.len();
    let mut indegree = vec![0usize; n];
    for succ in successors {
        for &h in succ {
            indegree[h] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&g| indegree[g] == 0).rev().collect();
    let mut order = Vec::with_capacity(n);
    while let Some(g) = ready.pop() {
        order.push(g);
        for &h in successors[g].iter().rev() {
            indegree[h] -= 1;
            if indegree[h] == 0 {
                ready.push(h);
            }
        }
    }
    order
}
