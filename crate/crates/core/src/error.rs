use thiserror::Error;

/// Errors raised by model construction, data ingestion and the estimators.
///
/// State numbers in messages are 1-based, bins are 1-based, matching the
/// external file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model needs at least 2 states, got {0}")]
    TooFewStates(usize),

    #[error("transition {from}->{to} references a state outside 1..={num_states}")]
    InvalidState {
        from: usize,
        to: usize,
        num_states: usize,
    },

    #[error("self transition {0}->{0} is not allowed")]
    SelfLoop(usize),

    #[error("transition graph contains a cycle: {}", format_cycle(.0))]
    Cycle(Vec<usize>),

    #[error("exact state {0} is outside the state space")]
    InvalidExactState(usize),

    #[error("subject {subject}: no path from state {from} at t={from_time} to state {to} at t={to_time}")]
    UnreachableObservation {
        subject: String,
        from: usize,
        to: usize,
        from_time: f64,
        to_time: f64,
    },

    #[error("subject {subject}: two different states ({first}, {second}) recorded at t={time}")]
    DuplicateTime {
        subject: String,
        time: f64,
        first: usize,
        second: usize,
    },

    #[error("subjects with a single observation: {}", .0.join(", "))]
    SingleObservation(Vec<String>),

    #[error("subject {subject}: observation time {time} is negative or not finite")]
    InvalidTime { subject: String, time: f64 },

    #[error("unknown state '{0}'")]
    UnknownState(String),

    #[error("dataset has no subjects")]
    EmptyDataset,

    #[error("estimate leaves state {state} with total jump {sum} > 1 in bin {bin}")]
    InfeasibleEstimate { state: usize, bin: usize, sum: f64 },

    #[error("subject {subject}: interval ({from_time}, {to_time}] has probability {value:e} under the current estimate")]
    ZeroDenominator {
        subject: String,
        from_time: f64,
        to_time: f64,
        value: f64,
    },

    #[error("observed log-likelihood is not finite (subject {subject})")]
    NonFiniteLoglik { subject: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bin {bin} has expected latent counts but no subject at risk")]
    EmptyRiskSet { bin: usize },

    #[error("singular M-step system in bin {bin}{}", match .state { Some(g) => format!(" for state {g}"), None => String::new() })]
    SingularMStep { state: Option<usize>, bin: usize },

    #[error("invalid scenario: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no convergence after {} iterations (stop reason {})", .0.iterations, .0.stop_reason)]
    MaxIterations(Box<crate::em::FitResult>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Strips any iteration context and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            e => e,
        }
    }
}

fn format_cycle(states: &[usize]) -> String {
    states
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("->")
}

pub type Result<T> = std::result::Result<T, Error>;
