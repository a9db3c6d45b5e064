use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("link {link} references undeclared node {node}")]
    DanglingNode { link: String, node: String },

    #[error("duplicate link id {0}")]
    DuplicateLink(String),

    #[error("duplicate node id {0}")]
    DuplicateNode(String),

    #[error("unknown link {0}")]
    UnknownLink(String),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("mode indices must be dense from 0: {0}")]
    InvalidModes(String),

    #[error("invalid link {link}: {reason}")]
    InvalidLink { link: String, reason: String },

    #[error("invalid route for OD ({origin}, {destination}): {reason}")]
    InvalidRoute {
        origin: String,
        destination: String,
        reason: String,
    },

    #[error("empty choice set for OD ({origin}, {destination})")]
    EmptyChoiceSet { origin: String, destination: String },

    #[error("invalid observation: {0}")]
    InvalidObservation(String),

    #[error("no dispersion parameter for mode {0}")]
    MissingTheta(u32),

    #[error("no efficiency coefficients for link {link} (mode {mode})")]
    MissingBeta { link: String, mode: u32 },

    #[error("no prior capacity for capacitated link {0}")]
    MissingCapacity(String),

    #[error("missing observed capacity for link {link} at interval {t}")]
    MissingObservedCapacity { link: String, t: i64 },

    #[error("rank-deficient design matrix: column {column} is collinear with earlier columns")]
    RankDeficient { column: String },

    #[error("too few observations: need at least {needed}, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("log-likelihood is flat: {0}")]
    FlatLikelihood(String),

    #[error("chosen route probability underflows to zero in observation {index} (t = {t})")]
    ProbabilityUnderflow { index: usize, t: i64 },

    #[error("interval stream out of order at position {position}: expected t = {expected}, got {got}")]
    OutOfOrder {
        position: usize,
        expected: i64,
        got: i64,
    },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
