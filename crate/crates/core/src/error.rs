use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("in series {index}")]
    Series {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("timestamps decrease at step {step} ({prev} -> {next})")]
    DecreasingTimestamps { step: usize, prev: f64, next: f64 },

    #[error("integration diverged: non-finite state at t = {time}")]
    Divergence { time: f64 },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergentLoss { epoch: usize, batch: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("line {line}: unknown variable `{name}`")]
    UnknownVariable { name: String, line: u64 },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Attaches the index of the offending series.
    pub fn in_series(self, index: usize) -> Self {
        Error::Series {
            index,
            source: Box::new(self),
        }
    }
}
