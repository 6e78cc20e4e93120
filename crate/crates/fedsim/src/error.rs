//! Crate-wide error type.

/// Errors surfaced by the simulator's numeric and orchestration layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// A loss or gradient went non-finite; `layer` is the first offending layer.
    #[error("non-finite value encountered in layer {layer} during {context}")]
    NonFinite { context: &'static str, layer: usize },

    /// Trigger optimization produced a non-finite gradient.
    #[error("non-finite trigger gradient at iteration {iteration}")]
    NonFiniteTriggerGrad { iteration: usize },

    /// A configuration value violates a precondition.
    #[error("invalid config: {0}")]
    Config(String),

    /// Bulyan's participation bound `n >= 4f + 3` is violated.
    #[error("bulyan requires n >= 4f + 3, got n = {n}, f = {f}")]
    BulyanBound { n: usize, f: usize },

    /// A defense was asked to operate on a model that lacks the needed layer.
    #[error("defense inapplicable: {0}")]
    DefenseInapplicable(String),

    /// ASR is undefined when no test sample is outside the target class.
    #[error("attack success rate undefined: every test sample has the target label {target}")]
    EmptyAsrDenominator { target: usize },

    /// Aggregation received no updates or zero total samples.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Checkpoint (de)serialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// An error that occurred inside a federated round, with round context.
    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the round in which it occurred.
    pub fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
