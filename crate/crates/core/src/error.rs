use crate::types::{ActionId, UserId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("timestamp {got} for user {user} is not greater than last timestamp {last}")]
    NonMonotoneTimestamp { user: UserId, last: u64, got: u64 },

    #[error("feedback value {0} outside [0, 1]")]
    FeedbackOutOfRange(f64),

    #[error("context tag `{0}` is not in the registry")]
    UnknownTag(String),

    #[error("holdout fraction {0} must lie strictly between 0 and 1")]
    FractionOutOfRange(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unknown user {0}")]
    UnknownUser(UserId),

    #[error("unknown action {0}")]
    UnknownAction(ActionId),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("record for user {got} does not belong to profile of user {expected}")]
    ForeignRecord { expected: UserId, got: UserId },

    #[error("preference pair must name two different actions (got {0} twice)")]
    DegeneratePair(ActionId),

    #[error("action {0} is not among the decision candidates")]
    NotACandidate(ActionId),

    #[error("no propensity for user {user}, action {action}")]
    MissingPropensity { user: UserId, action: ActionId },

    #[error("unknown decision {0}")]
    UnknownDecision(u64),

    #[error("decision {0} already received feedback")]
    DuplicateFeedback(u64),

    #[error("slot `{0}` is mandatory and cannot be emptied")]
    MandatorySlot(&'static str),

    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
