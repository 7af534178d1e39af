use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("{line}:{column}: syntax error: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{line}:{column}: duplicate rule id `{id}`")]
    DuplicateRule {
        id: String,
        line: usize,
        column: usize,
    },
    #[error("{line}:{column}: unknown variable `{name}` (declare it with `extension {name}`)")]
    UnknownVariable {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("{line}:{column}: invalid variable name `{name}`")]
    InvalidVariableName {
        name: String,
        line: usize,
        column: usize,
    },
    #[error("{line}:{column}: confidence {value} is outside (0, 1)")]
    ConfidenceOutOfRange {
        value: f64,
        line: usize,
        column: usize,
    },
    #[error("{line}:{column}: outlier tuple must name at least one variable")]
    EmptyOutlierVars { line: usize, column: usize },
    #[error("{line}:{column}: variable `{name}` appears twice in the outlier tuple")]
    DuplicateOutlierVar {
        name: String,
        line: usize,
        column: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("n must be at least 1, got {0}")]
    NonPositiveCount(u64),
    #[error("delta must lie in (0, 1), got {0}")]
    DeltaOutOfRange(f64),
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("snapshot names rule `{0}` which is not in the policy")]
    UnknownRule(String),
    #[error("rule `{0}` from the policy is missing in the snapshot")]
    MissingRule(String),
    #[error("rule `{0}` appears more than once")]
    DuplicateRule(String),
    #[error("rule `{rule}`: bad hash `{value}` (expected 16 lowercase hex digits)")]
    BadHash { rule: String, value: String },
    #[error("rule `{0}`: hashes are not strictly ascending")]
    Unsorted(String),
    #[error("rule `{rule}`: n = {n} but {len} hashes stored")]
    CountMismatch { rule: String, n: u64, len: usize },
    #[error("rule `{rule}`: N = {observed} is below n = {distinct}")]
    ObservedBelowDistinct {
        rule: String,
        observed: u64,
        distinct: u64,
    },
    #[error("rule `{rule}`: stored phase {stored} disagrees with counters ({expected})")]
    PhaseMismatch {
        rule: String,
        stored: String,
        expected: String,
    },
}

#[derive(Debug, Error)]
pub enum EventError {
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("event must be a JSON object")]
    NotAnObject,
    #[error("field `{0}` must be a string")]
    NonStringField(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PopulationError {
    #[error("invalid population file: {0}")]
    Json(String),
    #[error("invalid variable name `{0}`")]
    BadVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("class {index} has {got} values, expected {expected}")]
    Arity {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("class {index} has invalid probability {p}")]
    BadProbability { index: usize, p: f64 },
    #[error("class probabilities sum to {0}, which exceeds 1")]
    MassExceedsOne(f64),
    #[error("class {0} duplicates an earlier class")]
    DuplicateClass(usize),
}
