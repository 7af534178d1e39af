//! Real-time detection of outlier database connections.
//!
//! A [`SecurityRule`] selects an ordered tuple of connection variables. Every
//! matching connection is reduced to a 64-bit [`TupleHash`] and absorbed into a
//! per-rule [`BaselineState`]. Once the number of observed connections `N`
//! exceeds `n * ln(n / delta)` (with `n` distinct hashes seen) and the rule's
//! `con_min_count`, the rule switches to detection and every previously unseen
//! tuple yields the rule's action.

pub mod baseline;
pub mod engine;
pub mod error;
pub mod hashing;
pub mod policy;
pub mod simulator;

pub use baseline::{
    evaluate_phase, memory_estimate, min_observations, phase_for, BaselineState, Phase, Snapshot,
    SnapshotRule, SNAPSHOT_VERSION,
};
pub use engine::{process_event, ConnectionEvent, Decision, Engine, Verdict, VerdictRecord};
pub use error::{DomainError, EventError, PolicyError, PopulationError, SnapshotError};
pub use hashing::{hash_tuple, murmur3_x64_128, serialize_tuple, TupleHash};
pub use policy::{
    parse_policy, rule_matches, Action, MatchTerm, Policy, SecurityRule, VariableName, CATALOG,
    DEFAULT_CONFIDENCE, DEFAULT_CON_MIN_COUNT,
};
pub use simulator::{
    coverage_probability, generate_stream, run_section4_scenario, Coverage, EventGenerator,
    PopulationClass, PopulationSpec, ScenarioConfig, ScenarioReport,
};
