//! Event processing: one learning/detection step per (rule, event) pair, and
//! fan-out of each event to every matching rule.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::baseline::{min_observations, BaselineState, Phase, Snapshot, SnapshotRule, SNAPSHOT_VERSION};
use crate::error::{EventError, SnapshotError};
use crate::hashing::{hash_tuple, serialize_tuple_into, TupleHash};
use crate::policy::{rule_matches, Action, Policy, SecurityRule, VariableName};

/// Key carrying an optional timestamp through to verdict output.
pub const TIMESTAMP_KEY: &str = "_ts";

/// One observed connection: variable name → value.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConnectionEvent {
    pub seq: u64,
    pub values: BTreeMap<String, String>,
    pub timestamp: Option<String>,
}

impl ConnectionEvent {
    pub fn new(seq: u64) -> Self {
        Self {
            seq,
            ..Self::default()
        }
    }

    pub fn from_pairs<'a>(seq: u64, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            seq,
            values: pairs
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v.to_owned()))
                .collect(),
            timestamp: None,
        }
    }

    pub fn get(&self, var: &str) -> Option<&str> {
        self.values.get(var).map(String::as_str)
    }

    pub fn set(&mut self, var: &VariableName, value: impl Into<String>) {
        self.values.insert(var.as_str().to_owned(), value.into());
    }

    /// Parses one JSON Lines record. Keys that are not variable names (other
    /// than `_ts`) are ignored; variable-named keys must hold strings.
    pub fn from_json_line(line: &str, seq: u64) -> Result<Self, EventError> {
        let value: serde_json::Value = serde_json::from_str(line)?;
        let serde_json::Value::Object(map) = value else {
            return Err(EventError::NotAnObject);
        };
        let mut event = Self::new(seq);
        for (key, value) in map {
            if key == TIMESTAMP_KEY {
                match value {
                    serde_json::Value::String(s) => event.timestamp = Some(s),
                    _ => return Err(EventError::NonStringField(key)),
                }
            } else if VariableName::is_valid(&key) {
                match value {
                    serde_json::Value::String(s) => {
                        event.values.insert(key, s);
                    }
                    _ => return Err(EventError::NonStringField(key)),
                }
            }
        }
        Ok(event)
    }

    /// Inverse of [`ConnectionEvent::from_json_line`] (the sequence number is
    /// not part of the record).
    pub fn to_json_line(&self) -> String {
        let mut map = serde_json::Map::new();
        for (k, v) in &self.values {
            map.insert(k.clone(), serde_json::Value::String(v.clone()));
        }
        if let Some(ts) = &self.timestamp {
            map.insert(TIMESTAMP_KEY.to_owned(), serde_json::Value::String(ts.clone()));
        }
        serde_json::Value::Object(map).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Allow,
    Alert,
    Terminate,
}

impl From<Action> for Decision {
    fn from(action: Action) -> Self {
        match action {
            Action::Alert => Decision::Alert,
            Action::Terminate => Decision::Terminate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub rule_id: String,
    pub decision: Decision,
    pub hash: TupleHash,
    pub phase_before: Phase,
    pub phase_after: Phase,
    pub was_new: bool,
    pub n_after: u64,
    pub observed_after: u64,
    /// `n_after * ln(n_after / delta)`.
    pub threshold: f64,
    pub seq: u64,
    pub timestamp: Option<String>,
}

impl Verdict {
    pub fn is_outlier(&self) -> bool {
        self.decision != Decision::Allow
    }

    pub fn to_record(&self) -> VerdictRecord<'_> {
        VerdictRecord {
            seq: self.seq,
            rule: &self.rule_id,
            decision: self.decision,
            hash: self.hash.to_hex(),
            phase_before: self.phase_before,
            phase_after: self.phase_after,
            n: self.n_after,
            observed: self.observed_after,
            threshold: self.threshold,
            ts: self.timestamp.as_deref(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("verdict serializes")
    }
}

/// Wire form of a [`Verdict`] (one JSON Lines record).
#[derive(Debug, Serialize)]
pub struct VerdictRecord<'a> {
    pub seq: u64,
    pub rule: &'a str,
    pub decision: Decision,
    pub hash: String,
    pub phase_before: Phase,
    pub phase_after: Phase,
    pub n: u64,
    #[serde(rename = "N")]
    pub observed: u64,
    pub threshold: f64,
    #[serde(rename = "_ts", skip_serializing_if = "Option::is_none")]
    pub ts: Option<&'a str>,
}

/// One step of the learning/detection loop for a rule the event matches:
/// hash the tuple, count the observation, absorb the hash if new, decide from
/// the phase held *before* this event, then re-evaluate the phase.
pub fn process_event(
    rule: &SecurityRule,
    state: &mut BaselineState,
    event: &ConnectionEvent,
) -> Verdict {
    let mut buf = Vec::new();
    step(rule, state, event, &mut buf)
}

fn step(
    rule: &SecurityRule,
    state: &mut BaselineState,
    event: &ConnectionEvent,
    buf: &mut Vec<u8>,
) -> Verdict {
    serialize_tuple_into(rule, event, buf);
    let hash = hash_tuple(buf);
    let phase_before = state.phase();

    state.record_observation();
    let was_new = state.insert(hash);
    let decision = if phase_before == Phase::Detecting && was_new {
        Decision::from(rule.action)
    } else {
        Decision::Allow
    };
    let phase_after = state.refresh_phase(rule);
    let n_after = state.distinct_count();

    Verdict {
        rule_id: rule.id.clone(),
        decision,
        hash,
        phase_before,
        phase_after,
        was_new,
        n_after,
        observed_after: state.observed_count(),
        threshold: min_observations(n_after, rule.delta()).unwrap_or(f64::NAN),
        seq: event.seq,
        timestamp: event.timestamp.clone(),
    }
}

#[derive(Debug)]
struct Slot {
    rule: SecurityRule,
    state: BaselineState,
    buf: Vec<u8>,
}

impl Slot {
    fn offer(&mut self, event: &ConnectionEvent) -> Option<Verdict> {
        rule_matches(&self.rule, event)
            .then(|| step(&self.rule, &mut self.state, event, &mut self.buf))
    }
}

/// The rule registry: each rule paired with its own baseline.
///
/// With more than one worker, rules are evaluated on a dedicated thread pool.
/// Output order never depends on the worker count: verdicts for one event are
/// in rule-definition order.
pub struct Engine {
    slots: Vec<Slot>,
    pool: Option<rayon::ThreadPool>,
}

impl Engine {
    pub fn new(policy: &Policy) -> Self {
        Self::from_parts(policy, vec![BaselineState::new(); policy.rules.len()])
    }

    /// Restores baselines saved by [`Engine::snapshot`].
    pub fn restore(policy: &Policy, snapshot: Snapshot) -> Result<Self, SnapshotError> {
        let states = snapshot.into_states(policy)?;
        Ok(Self::from_parts(policy, states))
    }

    /// Pairs each policy rule with the given state (same order and length).
    pub fn from_parts(policy: &Policy, states: Vec<BaselineState>) -> Self {
        assert_eq!(policy.rules.len(), states.len(), "one state per rule");
        let slots = policy
            .rules
            .iter()
            .cloned()
            .zip(states)
            .map(|(rule, mut state)| {
                state.refresh_phase(&rule);
                Slot {
                    rule,
                    state,
                    buf: Vec::new(),
                }
            })
            .collect();
        Self { slots, pool: None }
    }

    /// Evaluates rules on `workers` threads. `workers <= 1` is serial.
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.pool = (workers > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .thread_name(|i| format!("rule-worker-{i}"))
                .build()
                .expect("thread pool")
        });
        self
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, |p| p.current_num_threads())
    }

    pub fn rules(&self) -> impl Iterator<Item = &SecurityRule> {
        self.slots.iter().map(|s| &s.rule)
    }

    pub fn states(&self) -> impl Iterator<Item = (&SecurityRule, &BaselineState)> {
        self.slots.iter().map(|s| (&s.rule, &s.state))
    }

    pub fn state(&self, rule_id: &str) -> Option<&BaselineState> {
        self.slots
            .iter()
            .find(|s| s.rule.id == rule_id)
            .map(|s| &s.state)
    }

    /// Runs every matching rule once on `event`.
    pub fn dispatch(&mut self, event: &ConnectionEvent) -> Vec<Verdict> {
        match &self.pool {
            Some(pool) if self.slots.len() > 1 => {
                let slots = &mut self.slots;
                let results: Vec<Option<Verdict>> =
                    pool.install(|| slots.par_iter_mut().map(|s| s.offer(event)).collect());
                results.into_iter().flatten().collect()
            }
            _ => self.slots.iter_mut().filter_map(|s| s.offer(event)).collect(),
        }
    }

    /// Processes a run of events. Each rule consumes the whole run in order on
    /// its own; results are merged by event, then by rule.
    pub fn dispatch_batch(&mut self, events: &[ConnectionEvent]) -> Vec<Verdict> {
        let run = |slot: &mut Slot| -> Vec<Option<Verdict>> {
            events.iter().map(|e| slot.offer(e)).collect()
        };
        let per_rule: Vec<Vec<Option<Verdict>>> = match &self.pool {
            Some(pool) if self.slots.len() > 1 => {
                let slots = &mut self.slots;
                pool.install(|| slots.par_iter_mut().map(run).collect())
            }
            _ => self.slots.iter_mut().map(run).collect(),
        };
        let mut columns: Vec<_> = per_rule.into_iter().map(Vec::into_iter).collect();
        let mut out = Vec::new();
        for _ in events {
            for column in &mut columns {
                if let Some(Some(v)) = column.next() {
                    out.push(v);
                }
            }
        }
        out
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            version: SNAPSHOT_VERSION,
            rules: self
                .slots
                .iter()
                .map(|s| SnapshotRule::from_state(&s.rule.id, &s.state))
                .collect(),
        }
    }
}
