//! Per-rule learned state and the learning → detection stopping rule.
//!
//! The baseline is the sorted, duplicate-free vector of tuple hashes seen so
//! far (`n` entries) together with the count `N` of matching connections. A
//! rule detects once `N >= con_min_count` and `N > n * ln(n / delta)`.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use crate::error::{DomainError, SnapshotError};
use crate::hashing::TupleHash;
use crate::policy::{Policy, SecurityRule};

/// Bytes charged per stored hash by [`memory_estimate`].
pub const HASH_BYTES: u64 = 8;
/// Fixed container header charged by [`memory_estimate`].
pub const HEADER_BYTES: u64 = 24;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Learning,
    Detecting,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Learning => "learning",
            Phase::Detecting => "detecting",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `n * ln(n / delta)`: the number of observations that must be exceeded
/// before learning may end with confidence `1 - delta`.
pub fn min_observations(n: u64, delta: f64) -> Result<f64, DomainError> {
    if n < 1 {
        return Err(DomainError::NonPositiveCount(n));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DomainError::DeltaOutOfRange(delta));
    }
    let n = n as f64;
    Ok(n * (n / delta).ln())
}

/// Phase implied by the counters. `n == 0` is always learning.
pub fn phase_for(distinct: u64, observed: u64, con_min_count: u64, delta: f64) -> Phase {
    if distinct == 0 || observed < con_min_count {
        return Phase::Learning;
    }
    match min_observations(distinct, delta) {
        Ok(threshold) if (observed as f64) > threshold => Phase::Detecting,
        _ => Phase::Learning,
    }
}

pub fn evaluate_phase(state: &BaselineState, rule: &SecurityRule) -> Phase {
    phase_for(
        state.distinct_count(),
        state.observed_count(),
        rule.con_min_count,
        rule.delta(),
    )
}

/// `8 * n + 24` bytes.
pub fn memory_estimate(state: &BaselineState) -> u64 {
    HASH_BYTES * state.distinct_count() + HEADER_BYTES
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BaselineState {
    hashes: Vec<TupleHash>,
    observed: u64,
    phase: Phase,
}

impl BaselineState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a state from arbitrary hashes (sorted and deduplicated here).
    /// Returns `None` if `observed` is below the number of distinct hashes.
    /// The phase starts as learning; call [`BaselineState::refresh_phase`].
    pub fn from_hashes(hashes: impl IntoIterator<Item = TupleHash>, observed: u64) -> Option<Self> {
        let mut hashes: Vec<_> = hashes.into_iter().collect();
        hashes.sort_unstable();
        hashes.dedup();
        (observed >= hashes.len() as u64).then_some(Self {
            hashes,
            observed,
            phase: Phase::Learning,
        })
    }

    /// `n`
    pub fn distinct_count(&self) -> u64 {
        self.hashes.len() as u64
    }

    /// `N`
    pub fn observed_count(&self) -> u64 {
        self.observed
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn hashes(&self) -> &[TupleHash] {
        &self.hashes
    }

    pub fn contains(&self, h: TupleHash) -> bool {
        self.search(h).0.is_ok()
    }

    /// Membership plus the number of comparisons made, which never exceeds
    /// `floor(log2(n)) + 1`.
    pub fn contains_counted(&self, h: TupleHash) -> (bool, u32) {
        let (found, probes) = self.search(h);
        (found.is_ok(), probes)
    }

    fn search(&self, h: TupleHash) -> (Result<usize, usize>, u32) {
        let mut lo = 0;
        let mut hi = self.hashes.len();
        let mut probes = 0;
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            probes += 1;
            match self.hashes[mid].cmp(&h) {
                Ordering::Equal => return (Ok(mid), probes),
                Ordering::Less => lo = mid + 1,
                Ordering::Greater => hi = mid,
            }
        }
        (Err(lo), probes)
    }

    /// Inserts `h` at its sorted position. Returns whether it was new.
    /// `N` is not touched.
    pub fn insert(&mut self, h: TupleHash) -> bool {
        match self.search(h).0 {
            Ok(_) => false,
            Err(at) => {
                self.hashes.insert(at, h);
                true
            }
        }
    }

    /// `N += 1`
    pub fn record_observation(&mut self) {
        self.observed += 1;
    }

    /// Recomputes the stored phase from the counters and returns it.
    pub fn refresh_phase(&mut self, rule: &SecurityRule) -> Phase {
        self.phase = evaluate_phase(self, rule);
        self.phase
    }

    /// Checks the structural invariants: strictly ascending hashes and
    /// `N >= n`.
    pub fn is_consistent(&self) -> bool {
        self.hashes.windows(2).all(|w| w[0] < w[1]) && self.observed >= self.distinct_count()
    }
}

/// On-disk form of a registry of baselines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub version: u32,
    pub rules: Vec<SnapshotRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRule {
    pub rule_id: String,
    pub n: u64,
    #[serde(rename = "N")]
    pub observed: u64,
    pub phase: Phase,
    pub hashes: Vec<String>,
}

impl SnapshotRule {
    pub fn from_state(rule_id: &str, state: &BaselineState) -> Self {
        Self {
            rule_id: rule_id.to_owned(),
            n: state.distinct_count(),
            observed: state.observed_count(),
            phase: state.phase(),
            hashes: state.hashes.iter().map(|h| h.to_hex()).collect(),
        }
    }

    /// Rebuilds a state, rejecting anything that violates the baseline
    /// invariants.
    pub fn to_state(&self, rule: &SecurityRule) -> Result<BaselineState, SnapshotError> {
        let id = &self.rule_id;
        let hashes = self
            .hashes
            .iter()
            .map(|s| {
                TupleHash::from_hex(s).ok_or_else(|| SnapshotError::BadHash {
                    rule: id.clone(),
                    value: s.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !hashes.windows(2).all(|w| w[0] < w[1]) {
            return Err(SnapshotError::Unsorted(id.clone()));
        }
        if self.n != hashes.len() as u64 {
            return Err(SnapshotError::CountMismatch {
                rule: id.clone(),
                n: self.n,
                len: hashes.len(),
            });
        }
        if self.observed < self.n {
            return Err(SnapshotError::ObservedBelowDistinct {
                rule: id.clone(),
                observed: self.observed,
                distinct: self.n,
            });
        }
        let mut state = BaselineState {
            hashes,
            observed: self.observed,
            phase: Phase::Learning,
        };
        let expected = state.refresh_phase(rule);
        if expected != self.phase {
            return Err(SnapshotError::PhaseMismatch {
                rule: id.clone(),
                stored: self.phase.to_string(),
                expected: expected.to_string(),
            });
        }
        Ok(state)
    }

    /// Structural checks that need no policy: hex format, ordering, counters.
    pub fn check_structure(&self) -> Result<(), SnapshotError> {
        let id = &self.rule_id;
        let mut prev: Option<TupleHash> = None;
        for s in &self.hashes {
            let h = TupleHash::from_hex(s).ok_or_else(|| SnapshotError::BadHash {
                rule: id.clone(),
                value: s.clone(),
            })?;
            if prev.is_some_and(|p| p >= h) {
                return Err(SnapshotError::Unsorted(id.clone()));
            }
            prev = Some(h);
        }
        if self.n != self.hashes.len() as u64 {
            return Err(SnapshotError::CountMismatch {
                rule: id.clone(),
                n: self.n,
                len: self.hashes.len(),
            });
        }
        if self.observed < self.n {
            return Err(SnapshotError::ObservedBelowDistinct {
                rule: id.clone(),
                observed: self.observed,
                distinct: self.n,
            });
        }
        Ok(())
    }
}

impl Snapshot {
    pub fn from_json(text: &str) -> Result<Self, SnapshotError> {
        let snapshot: Snapshot = serde_json::from_str(text)?;
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(SnapshotError::Version(snapshot.version));
        }
        Ok(snapshot)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    /// Validates against `policy` and returns one state per policy rule, in
    /// policy order.
    pub fn into_states(self, policy: &Policy) -> Result<Vec<BaselineState>, SnapshotError> {
        let mut seen = HashSet::new();
        for entry in &self.rules {
            if policy.rule(&entry.rule_id).is_none() {
                return Err(SnapshotError::UnknownRule(entry.rule_id.clone()));
            }
            if !seen.insert(entry.rule_id.as_str()) {
                return Err(SnapshotError::DuplicateRule(entry.rule_id.clone()));
            }
        }
        policy
            .rules
            .iter()
            .map(|rule| {
                let entry = self
                    .rules
                    .iter()
                    .find(|e| e.rule_id == rule.id)
                    .ok_or_else(|| SnapshotError::MissingRule(rule.id.clone()))?;
                entry.to_state(rule)
            })
            .collect()
    }
}
