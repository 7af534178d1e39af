//! Synthetic connection streams and Monte Carlo checks of the stopping rule.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`), seeded with
//! `ChaCha8Rng::seed_from_u64`. A uniform draw in `[0, 1)` is the top 53 bits
//! of `next_u64()` scaled by `2^-53`; a class is picked by locating that draw in
//! the cumulative probability table. Mass left over when the class
//! probabilities sum to less than one produces a background event carrying no
//! population variables.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::baseline::{min_observations, Phase};
use crate::engine::{ConnectionEvent, Decision, Engine};
use crate::error::PopulationError;
use crate::policy::{Action, Policy, SecurityRule, VariableName};

/// Sums within this distance of 1 are treated as a complete distribution.
const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationClass {
    pub values: Vec<String>,
    pub p: f64,
}

/// The true distinct-tuple population behind a synthetic stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    variables: Vec<VariableName>,
    classes: Vec<PopulationClass>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PopulationFile {
    variables: Vec<String>,
    classes: Vec<PopulationClass>,
    seed: u64,
}

impl PopulationSpec {
    pub fn new(
        variables: Vec<VariableName>,
        classes: Vec<PopulationClass>,
        seed: u64,
    ) -> Result<Self, PopulationError> {
        let mut names = HashSet::new();
        for v in &variables {
            if !names.insert(v) {
                return Err(PopulationError::DuplicateVariable(v.to_string()));
            }
        }
        let mut tuples = HashSet::new();
        let mut mass = 0.0;
        for (index, class) in classes.iter().enumerate() {
            if class.values.len() != variables.len() {
                return Err(PopulationError::Arity {
                    index,
                    got: class.values.len(),
                    expected: variables.len(),
                });
            }
            if !(class.p.is_finite() && class.p >= 0.0) {
                return Err(PopulationError::BadProbability { index, p: class.p });
            }
            if !tuples.insert(&class.values) {
                return Err(PopulationError::DuplicateClass(index));
            }
            mass += class.p;
        }
        if mass > 1.0 + MASS_TOLERANCE {
            return Err(PopulationError::MassExceedsOne(mass));
        }
        Ok(Self {
            variables,
            classes,
            seed,
        })
    }

    /// Equal probability for every tuple.
    pub fn uniform(
        variables: Vec<VariableName>,
        tuples: Vec<Vec<String>>,
        seed: u64,
    ) -> Result<Self, PopulationError> {
        let p = 1.0 / tuples.len().max(1) as f64;
        let classes = tuples
            .into_iter()
            .map(|values| PopulationClass { values, p })
            .collect();
        Self::new(variables, classes, seed)
    }

    pub fn from_json(text: &str) -> Result<Self, PopulationError> {
        let file: PopulationFile =
            serde_json::from_str(text).map_err(|e| PopulationError::Json(e.to_string()))?;
        let variables = file
            .variables
            .iter()
            .map(|v| VariableName::new(v).ok_or_else(|| PopulationError::BadVariable(v.clone())))
            .collect::<Result<_, _>>()?;
        Self::new(variables, file.classes, file.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PopulationFile {
            variables: self.variables.iter().map(|v| v.to_string()).collect(),
            classes: self.classes.clone(),
            seed: self.seed,
        })
        .expect("population serializes")
    }

    pub fn variables(&self) -> &[VariableName] {
        &self.variables
    }

    pub fn classes(&self) -> &[PopulationClass] {
        &self.classes
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.p).collect()
    }

    pub fn event_for_class(&self, class: usize, seq: u64) -> ConnectionEvent {
        let mut event = ConnectionEvent::new(seq);
        for (var, value) in self.variables.iter().zip(&self.classes[class].values) {
            event.set(var, value.clone());
        }
        event
    }

    pub fn generator(&self) -> EventGenerator<'_> {
        EventGenerator {
            population: self,
            sampler: ClassSampler::new(&self.probabilities()),
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            next_seq: 0,
        }
    }
}

fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Maps a uniform draw to a class index, or `None` for background mass.
#[derive(Debug, Clone)]
struct ClassSampler {
    cumulative: Vec<f64>,
}

impl ClassSampler {
    fn new(probs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cumulative.last_mut() {
            if (*last - 1.0).abs() <= MASS_TOLERANCE {
                *last = 1.0;
            }
        }
        Self { cumulative }
    }

    fn sample(&self, rng: &mut impl RngCore) -> Option<usize> {
        let u = unit_f64(rng);
        let idx = self.cumulative.partition_point(|&c| c <= u);
        (idx < self.cumulative.len()).then_some(idx)
    }
}

/// Endless i.i.d. stream of events drawn from a population. Sequence numbers
/// start at 0.
pub struct EventGenerator<'a> {
    population: &'a PopulationSpec,
    sampler: ClassSampler,
    rng: ChaCha8Rng,
    next_seq: u64,
}

impl EventGenerator<'_> {
    /// Draws the next class index (`None` for background) without building an
    /// event.
    pub fn next_class(&mut self) -> Option<usize> {
        self.sampler.sample(&mut self.rng)
    }
}

impl Iterator for EventGenerator<'_> {
    type Item = ConnectionEvent;

    fn next(&mut self) -> Option<ConnectionEvent> {
        let seq = self.next_seq;
        self.next_seq += 1;
        Some(match self.next_class() {
            Some(class) => self.population.event_for_class(class, seq),
            None => ConnectionEvent::new(seq),
        })
    }
}

pub fn generate_stream(population: &PopulationSpec, count: usize) -> Vec<ConnectionEvent> {
    population.generator().take(count).collect()
}

/// Result of [`coverage_probability`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coverage {
    /// Fraction of trials in which every class appeared at least once.
    pub estimate: f64,
    /// Binomial standard error of `estimate`.
    pub std_error: f64,
    /// `1 - sum (1 - p_i)^N`. May be negative, in which case it says nothing.
    pub analytic_bound: f64,
    pub trials: u64,
}

const TRIALS_PER_CHUNK: u64 = 256;

/// Monte Carlo estimate of the probability that `draws` i.i.d. draws from
/// `probs` hit every class at least once.
///
/// Trials are split into fixed chunks, chunk `k` using stream `k` of the
/// seeded generator, so the result does not depend on the thread count.
pub fn coverage_probability(probs: &[f64], draws: u64, trials: u64, seed: u64) -> Coverage {
    let sampler = ClassSampler::new(probs);
    let n = probs.len();
    let chunks = trials.div_ceil(TRIALS_PER_CHUNK);

    let hits: u64 = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let in_chunk = TRIALS_PER_CHUNK.min(trials - chunk * TRIALS_PER_CHUNK);
            let mut seen = vec![false; n];
            let mut hits = 0;
            for _ in 0..in_chunk {
                seen.fill(false);
                let mut missing = n;
                for _ in 0..draws {
                    if missing == 0 {
                        break;
                    }
                    if let Some(i) = sampler.sample(&mut rng) {
                        if !seen[i] {
                            seen[i] = true;
                            missing -= 1;
                        }
                    }
                }
                if missing == 0 {
                    hits += 1;
                }
            }
            hits
        })
        .sum();

    let estimate = if trials == 0 {
        f64::NAN
    } else {
        hits as f64 / trials as f64
    };
    Coverage {
        estimate,
        std_error: (estimate * (1.0 - estimate) / trials as f64).sqrt(),
        analytic_bound: coverage_lower_bound(probs, draws),
        trials,
    }
}

/// `1 - sum (1 - p_i)^N`.
pub fn coverage_lower_bound(probs: &[f64], draws: u64) -> f64 {
    let miss: f64 = probs
        .iter()
        .map(|&p| {
            if draws == 0 {
                1.0
            } else {
                (draws as f64 * (-p).ln_1p()).exp()
            }
        })
        .sum();
    1.0 - miss
}

/// Parameters of the scaled replica of the production experiment: every DB
/// user may connect as a fixed subset of OS users.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub db_users: usize,
    pub os_users: usize,
    pub permitted_per_user: usize,
    pub confidence: f64,
    pub con_min_count: u64,
    /// In-population events streamed after the transition to look for false
    /// positives.
    pub post_transition_events: u64,
    /// Gives up if detection has not started after this many events.
    pub max_events: u64,
}

impl ScenarioConfig {
    /// 120 DB users x 18 permitted OS users (out of 30) = 2160 classes,
    /// 95% confidence, `con_min_count` 1000.
    pub fn production(seed: u64) -> Self {
        Self {
            seed,
            db_users: 120,
            os_users: 30,
            permitted_per_user: 18,
            confidence: 0.95,
            con_min_count: 1000,
            post_transition_events: 20_000,
            max_events: 1_000_000,
        }
    }

    pub fn rule(&self) -> SecurityRule {
        SecurityRule::new(
            "db_user_os_user",
            vec![var("DB_USER"), var("OS_USER")],
            Action::Alert,
        )
        .with_con_min_count(self.con_min_count)
        .with_confidence(self.confidence)
    }

    pub fn db_user(i: usize) -> String {
        format!("db_user_{i:03}")
    }

    pub fn os_user(i: usize) -> String {
        format!("os_user_{i:02}")
    }

    /// DB user `u` may connect as OS users `(u + k) mod os_users` for
    /// `k < permitted_per_user`.
    pub fn population(&self) -> PopulationSpec {
        let tuples = (0..self.db_users)
            .flat_map(|u| {
                (0..self.permitted_per_user)
                    .map(move |k| vec![Self::db_user(u), Self::os_user((u + k) % self.os_users)])
            })
            .collect();
        PopulationSpec::uniform(vec![var("DB_USER"), var("OS_USER")], tuples, self.seed)
            .expect("scenario population is valid")
    }

    /// A (DB user, OS user) pair outside the permitted set.
    pub fn forbidden_pair(&self) -> (String, String) {
        assert!(self.permitted_per_user < self.os_users);
        (Self::db_user(0), Self::os_user(self.os_users - 1))
    }
}

fn var(name: &str) -> VariableName {
    VariableName::new(name).expect("valid variable name")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub seed: u64,
    pub population_size: usize,
    /// `n * ln(n / delta)` at the full population size.
    pub population_threshold: f64,
    pub transitioned: bool,
    #[serde(rename = "N_at_transition")]
    pub observed_at_transition: u64,
    pub n_at_transition: u64,
    /// Non-allow verdicts on permitted traffic after the transition.
    pub false_positive_count: u64,
    /// Every non-allow verdict after the transition, injected pair included.
    pub post_transition_alerts: u64,
    /// Verdicts for the forbidden pair, sent twice.
    pub injected_decisions: Vec<Decision>,
    pub injected_outliers: u64,
    pub final_n: u64,
    #[serde(rename = "final_N")]
    pub final_observed: u64,
}

pub fn run_section4_scenario(seed: u64) -> ScenarioReport {
    run_scenario(&ScenarioConfig::production(seed))
}

/// Streams permitted traffic until the rule detects, keeps streaming to count
/// false positives, then injects a forbidden pair twice.
pub fn run_scenario(config: &ScenarioConfig) -> ScenarioReport {
    let population = config.population();
    let rule = config.rule();
    let policy = Policy {
        extensions: Vec::new(),
        rules: vec![rule.clone()],
    };
    let mut engine = Engine::new(&policy);
    let mut events = population.generator();
    let population_size = population.classes().len();

    let mut report = ScenarioReport {
        seed: config.seed,
        population_size,
        population_threshold: min_observations(population_size as u64, rule.delta())
            .unwrap_or(f64::NAN),
        transitioned: false,
        observed_at_transition: 0,
        n_at_transition: 0,
        false_positive_count: 0,
        post_transition_alerts: 0,
        injected_decisions: Vec::new(),
        injected_outliers: 0,
        final_n: 0,
        final_observed: 0,
    };

    let phase = |engine: &Engine| engine.state(&rule.id).expect("rule").phase();

    for event in events.by_ref().take(config.max_events as usize) {
        let verdicts = engine.dispatch(&event);
        let v = &verdicts[0];
        if v.phase_after == Phase::Detecting {
            report.transitioned = true;
            report.observed_at_transition = v.observed_after;
            report.n_at_transition = v.n_after;
            break;
        }
    }

    if report.transitioned {
        let mut streamed = 0;
        // Keep going past the post-transition budget until the rule is
        // detecting again (a false positive can push it back to learning).
        while streamed < config.post_transition_events || phase(&engine) != Phase::Detecting {
            let event = events.next().expect("endless generator");
            for v in engine.dispatch(&event) {
                if v.is_outlier() {
                    report.false_positive_count += 1;
                }
            }
            streamed += 1;
        }

        let (db_user, os_user) = config.forbidden_pair();
        for _ in 0..2 {
            let seq = events.next().expect("endless generator").seq;
            let event =
                ConnectionEvent::from_pairs(seq, [("DB_USER", db_user.as_str()), ("OS_USER", os_user.as_str())]);
            for v in engine.dispatch(&event) {
                report.injected_decisions.push(v.decision);
                if v.is_outlier() {
                    report.injected_outliers += 1;
                }
            }
        }
        report.post_transition_alerts = report.false_positive_count + report.injected_outliers;
    }

    let state = engine.state(&rule.id).expect("rule");
    report.final_n = state.distinct_count();
    report.final_observed = state.observed_count();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_var_population(probs: &[f64], seed: u64) -> PopulationSpec {
        let classes = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| PopulationClass {
                values: vec![format!("v{i}")],
                p,
            })
            .collect();
        PopulationSpec::new(vec![var("DB_USER")], classes, seed).unwrap()
    }

    #[test]
    fn degenerate_and_empty_streams() {
        let pop = single_var_population(&[1.0], 3);
        let events = generate_stream(&pop, 5);
        assert_eq!(events.len(), 5);
        assert!(events.iter().all(|e| e.values == events[0].values));
        assert_eq!(events.iter().map(|e| e.seq).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
        assert!(generate_stream(&pop, 0).is_empty());
    }

    #[test]
    fn streams_are_reproducible() {
        let pop = single_var_population(&[0.2, 0.3, 0.5], 42);
        assert_eq!(generate_stream(&pop, 500), generate_stream(&pop, 500));
        let other = pop.clone().with_seed(43);
        assert_ne!(generate_stream(&pop, 500), generate_stream(&other, 500));
    }

    // Pins the documented generator: any change to the draw procedure shows up here.
    #[test]
    fn stream_prefix_is_pinned() {
        let pop = single_var_population(&[0.25; 4], 2024);
        let mut direct = ChaCha8Rng::seed_from_u64(2024);
        for event in generate_stream(&pop, 64) {
            let u = (direct.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            let expected = format!("v{}", (u * 4.0) as usize);
            assert_eq!(event.get("DB_USER"), Some(expected.as_str()));
        }
    }

    #[test]
    fn uniform_frequencies_within_five_sigma() {
        let config = ScenarioConfig::production(5);
        let pop = config.population();
        assert_eq!(pop.classes().len(), 2160);
        let mut counts = vec![0u64; 2160];
        let mut generator = pop.generator();
        let draws = 100_000;
        for _ in 0..draws {
            counts[generator.next_class().expect("complete distribution")] += 1;
        }
        let p = 1.0 / 2160.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!((c as f64 - mean).abs() <= 5.0 * sigma, "class {i}: {c}");
        }
    }

    #[test]
    fn background_mass() {
        let pop = single_var_population(&[0.5], 9);
        let events = generate_stream(&pop, 4000);
        let background = events.iter().filter(|e| e.values.is_empty()).count();
        // Binomial(4000, 0.5): mean 2000, sigma 31.6
        assert!((background as i64 - 2000).abs() < 160, "{background}");
    }

    #[test]
    fn population_validation() {
        let ok = |p: f64| PopulationClass {
            values: vec!["a".into()],
            p,
        };
        assert!(matches!(
            PopulationSpec::new(vec![var("A")], vec![ok(0.7), PopulationClass { values: vec!["b".into()], p: 0.4 }], 0),
            Err(PopulationError::MassExceedsOne(_))
        ));
        assert!(matches!(
            PopulationSpec::new(vec![var("A")], vec![ok(0.3), ok(0.3)], 0),
            Err(PopulationError::DuplicateClass(1))
        ));
        assert!(matches!(
            PopulationSpec::new(vec![var("A")], vec![ok(-0.1)], 0),
            Err(PopulationError::BadProbability { .. })
        ));
        assert!(matches!(
            PopulationSpec::new(vec![var("A"), var("B")], vec![ok(0.1)], 0),
            Err(PopulationError::Arity { .. })
        ));
        assert!(matches!(
            PopulationSpec::new(vec![var("A"), var("A")], vec![], 0),
            Err(PopulationError::DuplicateVariable(_))
        ));
        assert!(matches!(
            PopulationSpec::from_json(r#"{"variables":["bad"],"classes":[],"seed":1}"#),
            Err(PopulationError::BadVariable(_))
        ));
        assert!(matches!(
            PopulationSpec::from_json("{"),
            Err(PopulationError::Json(_))
        ));
    }

    #[test]
    fn population_json_round_trip() {
        let text = r#"{"variables":["DB_USER","OS_USER"],"classes":[{"values":["scott","oracle"],"p":0.75},{"values":["sys","root"],"p":0.25}],"seed":17}"#;
        let pop = PopulationSpec::from_json(text).unwrap();
        assert_eq!(pop.seed, 17);
        assert_eq!(PopulationSpec::from_json(&pop.to_json()).unwrap(), pop);
    }

    #[test]
    fn coverage_trivial_case() {
        let c = coverage_probability(&[1.0], 1, 100, 0);
        assert_eq!(c.estimate, 1.0);
        assert_eq!(c.analytic_bound, 1.0);
        assert_eq!(coverage_probability(&[1.0], 0, 10, 0).estimate, 0.0);
    }

    #[test]
    fn coverage_fifty_uniform_at_threshold() {
        let probs = vec![1.0 / 50.0; 50];
        let draws = min_observations(50, 0.05).unwrap().ceil() as u64;
        assert_eq!(draws, 346);
        let c = coverage_probability(&probs, draws, 10_000, 1);
        let sigma = (0.05f64 * 0.95 / 10_000.0).sqrt();
        assert!(c.estimate >= 0.95 - 3.0 * sigma, "{c:?}");
        // 1 - 50 * 0.98^346 = 0.953954 (mpmath)
        assert!((c.analytic_bound - 0.9539539698064134).abs() < 1e-9);
        assert!(c.analytic_bound <= c.estimate + 3.0 * c.std_error);
    }

    #[test]
    fn coverage_two_classes_matches_inclusion_exclusion() {
        let exact = 1.0 - 0.1f64.powi(10) - 0.9f64.powi(10);
        assert!((exact - 0.6513215598).abs() < 1e-10);
        let c = coverage_probability(&[0.9, 0.1], 10, 20_000, 3);
        assert!((c.estimate - exact).abs() <= 4.0 * c.std_error, "{c:?}");
        assert!((c.analytic_bound - exact).abs() < 1e-12);
    }

    #[test]
    fn coverage_is_deterministic() {
        let probs = vec![0.1; 10];
        assert_eq!(
            coverage_probability(&probs, 30, 1000, 8),
            coverage_probability(&probs, 30, 1000, 8)
        );
    }

    #[test]
    fn scenario_single_run() {
        let report = run_section4_scenario(1);
        assert!(report.transitioned);
        assert_eq!(report.population_size, 2160);
        assert!((report.population_threshold - 23054.966872341556).abs() < 1e-6);
        if report.n_at_transition == 2160 {
            assert_eq!(report.observed_at_transition, 23055);
        } else {
            assert!(report.observed_at_transition < 23055);
        }
        assert_eq!(report.injected_decisions.len(), 2);
        assert_eq!(report.injected_decisions[0], Decision::Alert);
        assert_eq!(report.injected_decisions[1], Decision::Allow);
        assert_eq!(report.injected_outliers, 1);
    }

    #[test]
    fn scenario_shape() {
        let config = ScenarioConfig::production(0);
        let (db, os) = config.forbidden_pair();
        let pop = config.population();
        assert!(!pop.classes().iter().any(|c| c.values == [db.clone(), os.clone()]));
        let users: HashSet<_> = pop.classes().iter().map(|c| &c.values[0]).collect();
        let os_users: HashSet<_> = pop.classes().iter().map(|c| &c.values[1]).collect();
        assert_eq!((users.len(), os_users.len()), (120, 30));
    }
}
