//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use outlierwatch::simulator::ScenarioConfig;
use outlierwatch::{
    coverage_probability, evaluate_phase, generate_stream, hash_tuple, memory_estimate,
    min_observations, murmur3_x64_128, parse_policy, run_section4_scenario, serialize_tuple,
    Action, BaselineState, ConnectionEvent, Decision, Engine, Phase, PopulationClass,
    PopulationSpec, SecurityRule, Snapshot, TupleHash, VariableName,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn var(s: &str) -> VariableName {
    VariableName::new(s).unwrap()
}

fn ac1_memory_formula() -> Outcome {
    let state = BaselineState::from_hashes((0..10_000).map(TupleHash), 10_000).unwrap();
    let bytes = memory_estimate(&state);
    check(bytes == 80_024, format!("memory_estimate(n=10000) = {bytes} (want 80024)"))
}

fn ac2_threshold_arithmetic() -> Outcome {
    let t = min_observations(2160, 0.05).map_err(|e| e.to_string())?;
    let rule = SecurityRule::new("r", vec![var("DB_USER")], Action::Alert)
        .with_con_min_count(1000)
        .with_confidence(0.95);
    let state = BaselineState::from_hashes((0..2160).map(TupleHash), 23_100).unwrap();
    let phase = evaluate_phase(&state, &rule);
    check(
        (23_054.9..=23_055.1).contains(&t) && phase == Phase::Detecting,
        format!("min_observations(2160, 0.05) = {t:.4}; phase at n=2160, N=23100: {phase}"),
    )
}

fn ac3_bound_validation() -> Outcome {
    let start = Instant::now();
    let trials = 10_000u64;
    let mut worst = f64::INFINITY;
    let mut failures = Vec::new();
    for n in [10u64, 50, 200] {
        for delta in [0.1, 0.05, 0.01] {
            let draws = min_observations(n, delta).unwrap().ceil() as u64;
            let probs = vec![1.0 / n as f64; n as usize];
            let cov = coverage_probability(&probs, draws, trials, n * 1000 + (delta * 1000.0) as u64);
            let sigma = (delta * (1.0 - delta) / trials as f64).sqrt();
            let floor = (1.0 - delta) - 3.0 * sigma;
            worst = worst.min(cov.estimate - floor);
            if cov.estimate < floor {
                failures.push(format!("n={n} delta={delta} N={draws}: {:.4} < {floor:.4}", cov.estimate));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "9 grid points, min margin over (1-delta)-3sigma = {worst:.4}, {:.1}s{}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

fn ac4_production_replica() -> Outcome {
    let start = Instant::now();
    let reports: Vec<_> = (1..=20).map(run_section4_scenario).collect();
    let elapsed = start.elapsed();

    let mut transitions: Vec<u64> = reports.iter().map(|r| r.observed_at_transition).collect();
    transitions.sort_unstable();
    let median = (transitions[9] + transitions[10]) as f64 / 2.0;
    let full = reports.iter().filter(|r| r.n_at_transition == 2160).count();
    let injected_ok = reports.iter().filter(|r| r.transitioned && r.injected_outliers == 1).count();
    let fp_runs = reports.iter().filter(|r| r.false_positive_count > 0).count();

    let a = (23_056.0..=24_500.0).contains(&median);
    let b = full >= 18;
    let c = injected_ok == 20;
    let d = fp_runs <= 3;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    check(
        a && b && c && d && elapsed < Duration::from_secs(120),
        format!(
            "(a) median N_at_transition = {median} in [23056, 24500]: {}; (b) n=2160 in {full}/20: {}; \
             (c) injected pair fired exactly once in {injected_ok}/20: {}; (d) runs with false positives {fp_runs}/20: {}; \
             transitions {:?}; {:.1}s",
            mark(a),
            mark(b),
            mark(c),
            mark(d),
            transitions,
            elapsed.as_secs_f64()
        ),
    )
}

/// Random population over at most 30 classes of (DB_USER, OS_USER).
fn random_population(rng: &mut StdRng) -> PopulationSpec {
    let classes = rng.gen_range(1..=30);
    let weights: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let classes = weights
        .iter()
        .enumerate()
        .map(|(i, w)| PopulationClass {
            values: vec![format!("user{}", i % 7), format!("os{}", i / 7)],
            p: w / total,
        })
        .collect();
    PopulationSpec::new(vec![var("DB_USER"), var("OS_USER")], classes, rng.gen()).unwrap()
}

fn random_rule(rng: &mut StdRng) -> SecurityRule {
    let vars = match rng.gen_range(0..3) {
        0 => vec![var("DB_USER")],
        1 => vec![var("OS_USER"), var("DB_USER")],
        _ => vec![var("DB_USER"), var("OS_USER")],
    };
    let action = if rng.gen() { Action::Alert } else { Action::Terminate };
    SecurityRule::new("r", vars, action)
        .with_con_min_count(rng.gen_range(0..300))
        .with_confidence(rng.gen_range(0.5..0.99))
}

/// Reference: tuples kept as plain strings in a Vec, threshold by formula.
struct Reference {
    seen: Vec<Vec<Option<String>>>,
    observed: u64,
    detecting: bool,
}

impl Reference {
    fn step(&mut self, rule: &SecurityRule, event: &ConnectionEvent) -> (Decision, bool) {
        let tuple: Vec<Option<String>> = rule
            .outlier_vars
            .iter()
            .map(|v| event.get(v.as_str()).map(str::to_owned))
            .collect();
        self.observed += 1;
        let was_new = !self.seen.contains(&tuple);
        if was_new {
            self.seen.push(tuple);
        }
        let decision = match (self.detecting && was_new, rule.action) {
            (false, _) => Decision::Allow,
            (true, Action::Alert) => Decision::Alert,
            (true, Action::Terminate) => Decision::Terminate,
        };
        let n = self.seen.len() as f64;
        let delta = 1.0 - rule.confidence;
        self.detecting = n >= 1.0
            && self.observed >= rule.con_min_count
            && self.observed as f64 > n * (n / delta).ln();
        (decision, was_new)
    }
}

fn ac5_algorithm_conformance() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(5);
    let mut discrepancies = 0u64;
    let mut events_total = 0u64;
    let mut outliers = 0u64;
    for _ in 0..1000 {
        let pop = random_population(&mut rng);
        let rule = random_rule(&mut rng);
        let count = rng.gen_range(0..=2000);
        let mut state = BaselineState::new();
        let mut reference = Reference {
            seen: Vec::new(),
            observed: 0,
            detecting: false,
        };
        let stream = generate_stream(&pop, count);
        let mut hashes = Vec::new();
        for event in &stream {
            let v = outlierwatch::process_event(&rule, &mut state, event);
            let (decision, was_new) = reference.step(&rule, event);
            if v.decision != decision
                || v.was_new != was_new
                || v.n_after != reference.seen.len() as u64
                || v.observed_after != reference.observed
                || (v.phase_after == Phase::Detecting) != reference.detecting
            {
                discrepancies += 1;
            }
            outliers += v.is_outlier() as u64;
            hashes.push(v.hash);
        }
        if !state.is_consistent() || hashes.iter().any(|h| !state.contains(*h)) {
            discrepancies += 1;
        }
        events_total += stream.len() as u64;
    }
    check(
        discrepancies == 0 && start.elapsed() < Duration::from_secs(60),
        format!(
            "1000 streams, {events_total} events, {outliers} outlier verdicts, {discrepancies} discrepancies, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn ac6_no_learning_phase_alerts() -> Outcome {
    let mut rng = StdRng::seed_from_u64(6);
    let mut processed = 0u64;
    let mut violations = 0u64;
    let mut outliers = 0u64;
    while processed < 200_000 {
        let pop = random_population(&mut rng);
        let policy = parse_policy(&format!(
            "rule a {{ outlier: distinct($(DB_USER)$) con_min_count: {} confidence: {} action: alert }}
             rule b {{ outlier: distinct($(DB_USER)$, $(OS_USER)$) con_min_count: {} action: terminate }}",
            rng.gen_range(0..100),
            rng.gen_range(0.5..0.99),
            rng.gen_range(0..100),
        ))
        .unwrap();
        let mut engine = Engine::new(&policy);
        // Shift the population halfway through so that new classes show up
        // after detection has begun.
        let first = generate_stream(&pop, rng.gen_range(100..1500));
        let shifted = PopulationSpec::new(
            pop.variables().to_vec(),
            pop.classes()
                .iter()
                .map(|c| PopulationClass {
                    values: vec![format!("{}x", c.values[0]), c.values[1].clone()],
                    p: c.p,
                })
                .collect(),
            pop.seed ^ 1,
        )
        .unwrap();
        let second = generate_stream(&shifted, rng.gen_range(100..1500));
        for event in first.iter().chain(&second) {
            for v in engine.dispatch(event) {
                processed += 1;
                if v.is_outlier() {
                    outliers += 1;
                    if v.phase_before == Phase::Learning || !v.was_new {
                        violations += 1;
                    }
                }
            }
        }
    }
    check(
        violations == 0 && processed >= 100_000 && outliers > 0,
        format!("{processed} verdicts, {outliers} outliers, {violations} with phase_before=learning"),
    )
}

fn ac7_lookup_bound_and_latency() -> Outcome {
    let mut rng = StdRng::seed_from_u64(7);
    let mut notes = Vec::new();
    let mut ok = true;
    for n in [1_000u64, 10_000, 100_000] {
        let state = BaselineState::from_hashes((0..n).map(|_| TupleHash(rng.gen())), n).unwrap();
        let n = state.distinct_count();
        let bound = (n as f64).log2().floor() as u32 + 1;
        let mut max = 0;
        for i in 0..20_000 {
            let probe = if i % 2 == 0 {
                state.hashes()[rng.gen_range(0..n as usize)]
            } else {
                TupleHash(rng.gen())
            };
            max = max.max(state.contains_counted(probe).1);
        }
        ok &= max <= bound;
        notes.push(format!("n={n}: max {max} <= {bound}"));
    }

    // Latency at n = 100k: one rule, baseline of 100k users, in detection.
    let policy = parse_policy("rule users { outlier: distinct($(DB_USER)$) action: alert }").unwrap();
    let rule = &policy.rules[0];
    let user = |i: u64| ConnectionEvent::from_pairs(0, [("DB_USER", format!("user{i}").as_str())]);
    let hashes = (0..100_000).map(|i| hash_tuple(&serialize_tuple(rule, &user(i))));
    let state = BaselineState::from_hashes(hashes, 10_000_000).unwrap();
    let mut engine = Engine::from_parts(&policy, vec![state]);
    let stream: Vec<ConnectionEvent> = (0..50_000u64)
        .map(|seq| {
            let i = if rng.gen_bool(0.01) { 1_000_000 + seq } else { rng.gen_range(0..100_000) };
            let mut e = user(i);
            e.seq = seq;
            e
        })
        .collect();
    let mut samples = Vec::with_capacity(stream.len());
    for event in &stream {
        let t = Instant::now();
        let verdicts = engine.dispatch(event);
        samples.push(t.elapsed());
        std::hint::black_box(verdicts);
    }
    samples.sort_unstable();
    let p99 = samples[samples.len() * 99 / 100];
    ok &= p99 < Duration::from_micros(100);
    notes.push(format!("p99 per-event at n=100k: {:.1}us", p99.as_secs_f64() * 1e6));
    check(ok, notes.join("; "))
}

fn replica_stream() -> Vec<ConnectionEvent> {
    let config = ScenarioConfig::production(8);
    let pop = config.population();
    let (db, os) = config.forbidden_pair();
    let mut events = generate_stream(&pop, 40_000);
    for (k, at) in [5_000usize, 24_000, 30_000, 36_000].into_iter().enumerate() {
        let mut e = events[at].clone();
        e.values.insert("DB_USER".into(), db.clone());
        e.values.insert("OS_USER".into(), format!("{os}_{k}"));
        events[at] = e;
    }
    events
}

fn replica_policy() -> outlierwatch::Policy {
    parse_policy(
        r#"
        rule db_user_os_user { outlier: distinct($(DB_USER)$, $(OS_USER)$) action: alert }
        rule os_user { outlier: distinct($(OS_USER)$) con_min_count: 100 action: terminate }
        rule user7 { match: DB_USER == "db_user_007" outlier: distinct($(OS_USER)$) con_min_count: 50 confidence: 0.9 action: alert }
        rule os_then_db { outlier: distinct($(OS_USER)$, $(DB_USER)$) confidence: 0.99 action: terminate }
        "#,
    )
    .unwrap()
}

fn run_lines(engine: &mut Engine, events: &[ConnectionEvent]) -> Vec<String> {
    events
        .iter()
        .flat_map(|e| engine.dispatch(e))
        .map(|v| v.to_json_line())
        .collect()
}

fn ac8_determinism_and_snapshots() -> Outcome {
    let policy = replica_policy();
    let events = replica_stream();

    let mut whole = Engine::new(&policy);
    let serial = run_lines(&mut whole, &events);
    let final_doc = whole.snapshot().to_json();
    let parallel = run_lines(&mut Engine::new(&policy).with_workers(8), &events);
    let outliers = serial.iter().filter(|l| !l.contains(r#""decision":"allow""#)).count();
    let same_workers = serial == parallel;

    let mut same_after_restore = true;
    for cut in [1_000usize, 23_000, 31_000] {
        let mut first = Engine::new(&policy);
        let head = run_lines(&mut first, &events[..cut]);
        let doc = first.snapshot().to_json();
        let mut resumed = Engine::restore(&policy, Snapshot::from_json(&doc).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?
            .with_workers(8);
        let tail = run_lines(&mut resumed, &events[cut..]);
        same_after_restore &= head.len() + tail.len() == serial.len()
            && head.iter().chain(&tail).eq(serial.iter());
        same_after_restore &= resumed.snapshot().to_json() == final_doc;
    }

    // Full-scale state round-trip.
    let config = ScenarioConfig::production(8);
    let single = outlierwatch::Policy {
        extensions: vec![],
        rules: vec![config.rule()],
    };
    let mut engine = Engine::new(&single);
    for e in config.population().generator().take(23_100) {
        engine.dispatch(&e);
    }
    let snap = engine.snapshot();
    let r = &snap.rules[0];
    let scale_ok = r.phase == Phase::Detecting && r.observed == 23_100 && r.n >= 2_159;
    let restored = Engine::restore(&single, Snapshot::from_json(&snap.to_json()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let round_trip = restored.snapshot() == snap;

    check(
        same_workers && same_after_restore && scale_ok && round_trip && outliers > 0,
        format!(
            "{} verdicts ({outliers} outliers): workers 1 vs 8 identical: {same_workers}; \
             mid-stream restore identical: {same_after_restore}; n={} N={} {} round-trip: {round_trip}",
            serial.len(),
            r.n,
            r.observed,
            r.phase
        ),
    )
}

fn ac9_hash_stability() -> Outcome {
    let vectors: [(&[u8], u64); 4] = [
        (b"", 0),
        (b"DB_USER=\x01scott\x1F", 0xdcb0ba1607f2cde0),
        (b"DB_USER=\x00\x1F", 0x7869c989d986111f),
        (b"The quick brown fox jumps over the lazy dog", 0xe34bbc7bbc071b6c),
    ];
    let mut mismatches = Vec::new();
    for (input, expected) in vectors {
        let got = hash_tuple(input).0;
        if got != expected {
            mismatches.push(format!("{input:?}: {got:016x} != {expected:016x}"));
        }
    }
    let seeded = murmur3_x64_128(b"hello", 42);
    if seeded != (0xc4b8b3c960af6f08, 0x2334b875b0efbc7a) {
        mismatches.push(format!("seed 42 digest {seeded:x?}"));
    }
    check(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "5 reference vectors match".to_owned()
        } else {
            mismatches.join("; ")
        },
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1 memory formula", ac1_memory_formula),
        ("AC2 threshold arithmetic", ac2_threshold_arithmetic),
        ("AC3 bound validation", ac3_bound_validation),
        ("AC4 production replica", ac4_production_replica),
        ("AC5 Algorithm conformance", ac5_algorithm_conformance),
        ("AC6 no learning-phase alerts", ac6_no_learning_phase_alerts),
        ("AC7 lookup bound and latency", ac7_lookup_bound_and_latency),
        ("AC8 determinism and snapshots", ac8_determinism_and_snapshots),
        ("AC9 hash stability", ac9_hash_stability),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(run) {
            Ok(Ok(msg)) => println!("PASS  {name}: {msg}"),
            Ok(Err(msg)) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL  {name}: panicked");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
