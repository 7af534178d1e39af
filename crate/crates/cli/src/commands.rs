use std::io::{self, BufWriter, Write};
use std::path::Path;

use outlierwatch::{
    coverage_probability, min_observations, parse_policy, run_section4_scenario, Policy,
    PopulationSpec, Snapshot,
};
use serde_json::json;

use crate::exit;
use crate::Failure;

pub(crate) fn load_policy(path: &Path) -> Result<Policy, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(exit::CONFIG, format!("cannot read policy {}: {e}", path.display())))?;
    parse_policy(&text).map_err(|e| Failure::new(exit::CONFIG, format!("{}:{e}", path.display())))
}

fn write_failure(e: io::Error) -> Failure {
    Failure::new(exit::FAILURE, format!("write failed: {e}"))
}

/// Prints one line to stdout; a closed pipe is not an error.
fn print_line(line: &str) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    match writeln!(out, "{line}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(write_failure(e)),
        _ => Ok(()),
    }
}

pub(crate) fn cmd_simulate(population: &Path, count: u64, seed: Option<u64>) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(population).map_err(|e| {
        Failure::new(
            exit::CONFIG,
            format!("cannot read population {}: {e}", population.display()),
        )
    })?;
    let mut spec = PopulationSpec::from_json(&text)
        .map_err(|e| Failure::new(exit::CONFIG, format!("{}: {e}", population.display())))?;
    if let Some(seed) = seed {
        spec = spec.with_seed(seed);
    }
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for event in spec.generator().take(count as usize) {
        if let Err(e) = writeln!(out, "{}", event.to_json_line()) {
            if e.kind() == io::ErrorKind::BrokenPipe {
                return Ok(0);
            }
            return Err(write_failure(e));
        }
    }
    out.flush().map_err(write_failure)?;
    Ok(0)
}

pub(crate) fn cmd_validate_bound(n: u64, delta: f64, trials: u64, seed: u64) -> Result<u8, Failure> {
    let threshold = min_observations(n, delta).map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    if trials == 0 {
        return Err(Failure::new(exit::CONFIG, "trials must be at least 1"));
    }
    let draws = threshold.ceil() as u64;
    let probs = vec![1.0 / n as f64; n as usize];
    let coverage = coverage_probability(&probs, draws, trials, seed);
    let sigma = (delta * (1.0 - delta) / trials as f64).sqrt();
    let required = 1.0 - delta - 3.0 * sigma;
    let pass = coverage.estimate >= required;
    let report = json!({
        "n": n,
        "delta": delta,
        "threshold": draws,
        "trials": trials,
        "coverage": coverage.estimate,
        "analytic_bound": coverage.analytic_bound,
        "sigma": sigma,
        "required": required,
        "result": if pass { "PASS" } else { "FAIL" },
    });
    print_line(&report.to_string())?;
    Ok(if pass { 0 } else { exit::FAILURE })
}

pub(crate) fn cmd_inspect_snapshot(file: &Path, policy: Option<&Path>) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(file)
        .map_err(|e| Failure::new(exit::INPUT, format!("cannot read snapshot {}: {e}", file.display())))?;
    let invalid = |e: outlierwatch::SnapshotError| {
        Failure::new(exit::CONFIG, format!("{}: {e}", file.display()))
    };
    let snapshot = Snapshot::from_json(&text).map_err(invalid)?;
    for rule in &snapshot.rules {
        rule.check_structure().map_err(invalid)?;
    }
    let policy = policy.map(load_policy).transpose()?;
    if let Some(policy) = &policy {
        snapshot.clone().into_states(policy).map_err(invalid)?;
    }

    let rules: Vec<_> = snapshot
        .rules
        .iter()
        .map(|r| {
            let delta = policy
                .as_ref()
                .and_then(|p| p.rule(&r.rule_id))
                .map(|rule| rule.delta());
            let threshold = delta.and_then(|d| min_observations(r.n, d).ok());
            json!({
                "rule_id": r.rule_id,
                "n": r.n,
                "N": r.observed,
                "phase": r.phase,
                "memory_bytes": outlierwatch::baseline::HASH_BYTES * r.n + outlierwatch::baseline::HEADER_BYTES,
                "threshold": threshold,
                "min_hash": r.hashes.first(),
                "max_hash": r.hashes.last(),
            })
        })
        .collect();
    let summary = json!({
        "file": file.display().to_string(),
        "version": snapshot.version,
        "checked_against_policy": policy.is_some(),
        "valid": true,
        "rules": rules,
    });
    print_line(&serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(0)
}

pub(crate) fn cmd_scenario(seed: u64) -> Result<u8, Failure> {
    let report = run_section4_scenario(seed);
    print_line(&serde_json::to_string(&report).expect("report serializes"))?;
    Ok(0)
}
