//! The `run` command: ingest JSONL events, dispatch them, write verdicts.
//!
//! A reader thread owns the input and forwards raw lines over a channel so the
//! main loop can notice termination signals while the input is idle.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use outlierwatch::{memory_estimate, min_observations, ConnectionEvent, Engine, Snapshot};
use serde_json::json;

use crate::commands::load_policy;
use crate::{exit, Failure, RunArgs};

enum Input {
    Line(Vec<u8>),
    Eof,
    Failed(io::Error),
}

fn pump(reader: impl BufRead, tx: &SyncSender<Input>) -> io::Result<bool> {
    let mut reader = reader;
    loop {
        let mut buf = Vec::new();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(true);
        }
        if tx.send(Input::Line(buf)).is_err() {
            return Ok(false);
        }
    }
}

fn spawn_reader(args: &RunArgs) -> Result<Receiver<Input>, Failure> {
    let (tx, rx) = mpsc::sync_channel::<Input>(4096);

    if let Some(path) = &args.input {
        let file = File::open(path).map_err(|e| {
            Failure::new(exit::INPUT, format!("cannot open input {}: {e}", path.display()))
        })?;
        thread::spawn(move || {
            let msg = match pump(BufReader::new(file), &tx) {
                Ok(_) => Input::Eof,
                Err(e) => Input::Failed(e),
            };
            let _ = tx.send(msg);
        });
    } else if args.stdin {
        thread::spawn(move || {
            let msg = match pump(io::stdin().lock(), &tx) {
                Ok(_) => Input::Eof,
                Err(e) => Input::Failed(e),
            };
            let _ = tx.send(msg);
        });
    } else if let Some(addr) = &args.listen {
        let listener = TcpListener::bind(addr)
            .map_err(|e| Failure::new(exit::INPUT, format!("cannot listen on {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| Failure::new(exit::INPUT, e.to_string()))?;
        eprintln!("{}", json!({ "type": "listening", "addr": local.to_string() }));
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                match pump(BufReader::new(stream), &tx) {
                    Ok(true) | Err(_) => continue,
                    Ok(false) => break,
                }
            }
        });
    }
    Ok(rx)
}

/// Write-then-rename so a crash never leaves a truncated snapshot.
fn save_snapshot(engine: &Engine, path: &Path) -> Result<(), Failure> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let doc = engine.snapshot().to_json();
    std::fs::write(&tmp, doc)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| {
            Failure::new(
                exit::FAILURE,
                format!("cannot write snapshot {}: {e}", path.display()),
            )
        })
}

struct Counters {
    events: u64,
    skipped: u64,
    verdicts: u64,
    outliers: u64,
    lines: u64,
}

fn emit_metrics(engine: &Engine, counters: &Counters, started: Instant) {
    let elapsed = started.elapsed().as_secs_f64();
    let rate = if elapsed > 0.0 {
        counters.events as f64 / elapsed
    } else {
        0.0
    };
    for (rule, state) in engine.states() {
        let threshold = min_observations(state.distinct_count(), rule.delta()).ok();
        eprintln!(
            "{}",
            json!({
                "type": "metrics",
                "events": counters.events,
                "skipped": counters.skipped,
                "rule": rule.id,
                "phase": state.phase(),
                "n": state.distinct_count(),
                "N": state.observed_count(),
                "threshold": threshold,
                "memory_bytes": memory_estimate(state),
                "events_per_sec": rate,
            })
        );
    }
}

struct Runner<'a, W: Write> {
    args: &'a RunArgs,
    engine: Engine,
    out: W,
    counters: Counters,
    started: Instant,
}

impl<W: Write> Runner<'_, W> {
    fn skip(&mut self, error: String) {
        self.counters.skipped += 1;
        eprintln!(
            "{}",
            json!({"type": "skipped", "line": self.counters.lines, "error": error})
        );
    }

    fn handle_line(&mut self, raw: &[u8]) -> Result<(), Failure> {
        self.counters.lines += 1;
        let line = match std::str::from_utf8(raw) {
            Ok(s) => s.trim(),
            Err(e) => {
                self.skip(e.to_string());
                return Ok(());
            }
        };
        if line.is_empty() {
            return Ok(());
        }
        let event = match ConnectionEvent::from_json_line(line, self.counters.events) {
            Ok(event) => event,
            Err(e) => {
                self.skip(e.to_string());
                return Ok(());
            }
        };
        self.counters.events += 1;
        for verdict in self.engine.dispatch(&event) {
            self.counters.verdicts += 1;
            if verdict.is_outlier() {
                self.counters.outliers += 1;
            } else if self.args.alerts_only {
                continue;
            }
            writeln!(self.out, "{}", verdict.to_json_line()).map_err(write_err)?;
        }

        let events = self.counters.events;
        if let (Some(path), Some(every)) = (&self.args.snapshot, self.args.snapshot_every) {
            if events.is_multiple_of(every) {
                self.out.flush().map_err(write_err)?;
                save_snapshot(&self.engine, path)?;
            }
        }
        if self.args.metrics_every.is_some_and(|every| events.is_multiple_of(every)) {
            emit_metrics(&self.engine, &self.counters, self.started);
        }
        Ok(())
    }

    fn finish(mut self) -> Result<(), Failure> {
        self.out.flush().map_err(write_err)?;
        if let Some(path) = &self.args.snapshot {
            save_snapshot(&self.engine, path)?;
        }
        if self.args.metrics_every.is_some() {
            emit_metrics(&self.engine, &self.counters, self.started);
        }
        let c = &self.counters;
        eprintln!(
            "{}",
            json!({
                "type": "summary",
                "events": c.events,
                "skipped": c.skipped,
                "verdicts": c.verdicts,
                "outliers": c.outliers,
            })
        );
        Ok(())
    }
}

fn write_err(e: io::Error) -> Failure {
    Failure::new(exit::FAILURE, format!("cannot write verdicts: {e}"))
}

pub(crate) fn cmd_run(args: &RunArgs) -> Result<u8, Failure> {
    let policy = load_policy(&args.policy)?;

    let engine = match &args.snapshot {
        Some(path) if path.exists() => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::new(exit::CONFIG, format!("cannot read snapshot {}: {e}", path.display()))
            })?;
            Snapshot::from_json(&text)
                .and_then(|snap| Engine::restore(&policy, snap))
                .map_err(|e| Failure::new(exit::CONFIG, format!("{}: {e}", path.display())))?
        }
        _ => Engine::new(&policy),
    };

    let shutdown = Arc::new(AtomicBool::new(false));
    {
        let shutdown = Arc::clone(&shutdown);
        ctrlc::set_handler(move || shutdown.store(true, Ordering::SeqCst))
            .map_err(|e| Failure::new(exit::FAILURE, format!("cannot install signal handler: {e}")))?;
    }

    let rx = spawn_reader(args)?;
    let stdout = io::stdout();
    let mut runner = Runner {
        args,
        engine: engine.with_workers(args.workers),
        out: BufWriter::new(stdout.lock()),
        counters: Counters {
            events: 0,
            skipped: 0,
            verdicts: 0,
            outliers: 0,
            lines: 0,
        },
        started: Instant::now(),
    };
    let mut input_error = None;

    'outer: loop {
        let mut next = match rx.recv_timeout(Duration::from_millis(100)) {
            Ok(msg) => Some(msg),
            Err(RecvTimeoutError::Timeout) if shutdown.load(Ordering::SeqCst) => break,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        // Drain what is already queued, then flush once.
        while let Some(msg) = next.take() {
            match msg {
                Input::Eof => break 'outer,
                Input::Failed(e) => {
                    input_error = Some(e);
                    break 'outer;
                }
                Input::Line(raw) => runner.handle_line(&raw)?,
            }
            if shutdown.load(Ordering::SeqCst) {
                break 'outer;
            }
            next = rx.try_recv().ok();
        }
        runner.out.flush().map_err(write_err)?;
    }

    runner.finish()?;
    match input_error {
        Some(e) => Err(Failure::new(exit::INPUT, format!("input read failed: {e}"))),
        None => Ok(0),
    }
}
