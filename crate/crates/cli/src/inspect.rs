//! Reports over an `events.jsonl` log, cross-checked against `metrics.csv`
//! when one sits next to it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hmpc_core::sim::metrics::CSV_HEADER;
use hmpc_core::sim::LogEvent;
use hmpc_core::{Amount, ParticipantId};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InspectError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("log has no setup record")]
    NoSetup,
    #[error("participant {0} is in no hyperedge")]
    UnknownParticipant(u32),
}

pub struct Report {
    pub text: String,
    /// False if a root breaks conservation or metrics.csv disagrees.
    pub consistent: bool,
}

#[derive(Default)]
struct Tally {
    attempted: u64,
    succeeded: u64,
    reasons: BTreeMap<String, u64>,
}

struct RootRow {
    edge: u32,
    sequence: u64,
    batch: u64,
    attempt: u32,
    included: u64,
    released: u64,
    expired: u64,
    balances: Vec<Amount>,
    total: u128,
    skewness: f64,
}

pub fn inspect(path: &Path, root: Option<u64>, participant: Option<u32>) -> Result<Report, InspectError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| InspectError::Io { path: path.display().to_string(), source })?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: LogEvent = serde_json::from_str(line).map_err(|source| InspectError::Parse { line: i + 1, source })?;
        events.push(e);
    }
    let Some(LogEvent::Setup { edges, initial_balance, .. }) = events.first().cloned() else {
        return Err(InspectError::NoSetup);
    };

    let mut roots = Vec::new();
    let mut failed_attempts = Vec::new();
    let mut batches: BTreeMap<u64, Tally> = BTreeMap::new();
    let mut evidence = Vec::new();
    for e in &events {
        match e {
            LogEvent::Root {
                edge,
                sequence,
                batch,
                attempt,
                included,
                released,
                expired,
                balances,
                total,
                skewness,
                ..
            } => {
                roots.push(RootRow {
                    edge: edge.0,
                    sequence: *sequence,
                    batch: *batch,
                    attempt: *attempt,
                    included: *included,
                    released: *released,
                    expired: *expired,
                    balances: balances.clone(),
                    total: *total,
                    skewness: *skewness,
                });
            }
            LogEvent::AttemptFailed { edge, sequence, attempt, proposals, best_signatures, .. } => {
                failed_attempts.push((edge.0, *sequence, *attempt, *proposals, *best_signatures));
            }
            LogEvent::BatchStart { batch, .. } => {
                batches.entry(*batch).or_default();
            }
            LogEvent::Intent { batch, reason, .. } => {
                let t = batches.entry(*batch).or_default();
                t.attempted += 1;
                match reason {
                    None => t.succeeded += 1,
                    Some(r) => *t.reasons.entry(r.clone()).or_insert(0) += 1,
                }
            }
            LogEvent::Evidence { edge, accused, kind, detector, .. } => {
                evidence.push(format!(
                    "evidence edge={} accused={} kind={kind} detector={}",
                    edge.0, accused.0, detector.0
                ));
            }
            _ => {}
        }
    }

    // Root index of a batch: the first hyperedge's latest root at its end.
    let mut root_index: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last = 0;
    for b in batches.keys() {
        for r in roots.iter().filter(|r| r.edge == 0 && r.batch == *b) {
            last = last.max(r.sequence);
        }
        root_index.insert(*b, last);
    }

    let mut out = String::new();
    let mut consistent = true;
    for r in &roots {
        let funded = initial_balance as u128 * edges[r.edge as usize].len() as u128;
        if r.total != funded || r.balances.iter().map(|b| *b as u128).sum::<u128>() != r.total {
            consistent = false;
            writeln!(out, "conservation broken: edge={} root={} total={} funded={funded}", r.edge, r.sequence, r.total)
                .unwrap();
        }
    }

    if let Some(pid) = participant {
        let p = ParticipantId(pid);
        let homes: Vec<(usize, usize)> = edges
            .iter()
            .enumerate()
            .filter_map(|(e, roster)| roster.iter().position(|q| *q == p).map(|i| (e, i)))
            .collect();
        if homes.is_empty() {
            return Err(InspectError::UnknownParticipant(pid));
        }
        writeln!(out, "participant {pid}").unwrap();
        writeln!(out, "edge,root,batch,balance").unwrap();
        for r in roots.iter().filter(|r| root.is_none_or(|s| r.sequence == s)) {
            if let Some((_, i)) = homes.iter().find(|(e, _)| *e == r.edge as usize) {
                writeln!(out, "{},{},{},{}", r.edge, r.sequence, r.batch, r.balances[*i]).unwrap();
            }
        }
        return Ok(Report { text: out, consistent });
    }

    let shown_batches: Vec<u64> = match root {
        None => batches.keys().copied().collect(),
        Some(s) => roots
            .iter()
            .filter(|r| r.sequence == s)
            .map(|r| r.batch)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    writeln!(out, "edge,root,batch,attempt,included,released,expired,total,skewness").unwrap();
    for r in roots.iter().filter(|r| root.is_none_or(|s| r.sequence == s)) {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6}",
            r.edge, r.sequence, r.batch, r.attempt, r.included, r.released, r.expired, r.total, r.skewness
        )
        .unwrap();
    }
    for (e, s, a, p, sigs) in failed_attempts.iter().filter(|f| root.is_none_or(|s| f.1 == s)) {
        writeln!(out, "attempt failed edge={e} root={s} attempt={a} proposals={p} best_signatures={sigs}").unwrap();
    }
    if root.is_none() {
        for line in &evidence {
            writeln!(out, "{line}").unwrap();
        }
    }
    writeln!(out, "batch,root,attempted,succeeded,failed,reasons").unwrap();
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    for b in &shown_batches {
        let t = &batches[b];
        let reasons: Vec<String> = t.reasons.iter().map(|(r, c)| format!("{r}={c}")).collect();
        writeln!(
            out,
            "{b},{},{},{},{},{}",
            root_index[b],
            t.attempted,
            t.succeeded,
            t.attempted - t.succeeded,
            reasons.join(";")
        )
        .unwrap();
        for (r, c) in &t.reasons {
            *totals.entry(r.clone()).or_insert(0) += c;
        }
    }
    for (r, c) in &totals {
        writeln!(out, "reason {r} {c}").unwrap();
    }

    let csv_path = path.with_file_name("metrics.csv");
    if let Ok(csv) = std::fs::read_to_string(&csv_path) {
        match check_csv(&csv, &batches, &root_index) {
            Ok(()) => writeln!(out, "metrics.csv consistent").unwrap(),
            Err(msg) => {
                consistent = false;
                writeln!(out, "metrics.csv mismatch: {msg}").unwrap();
            }
        }
    }
    Ok(Report { text: out, consistent })
}

fn check_csv(csv: &str, batches: &BTreeMap<u64, Tally>, root_index: &BTreeMap<u64, u64>) -> Result<(), String> {
    let mut lines = csv.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("unexpected header".into());
    }
    let rows: Vec<&str> = lines.collect();
    if rows.len() != batches.len() {
        return Err(format!("{} rows for {} batches", rows.len(), batches.len()));
    }
    for (row, (b, t)) in rows.iter().zip(batches) {
        let f: Vec<&str> = row.split(',').collect();
        let want = [root_index[b], t.attempted, t.succeeded, t.attempted - t.succeeded];
        let got: Vec<u64> = f.iter().take(4).filter_map(|x| x.parse().ok()).collect();
        if got != want {
            return Err(format!("batch {b}: csv {:?}, log {:?}", got, want));
        }
    }
    Ok(())
}
