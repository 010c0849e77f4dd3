//! Per-root metrics, the JSON-lines event log and output writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::{Audit, ChainEvent};
use crate::state::{skewness, BalanceVector};
use crate::types::{Amount, HyperedgeId, ParticipantId, Tick};

pub const CSV_HEADER: &str = "index,attempted,succeeded,failed,success_ratio,skewness";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    /// Sequence of the first hyperedge's root after this batch.
    pub root_index: u64,
    pub batch: u64,
    pub attempted: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub failed_by_reason: BTreeMap<String, u64>,
    pub success_ratio: f64,
    /// Skewness of the first hyperedge's balances at `root_index`.
    pub skewness: f64,
    /// Sum of balances over all hyperedges.
    #[serde(with = "crate::types::total_as_u64")]
    pub total_balance: u128,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    /// Roots checked when first applied by an honest member.
    pub roots_checked: u64,
    /// Included leaves lacking a valid sender or receiver signature, or a
    /// matching revealed secret.
    pub unsigned_leaves_in_roots: u64,
    /// Roots whose balance total differs from the funding total.
    pub conservation_violations: u64,
    /// Honest members that applied a different root for the same sequence.
    pub divergent_roots: u64,
    pub equivocations_detected: u64,
    pub forged_leaves_rejected: u64,
    pub fake_proofs_sent: u64,
    pub fake_proof_releases: u64,
    /// Conditionals released whose proven transfer never finalized.
    pub releases_without_transfer: u64,
    /// Roots before the timeout that left a conditional pending although
    /// a valid proof had reached every member.
    pub ignored_proofs: u64,
    /// Routes where some hops settled and others did not.
    pub partial_routes: u64,
    /// Participants whose net balance change differs from the sum of the
    /// payments that settled for them.
    pub accounting_mismatches: u64,
    pub routes_completed: u64,
    pub routes_aborted: u64,
    /// Cheaters paid more than their latest honest balance at close.
    pub cheater_favored: u64,
    pub liveness_ok: bool,
}

impl SafetyReport {
    pub fn violations(&self) -> u64 {
        self.unsigned_leaves_in_roots
            + self.conservation_violations
            + self.divergent_roots
            + self.fake_proof_releases
            + self.releases_without_transfer
            + self.ignored_proofs
            + self.partial_routes
            + self.accounting_mismatches
            + self.cheater_favored
            + u64::from(!self.liveness_ok)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEvent {
    /// First record of every log; `edges[e]` lists the members of hyperedge
    /// `e` in balance-vector order.
    Setup {
        seed: u64,
        edges: Vec<Vec<ParticipantId>>,
        initial_balance: Amount,
        #[serde(with = "crate::types::total_as_u64")]
        funding_total: u128,
    },
    BatchStart {
        batch: u64,
        tick: Tick,
        intents: u64,
    },
    Intent {
        id: u64,
        batch: u64,
        tick: Tick,
        sender: ParticipantId,
        receiver: ParticipantId,
        value: Amount,
        edges: Vec<HyperedgeId>,
        outcome: String,
        reason: Option<String>,
    },
    Root {
        edge: HyperedgeId,
        sequence: u64,
        batch: u64,
        attempt: u32,
        tick: Tick,
        included: u64,
        released: u64,
        expired: u64,
        balances: Vec<Amount>,
        #[serde(with = "crate::types::total_as_u64")]
        total: u128,
        skewness: f64,
    },
    AttemptFailed {
        edge: HyperedgeId,
        sequence: u64,
        attempt: u32,
        tick: Tick,
        proposals: u64,
        best_signatures: u64,
    },
    Evidence {
        edge: HyperedgeId,
        accused: ParticipantId,
        kind: String,
        tick: Tick,
        detector: ParticipantId,
    },
    Rejections {
        batch: u64,
        counts: BTreeMap<String, u64>,
    },
    Chain {
        event: ChainEvent,
    },
    Summary {
        attempted: u64,
        succeeded: u64,
        success_ratio: f64,
        max_skewness: f64,
        audit: Audit,
        safety: SafetyReport,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub attempted: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub success_ratio: f64,
    pub min_batch_ratio: f64,
    pub max_skewness: f64,
    pub failures_by_reason: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootPoint {
    pub sequence: u64,
    pub skewness: f64,
    #[serde(with = "crate::types::total_as_u64")]
    pub total: u128,
}

/// Everything a run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub batches: Vec<BatchMetrics>,
    pub aggregate: Aggregate,
    pub edges: BTreeMap<HyperedgeId, Vec<RootPoint>>,
    pub safety: SafetyReport,
    pub audit: Audit,
    #[serde(with = "crate::types::total_as_u64")]
    pub funding_total: u128,
    #[serde(skip)]
    pub events: Vec<LogEvent>,
}

pub fn ratio(succeeded: u64, attempted: u64) -> f64 {
    if attempted == 0 {
        1.0
    } else {
        succeeded as f64 / attempted as f64
    }
}

/// Skewness of a balance vector, 0 for an all-zero vector.
pub fn skew(b: &BalanceVector) -> f64 {
    skewness(b).unwrap_or(0.0)
}

pub fn aggregate(batches: &[BatchMetrics]) -> Aggregate {
    let attempted = batches.iter().map(|b| b.attempted).sum();
    let succeeded = batches.iter().map(|b| b.succeeded).sum();
    let mut failures_by_reason = BTreeMap::new();
    for b in batches {
        for (r, c) in &b.failed_by_reason {
            *failures_by_reason.entry(r.clone()).or_insert(0) += c;
        }
    }
    Aggregate {
        attempted,
        succeeded,
        failed: attempted - succeeded,
        success_ratio: ratio(succeeded, attempted),
        min_batch_ratio: batches.iter().filter(|b| b.attempted > 0).map(|b| b.success_ratio).fold(1.0, f64::min),
        max_skewness: batches.iter().map(|b| b.skewness).fold(0.0, f64::max),
        failures_by_reason,
    }
}

impl RunReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for b in &self.batches {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6}",
                b.root_index, b.attempted, b.succeeded, b.failed, b.success_ratio, b.skewness
            )
            .unwrap();
        }
        out
    }

    pub fn json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    /// Write the selected outputs into `dir`; `events.jsonl` is always
    /// written.
    pub fn write(&self, dir: &Path, csv: bool, json: bool) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        if csv {
            std::fs::write(dir.join("metrics.csv"), self.csv())?;
        }
        if json {
            std::fs::write(dir.join("metrics.json"), self.json())?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("events.jsonl"))?);
        for e in &self.events {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()
    }

    pub fn summary_line(&self) -> String {
        let a = &self.aggregate;
        format!(
            "attempted={} succeeded={} ratio={:.6} min_batch_ratio={:.6} max_skewness={:.6}",
            a.attempted, a.succeeded, a.success_ratio, a.min_batch_ratio, a.max_skewness
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(attempted: u64, succeeded: u64, skewness: f64) -> BatchMetrics {
        BatchMetrics {
            root_index: 1,
            batch: 0,
            attempted,
            succeeded,
            failed: attempted - succeeded,
            failed_by_reason: BTreeMap::from([("insufficient_balance".to_string(), attempted - succeeded)]),
            success_ratio: ratio(succeeded, attempted),
            skewness,
            total_balance: 10,
        }
    }

    #[test]
    fn aggregate_sums_and_extremes() {
        let a = aggregate(&[batch(10, 9, 0.2), batch(10, 10, 0.5), batch(0, 0, 0.1)]);
        assert_eq!((a.attempted, a.succeeded, a.failed), (20, 19, 1));
        assert_eq!(a.success_ratio, 0.95);
        assert_eq!(a.min_batch_ratio, 0.9);
        assert_eq!(a.max_skewness, 0.5);
        assert_eq!(a.failures_by_reason["insufficient_balance"], 1);
    }

    #[test]
    fn csv_has_fixed_columns_and_six_decimals() {
        let r = RunReport {
            batches: vec![batch(3, 2, 1.0 / 3.0)],
            aggregate: aggregate(&[]),
            edges: BTreeMap::new(),
            safety: SafetyReport::default(),
            audit: Audit { inputs: 0, payouts: 0, locked: 0 },
            funding_total: 0,
            events: vec![],
        };
        assert_eq!(r.csv(), format!("{CSV_HEADER}\n1,3,2,1,0.666667,0.333333\n"));
    }

    #[test]
    fn uniform_balances_have_zero_skew() {
        assert_eq!(skew(&BalanceVector(vec![7; 5])), 0.0);
        assert_eq!(skew(&BalanceVector(vec![0; 5])), 0.0);
    }
}
