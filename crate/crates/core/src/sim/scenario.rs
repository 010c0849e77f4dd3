//! Scenario files: TOML, every field documented in `docs/scenario.md`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Amount, ParticipantId, Tick};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub batches: u64,
    pub tx_per_batch: u64,
    /// Participants `0..participants` in one hyperedge, unless `topology`
    /// lists hyperedges explicitly.
    #[serde(default)]
    pub participants: u32,
    pub initial_balance: Amount,
    #[serde(default)]
    pub topology: Vec<EdgeSpec>,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub network: Network,
    #[serde(default)]
    pub consensus: Consensus,
    #[serde(default)]
    pub chain: ChainParams,
    #[serde(default)]
    pub byzantine: Vec<ByzantineSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub members: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub amount_min: Amount,
    pub amount_cap: Amount,
    /// Intra-hyperedge fee, rounded down to a multiple of `n - 2`.
    pub fee_rate: Amount,
    /// Probability that an intent is a cross-hyperedge route.
    pub route_fraction: f64,
    /// Fee δ kept by each connector on a route.
    pub connector_fee: Amount,
    /// Ticks between consecutive intents of a batch.
    pub intent_spacing: Tick,
    /// Ticks between consecutive hop timeouts; 0 means three nominal batches.
    pub route_margin: Tick,
    /// A connector forwards only if the upstream timeout is at least this
    /// far away; 0 means two nominal batches.
    pub forward_margin: Tick,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            amount_min: 1,
            amount_cap: 1_000,
            fee_rate: 0,
            route_fraction: 0.0,
            connector_fee: 1,
            intent_spacing: 1,
            route_margin: 0,
            forward_margin: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Network {
    pub min_delay: Tick,
    pub max_delay: Tick,
    /// Drop probability for payment requests and co-sign replies only.
    pub drop_rate: f64,
    /// Ticks a sender waits for a co-sign reply before abandoning.
    pub request_timeout: Tick,
}

impl Default for Network {
    fn default() -> Self {
        Self { min_delay: 1, max_delay: 3, drop_rate: 0.0, request_timeout: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Consensus {
    /// Designated proposers per attempt, rotated across attempts.
    pub proposers: u32,
    /// Length of each consensus phase in ticks.
    pub phase_ticks: Tick,
    /// Attempts per root before the run reports a liveness stall.
    pub max_attempts: u32,
    /// Finalized roots whose leaves each member keeps in memory.
    pub keep_roots: usize,
}

impl Default for Consensus {
    fn default() -> Self {
        Self { proposers: 3, phase_ticks: 4, max_attempts: 8, keep_roots: 2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseMode {
    Cooperative,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainParams {
    pub dispute_window: Tick,
    pub close: CloseMode,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self { dispute_window: 10, close: CloseMode::Cooperative }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Never signs, endorses, proposes or pays.
    Silent,
    /// Double-spends its tip on its first payment of every batch.
    Equivocator,
    /// Broadcasts garbled leaves and proposes roots with fabricated entries.
    Forger,
    /// Posts an old root on-chain at close.
    StaleRootPoster,
    /// Relays mutated proofs for every pending conditional it sees.
    FakeProofRelayer,
    /// Accepts conditional payments but never forwards them.
    ConnectorAbort,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ByzantineSpec {
    pub ids: Vec<u32>,
    pub profile: Profile,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field, reason: reason.into() }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Member lists of every hyperedge; hyperedge `i` has id `i`.
    pub fn rosters(&self) -> Vec<Vec<ParticipantId>> {
        if self.topology.is_empty() {
            vec![(0..self.participants).map(ParticipantId).collect()]
        } else {
            self.topology.iter().map(|e| e.members.iter().copied().map(ParticipantId).collect()).collect()
        }
    }

    /// Highest participant id plus one.
    pub fn population(&self) -> u32 {
        self.rosters().iter().flatten().map(|p| p.0 + 1).max().unwrap_or(0)
    }

    pub fn profile_of(&self, p: ParticipantId) -> Option<Profile> {
        self.byzantine.iter().find(|b| b.ids.contains(&p.0)).map(|b| b.profile)
    }

    /// Ticks a batch takes without retries: intents, drain, four phases.
    pub fn nominal_batch_ticks(&self) -> Tick {
        self.tx_per_batch * self.workload.intent_spacing
            + 4 * self.network.max_delay
            + self.network.request_timeout
            + 4 * self.consensus.phase_ticks
    }

    pub fn route_margin(&self) -> Tick {
        match self.workload.route_margin {
            0 => 3 * self.nominal_batch_ticks(),
            m => m,
        }
    }

    pub fn forward_margin(&self) -> Tick {
        match self.workload.forward_margin {
            0 => 2 * self.nominal_batch_ticks(),
            m => m,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.batches == 0 {
            return Err(invalid("batches", "must be positive"));
        }
        if self.initial_balance == 0 {
            return Err(invalid("initial_balance", "must be positive"));
        }
        if self.topology.is_empty() && self.participants < 3 {
            return Err(invalid("participants", "a hyperedge needs at least 3 participants"));
        }
        if !self.topology.is_empty() && self.participants != 0 {
            return Err(invalid("participants", "set either participants or topology, not both"));
        }
        let rosters = self.rosters();
        let seats: u128 = rosters.iter().map(|r| r.len() as u128).sum();
        // Logged totals, reseals included, must fit a u64.
        if u128::from(self.initial_balance) * seats * 2 > u128::from(u64::MAX) {
            return Err(invalid("initial_balance", "total funding must stay below 2^63"));
        }
        for (i, r) in rosters.iter().enumerate() {
            let set: BTreeSet<_> = r.iter().collect();
            if set.len() != r.len() {
                return Err(invalid("topology", format!("hyperedge {i} lists a member twice")));
            }
            if r.len() < 3 {
                return Err(invalid("topology", format!("hyperedge {i} has fewer than 3 members")));
            }
        }
        for (i, w) in rosters.windows(2).enumerate() {
            if !w[0].iter().any(|p| w[1].contains(p)) {
                return Err(invalid("topology", format!("hyperedges {i} and {} share no connector", i + 1)));
            }
        }
        let w = &self.workload;
        if w.amount_min == 0 || w.amount_cap < w.amount_min {
            return Err(invalid("workload.amount_cap", "need 1 <= amount_min <= amount_cap"));
        }
        if !(0.0..=1.0).contains(&w.route_fraction) {
            return Err(invalid("workload.route_fraction", "must lie in [0, 1]"));
        }
        if w.route_fraction > 0.0 && rosters.len() < 2 {
            return Err(invalid("workload.route_fraction", "routes need at least two hyperedges"));
        }
        if w.intent_spacing == 0 {
            return Err(invalid("workload.intent_spacing", "must be positive"));
        }
        // A forwarded hop finalizes by the end of the next batch and its proof
        // releases upstream one batch later. A smaller margin lets the upstream
        // conditional expire after the connector has already paid.
        if w.forward_margin != 0 && w.forward_margin < 2 * self.nominal_batch_ticks() {
            return Err(invalid(
                "workload.forward_margin",
                format!("must be 0 or at least two nominal batches ({} ticks)", 2 * self.nominal_batch_ticks()),
            ));
        }
        let n = &self.network;
        if n.min_delay == 0 || n.max_delay < n.min_delay {
            return Err(invalid("network.max_delay", "need 1 <= min_delay <= max_delay"));
        }
        if !(0.0..1.0).contains(&n.drop_rate) {
            return Err(invalid("network.drop_rate", "must lie in [0, 1)"));
        }
        if n.request_timeout <= 2 * n.max_delay {
            return Err(invalid("network.request_timeout", "must exceed a round trip"));
        }
        let c = &self.consensus;
        if c.proposers == 0 || c.max_attempts == 0 {
            return Err(invalid("consensus.proposers", "proposers and max_attempts must be positive"));
        }
        if c.phase_ticks <= n.max_delay {
            return Err(invalid("consensus.phase_ticks", "a phase must outlast the maximum delay"));
        }
        if c.keep_roots == 0 {
            return Err(invalid("consensus.keep_roots", "must keep at least the last root"));
        }
        let population = self.population();
        let mut flagged = BTreeSet::new();
        for b in &self.byzantine {
            for id in &b.ids {
                if *id >= population {
                    return Err(invalid("byzantine.ids", format!("{id} is not a participant")));
                }
                if !flagged.insert(*id) {
                    return Err(invalid("byzantine.ids", format!("{id} has two profiles")));
                }
            }
        }
        for (i, r) in rosters.iter().enumerate() {
            let bad = r.iter().filter(|p| flagged.contains(&p.0)).count();
            if 3 * bad >= r.len() {
                return Err(invalid(
                    "byzantine",
                    format!("hyperedge {i} has {bad} of {} Byzantine members; need fewer than n/3", r.len()),
                ));
            }
        }
        Ok(())
    }
}
