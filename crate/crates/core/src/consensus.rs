//! Dagroots: proposal, verification, threshold signing and application.
//!
//! A root lists, for every proposer whose branch it covers, the endorsed tip
//! leaf and the contiguous run of unfinalized leaves ending there. Released
//! conditional leaves follow the branch runs. Verifiers recompute the same
//! list from their own DAG and compare it entry for entry.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::crypto::{sign, Digest, KeyPair, KeyRing, Signature, SignerSet};
use crate::dag::{DagLeaf, LocalDag, Member};
use crate::payments::{verify_proof, ProofOfTransfer, ProofReject};
use crate::state::{commit, BalanceVector, DeltaAccumulator, Hyperedge, StateCommitment};
use crate::types::{HyperedgeId, ParticipantId, Tick};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentTip {
    pub proposer: ParticipantId,
    pub nonce: Digest,
    pub endorsement: Signature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncludedLeaf {
    pub nonce: Digest,
    pub sender: ParticipantId,
    pub next_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ConditionalOutcome {
    Released { nonce: Digest, proof: Box<ProofOfTransfer> },
    Expired { nonce: Digest },
}

impl ConditionalOutcome {
    pub fn nonce(&self) -> Digest {
        match self {
            ConditionalOutcome::Released { nonce, .. } | ConditionalOutcome::Expired { nonce } => *nonce,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagRoot {
    pub hyperedge: HyperedgeId,
    pub sequence: u64,
    pub prev_root: Digest,
    /// Tick at which the settlement window that produced this root closed.
    pub window_end: Tick,
    pub parent_tips: Vec<ParentTip>,
    pub included: Vec<IncludedLeaf>,
    pub outcomes: Vec<ConditionalOutcome>,
    pub commitment: StateCommitment,
    pub signer_set: SignerSet,
}

impl DagRoot {
    pub fn genesis(hyperedge: HyperedgeId, commitment: StateCommitment, n: usize) -> Self {
        Self {
            hyperedge,
            sequence: 0,
            prev_root: Digest::ZERO,
            window_end: 0,
            parent_tips: Vec::new(),
            included: Vec::new(),
            outcomes: Vec::new(),
            commitment,
            signer_set: SignerSet::new(n),
        }
    }

    /// Canonical digest over every field except the signer set. This is the
    /// message root signatures cover.
    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new("hmpc/root");
        e.u32(self.hyperedge.0)
            .u64(self.sequence)
            .digest(&self.prev_root)
            .u64(self.window_end)
            .u32(self.parent_tips.len() as u32);
        for t in &self.parent_tips {
            e.u32(t.proposer.0).digest(&t.nonce).u32(t.endorsement.signer.0).bytes(t.endorsement.bytes());
        }
        e.u32(self.included.len() as u32);
        for l in &self.included {
            e.digest(&l.nonce).u32(l.sender.0).digest(&l.next_hash);
        }
        e.u32(self.outcomes.len() as u32);
        for o in &self.outcomes {
            match o {
                ConditionalOutcome::Released { nonce, proof } => {
                    e.u8(1).digest(nonce).digest(&proof.digest());
                }
                ConditionalOutcome::Expired { nonce } => {
                    e.u8(0).digest(nonce);
                }
            }
        }
        self.commitment.encode(&mut e);
        e.digest_of()
    }

    pub fn includes(&self, nonce: &Digest) -> bool {
        self.included.iter().any(|l| l.nonce == *nonce)
    }

    pub fn unsigned(&self) -> DagRoot {
        DagRoot { signer_set: SignerSet::new(self.signer_set.n()), ..self.clone() }
    }
}

/// A settlement window `[start, start + duration)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementWindow {
    pub duration: Tick,
    pub start: Tick,
}

impl SettlementWindow {
    pub fn new(start: Tick, duration: Tick) -> Self {
        assert!(duration > 0, "window duration must be positive");
        Self { duration, start }
    }

    pub fn end(&self) -> Tick {
        self.start + self.duration
    }

    pub fn expired(&self, now: Tick) -> bool {
        now >= self.end()
    }

    pub fn next(&self) -> SettlementWindow {
        SettlementWindow { duration: self.duration, start: self.end() }
    }
}

/// A proposer's signature over its own latest leaf for the next root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endorsement {
    pub sequence: u64,
    pub prev_root: Digest,
    pub nonce: Digest,
    pub signature: Signature,
}

pub fn endorsement_message(
    edge: HyperedgeId,
    sequence: u64,
    prev_root: &Digest,
    proposer: ParticipantId,
    nonce: &Digest,
) -> Digest {
    let mut e = Encoder::new("hmpc/endorse");
    e.u32(edge.0).u64(sequence).digest(prev_root).u32(proposer.0).digest(nonce);
    e.digest_of()
}

/// Endorse this member's own latest unfinalized leaf for the next root.
pub fn endorse(member: &Member) -> Option<Endorsement> {
    let dag = &member.dag;
    let chain = dag.chain(member.id())?;
    let tip = chain.unfinalized().last()?;
    let last = dag.last_root();
    let sequence = last.sequence + 1;
    let prev_root = dag.last_root_digest();
    let msg = endorsement_message(dag.edge().id, sequence, &prev_root, member.id(), &tip.nonce);
    Some(Endorsement { sequence, prev_root, nonce: tip.nonce, signature: sign(&member.key, &msg) })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Refusal {
    #[error("root does not list a tip for this proposer")]
    NotListed,
    #[error("listed tip is not this proposer's latest signed leaf")]
    TipMismatch,
    #[error("root does not extend the local finalized root")]
    WrongParent,
}

/// Sign the parent tip a root attributes to `member`, but only if it is the
/// member's own latest leaf.
pub fn endorse_tip(member: &Member, root: &DagRoot) -> Result<Signature, Refusal> {
    let dag = &member.dag;
    let last = dag.last_root();
    if root.sequence != last.sequence + 1 || root.prev_root != dag.last_root_digest() {
        return Err(Refusal::WrongParent);
    }
    let listed = root.parent_tips.iter().find(|t| t.proposer == member.id()).ok_or(Refusal::NotListed)?;
    let latest = dag.chain(member.id()).and_then(|c| c.tip_leaf()).map(|l| l.nonce);
    if latest != Some(listed.nonce) {
        return Err(Refusal::TipMismatch);
    }
    let msg = endorsement_message(root.hyperedge, root.sequence, &root.prev_root, member.id(), &listed.nonce);
    Ok(sign(&member.key, &msg))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RootReject {
    #[error("root belongs to {0}")]
    WrongHyperedge(HyperedgeId),
    #[error("expected sequence {expected}, got {got}")]
    WrongSequence { expected: u64, got: u64 },
    #[error("prev_root does not match the local finalized root")]
    WrongPrevRoot,
    #[error("window end does not advance")]
    StaleWindow,
    #[error("parent tips are not strictly ordered by proposer")]
    UnorderedTips,
    #[error("proposer {0} is not a member")]
    UnknownProposer(ParticipantId),
    #[error("proposer {0} is quarantined")]
    BannedProposer(ParticipantId),
    #[error("endorsement by {0} is missing or invalid")]
    BadEndorsement(ParticipantId),
    #[error("tip of {0} is not a locally accepted unfinalized leaf")]
    UnknownTip(ParticipantId),
    #[error("included leaf list differs from the endorsed branches")]
    IncludedMismatch,
    #[error("outcome for unknown conditional leaf")]
    UnknownConditional,
    #[error("outcomes are not strictly ordered by nonce")]
    UnorderedOutcomes,
    #[error("release proof rejected: {0}")]
    BadProof(Box<ProofReject>),
    #[error("release recorded at or after the timeout")]
    ReleaseAfterTimeout,
    #[error("released leaf does not follow the payer's finalized branch")]
    ReleaseOutOfOrder,
    #[error("expiry recorded before the timeout")]
    PrematureExpiry,
    #[error("balance of {0} would be negative")]
    NegativeBalance(ParticipantId),
    #[error("commitment does not match the recomputed balances")]
    CommitmentMismatch,
    #[error("signer set size {got} does not match hyperedge size {expected}")]
    SignerSetSize { expected: usize, got: usize },
    #[error("{valid} valid signers of {n} do not exceed 2n/3")]
    BelowThreshold { valid: usize, n: usize },
}

impl RootReject {
    pub fn code(&self) -> &'static str {
        match self {
            RootReject::WrongHyperedge(_) => "wrong_hyperedge",
            RootReject::WrongSequence { .. } => "wrong_sequence",
            RootReject::WrongPrevRoot => "wrong_prev_root",
            RootReject::StaleWindow => "stale_window",
            RootReject::UnorderedTips => "unordered_tips",
            RootReject::UnknownProposer(_) => "unknown_proposer",
            RootReject::BannedProposer(_) => "banned_proposer",
            RootReject::BadEndorsement(_) => "bad_endorsement",
            RootReject::UnknownTip(_) => "unknown_tip",
            RootReject::IncludedMismatch => "included_mismatch",
            RootReject::UnknownConditional => "unknown_conditional",
            RootReject::UnorderedOutcomes => "unordered_outcomes",
            RootReject::BadProof(_) => "bad_proof",
            RootReject::ReleaseAfterTimeout => "release_after_timeout",
            RootReject::ReleaseOutOfOrder => "release_out_of_order",
            RootReject::PrematureExpiry => "premature_expiry",
            RootReject::NegativeBalance(_) => "negative_balance",
            RootReject::CommitmentMismatch => "commitment_mismatch",
            RootReject::SignerSetSize { .. } => "signer_set_size",
            RootReject::BelowThreshold { .. } => "threshold",
        }
    }
}

/// Check the parts of a root that need no local DAG: every parent-tip
/// endorsement and a `> 2n/3` signer set over the root digest.
pub fn check_finalized(root: &DagRoot, ring: &KeyRing) -> Result<(), RootReject> {
    finalized_digest(root, ring).map(|_| ())
}

/// `check_finalized`, returning the root digest it checked signatures over.
fn finalized_digest(root: &DagRoot, ring: &KeyRing) -> Result<Digest, RootReject> {
    if root.hyperedge != ring.hyperedge {
        return Err(RootReject::WrongHyperedge(root.hyperedge));
    }
    check_endorsements(root, ring)?;
    let n = ring.len();
    if root.signer_set.n() != n {
        return Err(RootReject::SignerSetSize { expected: n, got: root.signer_set.n() });
    }
    let digest = root.digest();
    let valid = root.signer_set.valid_signers(&digest, ring);
    if !crate::crypto::threshold_met(valid, n) {
        return Err(RootReject::BelowThreshold { valid, n });
    }
    Ok(digest)
}

fn check_endorsements(root: &DagRoot, ring: &KeyRing) -> Result<(), RootReject> {
    for w in root.parent_tips.windows(2) {
        if w[0].proposer >= w[1].proposer {
            return Err(RootReject::UnorderedTips);
        }
    }
    for t in &root.parent_tips {
        if !ring.contains(t.proposer) {
            return Err(RootReject::UnknownProposer(t.proposer));
        }
        let msg = endorsement_message(root.hyperedge, root.sequence, &root.prev_root, t.proposer, &t.nonce);
        if t.endorsement.signer != t.proposer || !ring.verify(&msg, &t.endorsement) {
            return Err(RootReject::BadEndorsement(t.proposer));
        }
    }
    Ok(())
}

/// What a root does to the local DAG, computed from local data only.
struct Transition {
    /// `(chain index, new finalized length)` per covered branch.
    branches: Vec<(usize, usize)>,
    included: Vec<IncludedLeaf>,
    released: Vec<Arc<DagLeaf>>,
    expired: Vec<Digest>,
    balances: Vec<i128>,
}

impl Transition {
    fn first_negative(&self, edge: &Hyperedge) -> Option<ParticipantId> {
        self.balances.iter().position(|b| *b < 0).map(|i| edge.participant(i))
    }

    fn balance_vector(&self) -> BalanceVector {
        BalanceVector(self.balances.iter().map(|b| *b as u64).collect())
    }
}

fn transition(
    dag: &LocalDag,
    branches: &[(usize, usize)],
    releases: &[Digest],
    expiries: &[Digest],
) -> Result<Transition, RootReject> {
    let n = dag.edge.n();
    let mut acc = DeltaAccumulator::new(n);
    let mut included = Vec::new();
    let mut covered = vec![None; n];
    for &(c, end) in branches {
        let chain = &dag.chains[c];
        for leaf in &chain.leaves()[chain.finalized_len()..end] {
            let r = dag.edge.index_of(leaf.receiver).expect("admitted receiver");
            acc.add(c, r, &leaf.delta);
            included.push(IncludedLeaf { nonce: leaf.nonce, sender: leaf.sender, next_hash: leaf.next_hash() });
        }
        covered[c] = Some(end);
    }
    let mut released = Vec::new();
    for nonce in releases {
        let pc = dag.conditionals.get(nonce).ok_or(RootReject::UnknownConditional)?;
        let leaf = &pc.leaf;
        let s = dag.edge.index_of(leaf.sender).expect("admitted sender");
        let chain = &dag.chains[s];
        let end = covered[s].unwrap_or(chain.finalized_len());
        if end != chain.len() || chain.tip_hash() != leaf.prev_hash() {
            return Err(RootReject::ReleaseOutOfOrder);
        }
        let r = dag.edge.index_of(leaf.receiver).expect("admitted receiver");
        acc.add(s, r, &leaf.delta);
        included.push(IncludedLeaf { nonce: leaf.nonce, sender: leaf.sender, next_hash: leaf.next_hash() });
        released.push(leaf.clone());
    }
    let balances = (0..n).map(|i| i128::from(dag.balances.get(i)) + acc.net(i)).collect();
    Ok(Transition { branches: branches.to_vec(), included, released, expired: expiries.to_vec(), balances })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProposeError {
    #[error("settlement window still open until tick {0}")]
    WindowOpen(Tick),
}

/// Build the next root from the local DAG and the endorsements received.
/// Branches without a usable endorsement are deferred to a later root.
/// Returns `None` when there is nothing to settle.
pub fn propose_root(
    dag: &LocalDag,
    endorsements: &BTreeMap<ParticipantId, Endorsement>,
    window: &SettlementWindow,
    now: Tick,
) -> Result<Option<DagRoot>, ProposeError> {
    if !window.expired(now) {
        return Err(ProposeError::WindowOpen(window.end()));
    }
    let last = dag.last_root();
    let sequence = last.sequence + 1;
    let prev_root = dag.last_root_digest();
    let edge = &dag.edge;

    let mut tips: BTreeMap<usize, ParentTip> = BTreeMap::new();
    let mut branches: BTreeMap<usize, usize> = BTreeMap::new();
    for (p, e) in endorsements {
        let Some(c) = edge.index_of(*p) else { continue };
        if dag.banned.contains(p) || e.sequence != sequence || e.prev_root != prev_root {
            continue;
        }
        let chain = &dag.chains[c];
        let Some(pos) = chain.unfinalized().iter().position(|l| l.nonce == e.nonce) else {
            continue;
        };
        let msg = endorsement_message(edge.id, sequence, &prev_root, *p, &e.nonce);
        if e.signature.signer != *p || !dag.ring.verify(&msg, &e.signature) {
            continue;
        }
        tips.insert(c, ParentTip { proposer: *p, nonce: e.nonce, endorsement: e.signature });
        branches.insert(c, chain.finalized_len() + pos + 1);
    }

    let mut releases = Vec::new();
    let mut expiries = Vec::new();
    for (nonce, pc) in &dag.conditionals {
        let cond = pc.leaf.condition.as_ref().expect("pending leaves are conditional");
        if now >= cond.timeout {
            expiries.push(*nonce);
        } else if pc.proof.is_some() {
            let s = edge.index_of(pc.leaf.sender).expect("admitted sender");
            let chain = &dag.chains[s];
            let end = branches.get(&s).copied().unwrap_or(chain.finalized_len());
            if end == chain.len() && chain.tip_hash() == pc.leaf.prev_hash() {
                releases.push(*nonce);
            }
        }
    }

    // Drop whole branches (and releases) of anyone who would end negative,
    // until the transition is non-negative.
    let t = loop {
        let list: Vec<(usize, usize)> = branches.iter().map(|(c, e)| (*c, *e)).collect();
        let t = transition(dag, &list, &releases, &expiries).expect("locally derived inputs are consistent");
        let Some(p) = t.first_negative(edge) else {
            break t;
        };
        let c = edge.index_of(p).expect("member");
        let had_branch = branches.remove(&c).is_some();
        tips.remove(&c);
        let before = releases.len();
        releases.retain(|nonce| dag.conditionals[nonce].leaf.sender != p);
        if !had_branch && before == releases.len() {
            // Only a participant's own debits can make it negative; this is
            // a defensive stop that settles nothing.
            branches.clear();
            tips.clear();
            releases.clear();
        }
    };

    if t.included.is_empty() && t.expired.is_empty() {
        return Ok(None);
    }
    let mut outcomes: Vec<ConditionalOutcome> = Vec::new();
    for leaf in &t.released {
        let proof = dag.conditionals[&leaf.nonce].proof.as_ref().expect("release has proof");
        outcomes.push(ConditionalOutcome::Released { nonce: leaf.nonce, proof: Box::new((**proof).clone()) });
    }
    outcomes.extend(t.expired.iter().map(|n| ConditionalOutcome::Expired { nonce: *n }));
    outcomes.sort_by_key(|o| o.nonce());
    // Released leaves follow branch runs in outcome order.
    let branch_entries = t.included.len() - t.released.len();
    let mut included = t.included[..branch_entries].to_vec();
    for o in &outcomes {
        if let ConditionalOutcome::Released { nonce, .. } = o {
            let leaf = t.released.iter().find(|l| l.nonce == *nonce).expect("released");
            included.push(IncludedLeaf { nonce: *nonce, sender: leaf.sender, next_hash: leaf.next_hash() });
        }
    }
    let balances = t.balance_vector();
    Ok(Some(DagRoot {
        hyperedge: edge.id,
        sequence,
        prev_root,
        window_end: now,
        parent_tips: tips.into_values().collect(),
        included,
        outcomes,
        commitment: commit(edge, &balances, sequence),
        signer_set: SignerSet::new(edge.n()),
    }))
}

/// Recompute a root's transition from the local DAG. Signer set is not
/// examined; see [`check_finalized`].
pub fn verify_root(dag: &LocalDag, root: &DagRoot) -> Result<(), RootReject> {
    verified_transition(dag, root).map(|_| ())
}

fn verified_transition(dag: &LocalDag, root: &DagRoot) -> Result<Transition, RootReject> {
    let edge = &dag.edge;
    if root.hyperedge != edge.id {
        return Err(RootReject::WrongHyperedge(root.hyperedge));
    }
    let last = dag.last_root();
    if root.sequence != last.sequence + 1 {
        return Err(RootReject::WrongSequence { expected: last.sequence + 1, got: root.sequence });
    }
    if root.prev_root != dag.last_root_digest() {
        return Err(RootReject::WrongPrevRoot);
    }
    if root.window_end <= last.window_end && root.sequence > 1 {
        return Err(RootReject::StaleWindow);
    }
    check_endorsements(root, &dag.ring)?;

    let mut branches = Vec::new();
    for t in &root.parent_tips {
        if dag.banned.contains(&t.proposer) {
            return Err(RootReject::BannedProposer(t.proposer));
        }
        let c = edge.index_of(t.proposer).ok_or(RootReject::UnknownProposer(t.proposer))?;
        let chain = &dag.chains[c];
        let pos =
            chain.unfinalized().iter().position(|l| l.nonce == t.nonce).ok_or(RootReject::UnknownTip(t.proposer))?;
        branches.push((c, chain.finalized_len() + pos + 1));
    }

    for w in root.outcomes.windows(2) {
        if w[0].nonce() >= w[1].nonce() {
            return Err(RootReject::UnorderedOutcomes);
        }
    }
    let mut releases = Vec::new();
    let mut expiries = Vec::new();
    for o in &root.outcomes {
        let pc = dag.conditionals.get(&o.nonce()).ok_or(RootReject::UnknownConditional)?;
        let cond = pc.leaf.condition.as_ref().expect("pending leaves are conditional");
        match o {
            ConditionalOutcome::Released { proof, .. } => {
                if root.window_end >= cond.timeout {
                    return Err(RootReject::ReleaseAfterTimeout);
                }
                let ring = dag
                    .registry
                    .get(&cond.source_hyperedge)
                    .ok_or(RootReject::BadProof(Box::new(ProofReject::UnknownHyperedge)))?;
                verify_proof(proof, cond, ring).map_err(|e| RootReject::BadProof(Box::new(e)))?;
                releases.push(o.nonce());
            }
            ConditionalOutcome::Expired { .. } => {
                if root.window_end < cond.timeout {
                    return Err(RootReject::PrematureExpiry);
                }
                expiries.push(o.nonce());
            }
        }
    }

    let t = transition(dag, &branches, &releases, &expiries)?;
    if t.included != root.included {
        return Err(RootReject::IncludedMismatch);
    }
    if let Some(p) = t.first_negative(edge) {
        return Err(RootReject::NegativeBalance(p));
    }
    if commit(edge, &t.balance_vector(), root.sequence) != root.commitment {
        return Err(RootReject::CommitmentMismatch);
    }
    Ok(t)
}

pub fn sign_root(key: &KeyPair, root: &DagRoot) -> Signature {
    sign(key, &root.digest())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Finality {
    Finalized(DagRoot),
    Pending { valid: usize, needed: usize },
}

/// Attach every valid signature to `root` and report whether it is final.
pub fn collect_and_finalize(
    root: &DagRoot,
    signatures: impl IntoIterator<Item = Signature>,
    ring: &KeyRing,
) -> Result<Finality, RootReject> {
    check_endorsements(root, ring)?;
    let digest = root.digest();
    let n = ring.len();
    let mut set = SignerSet::new(n);
    for s in signatures {
        if ring.verify(&digest, &s) && !set.contains(s.signer) {
            set.insert(s).expect("checked for duplicates");
        }
    }
    if crate::crypto::threshold_met(set.len(), n) {
        Ok(Finality::Finalized(DagRoot { signer_set: set, ..root.clone() }))
    } else {
        Ok(Finality::Pending { valid: set.len(), needed: 2 * n / 3 + 1 })
    }
}

/// Deterministic choice among acceptable proposals: the lowest digest.
pub fn tiebreak_root<'a>(proposals: impl IntoIterator<Item = &'a DagRoot>) -> Option<&'a DagRoot> {
    proposals.into_iter().min_by_key(|r| r.digest())
}

impl LocalDag {
    /// Admit leaves shipped with a proposal that this member had not seen.
    /// Errors are ignored; verification decides.
    pub fn catch_up(&mut self, leaves: &[Arc<DagLeaf>]) {
        for leaf in leaves {
            if self.leaf(&leaf.nonce).is_none() && !self.conditionals.contains_key(&leaf.nonce) {
                let _ = self.admit_leaf(leaf.clone());
            }
        }
    }

    /// Local leaves a root includes, in root order.
    pub fn leaves_for(&self, root: &DagRoot) -> Vec<Arc<DagLeaf>> {
        root.included
            .iter()
            .filter_map(|l| self.leaf(&l.nonce).or_else(|| self.conditionals.get(&l.nonce).map(|pc| &pc.leaf)).cloned())
            .collect()
    }

    /// Verify a finalized root and advance local state to it.
    pub fn apply_finalized(&mut self, root: Arc<DagRoot>) -> Result<(), RootReject> {
        let digest = finalized_digest(&root, &self.ring)?;
        let t = verified_transition(self, &root)?;
        for &(c, end) in &t.branches {
            self.chains[c].finalized = end;
        }
        for leaf in &t.released {
            let s = self.edge.index_of(leaf.sender).expect("member");
            self.conditionals.remove(&leaf.nonce);
            self.locks[s] -= 1;
            let chain = &mut self.chains[s];
            self.index.insert(leaf.nonce, (s, chain.leaves.len()));
            chain.leaves.push(leaf.clone());
            chain.finalized = chain.leaves.len();
        }
        for nonce in &t.expired {
            if let Some(pc) = self.conditionals.remove(nonce) {
                let s = self.edge.index_of(pc.leaf.sender).expect("member");
                self.locks[s] -= 1;
            }
        }
        self.balances = t.balance_vector();
        let mut pending = DeltaAccumulator::new(self.edge.n());
        for (c, chain) in self.chains.iter().enumerate() {
            for leaf in chain.unfinalized() {
                let r = self.edge.index_of(leaf.receiver).expect("member");
                pending.add(c, r, &leaf.delta);
            }
        }
        self.pending = pending;
        self.last_digest = digest;
        self.roots.push(root);
        Ok(())
    }
}

impl Member {
    /// Apply a finalized root and drop secrets of expired conditionals.
    pub fn apply_finalized(&mut self, root: Arc<DagRoot>) -> Result<(), RootReject> {
        let expired: Vec<Digest> = root
            .outcomes
            .iter()
            .filter_map(|o| match o {
                ConditionalOutcome::Expired { nonce } => self.dag.conditionals.get(nonce),
                _ => None,
            })
            .filter(|pc| pc.leaf.sender == self.id())
            .map(|pc| pc.leaf.next_hash())
            .collect();
        self.dag.apply_finalized(root)?;
        for h in expired {
            self.forget_secret(&h);
        }
        Ok(())
    }
}
