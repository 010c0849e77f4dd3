//! Proof-of-transfer, conditional leaves and multi-hop routes.
//!
//! A conditional leaf in the paying hyperedge promises `v + δ` to a
//! connector. It is released only by a root that carries a proof that the
//! connector's matching payment finalized in the other hyperedge, and it
//! expires once a root closes at or after its timeout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::consensus::{check_finalized, DagRoot, RootReject};
use crate::crypto::{Digest, KeyRing};
use crate::dag::{BuildError, ConditionSpec, DagLeaf, LocalDag, Member};
use crate::types::{Amount, HyperedgeId, ParticipantId, Tick};

/// A finalized leaf together with the two adjacent roots around it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofOfTransfer {
    pub leaf: DagLeaf,
    pub root_before: DagRoot,
    pub root_after: DagRoot,
}

impl ProofOfTransfer {
    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new("hmpc/proof");
        self.leaf.encode_full(&mut e);
        for root in [&self.root_before, &self.root_after] {
            e.digest(&root.digest()).u32(root.signer_set.len() as u32);
            for s in root.signer_set.signatures() {
                e.u32(s.signer.0).bytes(s.bytes());
            }
        }
        e.digest_of()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProofReject {
    #[error("proof refers to a hyperedge with no known roster")]
    UnknownHyperedge,
    #[error("proof is from a different hyperedge than the condition names")]
    WrongHyperedge,
    #[error("leaf signatures invalid")]
    BadLeafSignature,
    #[error("payer, payee or value differ from the condition")]
    TransferMismatch,
    #[error("leaf does not name this condition's tag")]
    WrongTag,
    #[error("roots are not adjacent")]
    NotAdjacent,
    #[error("leaf nonce is not included in the later root")]
    NotIncluded,
    #[error("earlier root not final: {0}")]
    RootBefore(RootReject),
    #[error("later root not final: {0}")]
    RootAfter(RootReject),
}

impl ProofReject {
    pub fn code(&self) -> &'static str {
        match self {
            ProofReject::UnknownHyperedge => "unknown_hyperedge",
            ProofReject::WrongHyperedge => "wrong_hyperedge",
            ProofReject::BadLeafSignature => "leaf_signature",
            ProofReject::TransferMismatch => "transfer_mismatch",
            ProofReject::WrongTag => "wrong_tag",
            ProofReject::NotAdjacent => "not_adjacent",
            ProofReject::NotIncluded => "not_included",
            ProofReject::RootBefore(r) | ProofReject::RootAfter(r) => r.code(),
        }
    }
}

/// `ring` is the roster of `expected.source_hyperedge`.
pub fn verify_proof(proof: &ProofOfTransfer, expected: &ConditionSpec, ring: &KeyRing) -> Result<(), ProofReject> {
    let source = expected.source_hyperedge;
    if ring.hyperedge != source
        || proof.leaf.hyperedge != source
        || proof.root_before.hyperedge != source
        || proof.root_after.hyperedge != source
    {
        return Err(ProofReject::WrongHyperedge);
    }
    let leaf = &proof.leaf;
    if !leaf.fully_signed(ring) {
        return Err(ProofReject::BadLeafSignature);
    }
    if leaf.sender != expected.required_payer
        || leaf.receiver != expected.required_payee
        || leaf.value != expected.required_value
    {
        return Err(ProofReject::TransferMismatch);
    }
    if leaf.fulfils != Some(expected.tag) {
        return Err(ProofReject::WrongTag);
    }
    if proof.root_after.sequence != proof.root_before.sequence + 1
        || proof.root_after.prev_root != proof.root_before.digest()
    {
        return Err(ProofReject::NotAdjacent);
    }
    if !proof.root_after.includes(&leaf.nonce) {
        return Err(ProofReject::NotIncluded);
    }
    check_finalized(&proof.root_before, ring).map_err(ProofReject::RootBefore)?;
    check_finalized(&proof.root_after, ring).map_err(ProofReject::RootAfter)?;
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProofError {
    #[error("leaf is not in any finalized root")]
    NotFinalized,
}

/// Assemble a proof for a leaf this member has seen finalized.
pub fn build_proof(dag: &LocalDag, nonce: &Digest) -> Result<ProofOfTransfer, ProofError> {
    let roots = dag.roots();
    let t = roots.iter().rposition(|r| r.includes(nonce)).ok_or(ProofError::NotFinalized)?;
    let leaf = dag.leaf(nonce).ok_or(ProofError::NotFinalized)?;
    Ok(ProofOfTransfer {
        leaf: (**leaf).clone(),
        root_before: (*roots[t - 1]).clone(),
        root_after: (*roots[t]).clone(),
    })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttachError {
    #[error("no pending conditional leaf with that nonce")]
    UnknownConditional,
    #[error(transparent)]
    Rejected(#[from] ProofReject),
}

impl LocalDag {
    /// Verify `proof` against the pending conditional `nonce` and keep it
    /// for the next root. The first valid proof wins.
    pub fn attach_proof(&mut self, nonce: &Digest, proof: Arc<ProofOfTransfer>) -> Result<(), AttachError> {
        let registry = self.registry.clone();
        let pc = self.conditionals.get_mut(nonce).ok_or(AttachError::UnknownConditional)?;
        let cond = pc.leaf.condition.as_ref().expect("pending leaves are conditional");
        let ring = registry.get(&cond.source_hyperedge).ok_or(ProofReject::UnknownHyperedge)?;
        verify_proof(&proof, cond, ring)?;
        if pc.proof.is_none() {
            pc.proof = Some(proof);
        }
        Ok(())
    }

    /// Pending conditional leaf whose condition carries `tag`.
    pub fn conditional_by_tag(&self, tag: &Digest) -> Option<&Arc<DagLeaf>> {
        self.conditionals.values().map(|pc| &pc.leaf).find(|l| l.condition.as_ref().is_some_and(|c| c.tag == *tag))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommitError {
    #[error("timeout {timeout} is not after now ({now})")]
    TimeoutInPast { timeout: Tick, now: Tick },
    #[error("condition must require a positive value")]
    ZeroRequiredValue,
    #[error("connector {0} is not a member of the source hyperedge")]
    ConnectorNotShared(ParticipantId),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// Build the conditional leaf `sender -> connector` for `amount`, checking
/// the condition's own preconditions first. `source_members` is the member
/// list of the condition's hyperedge.
pub fn inter_pay_commit(
    sender: &mut Member,
    connector: ParticipantId,
    amount: Amount,
    condition: ConditionSpec,
    source_members: &[ParticipantId],
    fulfils: Option<Digest>,
    now: Tick,
) -> Result<DagLeaf, CommitError> {
    if condition.timeout <= now {
        return Err(CommitError::TimeoutInPast { timeout: condition.timeout, now });
    }
    if condition.required_value == 0 {
        return Err(CommitError::ZeroRequiredValue);
    }
    if !source_members.contains(&connector) || condition.required_payer != connector {
        return Err(CommitError::ConnectorNotShared(connector));
    }
    Ok(sender.build_leaf(connector, amount, 0, Some(condition), fulfils)?)
}

/// One hop of a route as a concrete payment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopPlan {
    pub hyperedge: HyperedgeId,
    pub payer: ParticipantId,
    pub payee: ParticipantId,
    pub amount: Amount,
    /// Present on every hop except the last, which is a normal payment.
    pub condition: Option<ConditionSpec>,
    /// Tag of the previous hop's condition that this payment satisfies.
    pub fulfils: Option<Digest>,
}

/// Sender in `edges[0]` pays receiver in `edges[k-1]` through connectors,
/// `connectors[i]` belonging to both `edges[i]` and `edges[i+1]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub id: u64,
    pub sender: ParticipantId,
    pub receiver: ParticipantId,
    pub value: Amount,
    pub per_hop_fee: Amount,
    pub edges: Vec<HyperedgeId>,
    pub connectors: Vec<ParticipantId>,
    /// Timeout of the conditional leaf in `edges[i]`; strictly decreasing.
    pub timeouts: Vec<Tick>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("route needs at least one hyperedge")]
    Empty,
    #[error("expected {expected} connectors, got {got}")]
    ConnectorCount { expected: usize, got: usize },
    #[error("{who} is not a member of {edge}")]
    NotMember { who: ParticipantId, edge: HyperedgeId },
    #[error("timeouts must strictly decrease from sender to receiver")]
    TimeoutOrder,
    #[error("value must be positive")]
    ZeroValue,
}

fn route_tag(id: u64, hop: usize) -> Digest {
    let mut e = Encoder::new("hmpc/route-tag");
    e.u64(id).u64(hop as u64);
    e.digest_of()
}

impl Route {
    /// Timeouts staggered so the hop nearest the receiver expires first:
    /// hop `i` of `k` gets `start + (k - 1 - i) * margin`.
    #[allow(clippy::too_many_arguments)]
    pub fn plan(
        id: u64,
        sender: ParticipantId,
        receiver: ParticipantId,
        value: Amount,
        per_hop_fee: Amount,
        edges: Vec<HyperedgeId>,
        connectors: Vec<ParticipantId>,
        start: Tick,
        margin: Tick,
    ) -> Route {
        let k = edges.len();
        let timeouts = (0..k.saturating_sub(1)).map(|i| start + (k - 1 - i) as Tick * margin).collect();
        Route { id, sender, receiver, value, per_hop_fee, edges, connectors, timeouts }
    }

    pub fn validate(&self, members: impl Fn(HyperedgeId) -> Vec<ParticipantId>) -> Result<(), RouteError> {
        let k = self.edges.len();
        if k == 0 {
            return Err(RouteError::Empty);
        }
        if self.value == 0 {
            return Err(RouteError::ZeroValue);
        }
        if self.connectors.len() != k - 1 || self.timeouts.len() != k - 1 {
            return Err(RouteError::ConnectorCount { expected: k - 1, got: self.connectors.len() });
        }
        if self.timeouts.windows(2).any(|w| w[0] <= w[1]) {
            return Err(RouteError::TimeoutOrder);
        }
        for hop in self.hops() {
            let m = members(hop.hyperedge);
            for who in [hop.payer, hop.payee] {
                if !m.contains(&who) {
                    return Err(RouteError::NotMember { who, edge: hop.hyperedge });
                }
            }
        }
        Ok(())
    }

    /// Hop `i` pays `value + (k - 1 - i) * δ`; each connector keeps one δ.
    pub fn hops(&self) -> Vec<HopPlan> {
        let k = self.edges.len();
        let amount = |i: usize| self.value + (k - 1 - i) as Amount * self.per_hop_fee;
        (0..k)
            .map(|i| {
                let payer = if i == 0 { self.sender } else { self.connectors[i - 1] };
                let payee = if i + 1 == k { self.receiver } else { self.connectors[i] };
                let condition = (i + 1 < k).then(|| ConditionSpec {
                    tag: route_tag(self.id, i),
                    source_hyperedge: self.edges[i + 1],
                    required_payer: payee,
                    required_payee: if i + 2 == k { self.receiver } else { self.connectors[i + 1] },
                    required_value: amount(i + 1),
                    timeout: self.timeouts[i],
                });
                HopPlan {
                    hyperedge: self.edges[i],
                    payer,
                    payee,
                    amount: amount(i),
                    condition,
                    fulfils: (i > 0).then(|| route_tag(self.id, i - 1)),
                }
            })
            .collect()
    }
}
