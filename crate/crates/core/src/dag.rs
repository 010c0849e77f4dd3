//! Dagleaves, per-sender revocation chains and the local DAG every member
//! keeps.
//!
//! A leaf references the hash of its sender's current tip secret and
//! carries the hash of a fresh one. The sender only reveals the old secret
//! after the receiver has co-signed, which revokes the old tip for good.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::consensus::DagRoot;
use crate::crypto::{sign, Digest, KeyPair, KeyRing, Secret, Signature};
use crate::payments::ProofOfTransfer;
use crate::state::{BalanceVector, DeltaAccumulator, Hyperedge, StateError, SymbolicDelta};
use crate::types::{Amount, HyperedgeId, ParticipantId, Tick};

/// Public keys of every hyperedge a member may need to check proofs from.
pub type Registry = BTreeMap<HyperedgeId, KeyRing>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationTriple {
    pub prev_hash: Digest,
    pub prev_secret: Option<Secret>,
    pub next_hash: Digest,
}

impl RevocationTriple {
    pub fn secret_matches(&self) -> bool {
        self.prev_secret.is_none_or(|s| s.commitment() == self.prev_hash)
    }
}

/// Predicate attached to a conditional leaf: a finalized payment of
/// `required_value` from `required_payer` to `required_payee` in
/// `source_hyperedge`, whose leaf names `tag` in its `fulfils` field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub tag: Digest,
    pub source_hyperedge: HyperedgeId,
    pub required_payer: ParticipantId,
    pub required_payee: ParticipantId,
    pub required_value: Amount,
    pub timeout: Tick,
}

impl ConditionSpec {
    fn encode(&self, e: &mut Encoder) {
        e.digest(&self.tag)
            .u32(self.source_hyperedge.0)
            .u32(self.required_payer.0)
            .u32(self.required_payee.0)
            .u64(self.required_value)
            .u64(self.timeout);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DagLeaf {
    pub hyperedge: HyperedgeId,
    pub sender: ParticipantId,
    pub receiver: ParticipantId,
    pub value: Amount,
    pub fee: Amount,
    pub delta: SymbolicDelta,
    pub revocation: RevocationTriple,
    pub condition: Option<ConditionSpec>,
    /// Tag of the upstream condition this payment satisfies, if any.
    pub fulfils: Option<Digest>,
    pub sender_sig: Signature,
    pub receiver_sig: Option<Signature>,
    pub nonce: Digest,
}

/// Unsigned leaf body.
#[derive(Clone, Debug)]
pub struct LeafBody {
    pub hyperedge: HyperedgeId,
    pub sender: ParticipantId,
    pub receiver: ParticipantId,
    pub value: Amount,
    pub fee: Amount,
    pub delta: SymbolicDelta,
    pub prev_hash: Digest,
    pub next_hash: Digest,
    pub condition: Option<ConditionSpec>,
    pub fulfils: Option<Digest>,
}

impl LeafBody {
    /// Leaf identity: covers every field except signatures and the revealed
    /// secret, so it is stable from request to broadcast.
    pub fn nonce(&self) -> Digest {
        let mut e = Encoder::new("hmpc/leaf");
        e.u32(self.hyperedge.0).u32(self.sender.0).u32(self.receiver.0).u64(self.value).u64(self.fee);
        self.delta.encode(&mut e);
        e.digest(&self.prev_hash).digest(&self.next_hash);
        e.option(self.condition.as_ref(), |e, c| c.encode(e));
        e.option(self.fulfils.as_ref(), |e, t| {
            e.digest(t);
        });
        e.digest_of()
    }

    pub fn sign(self, key: &KeyPair) -> DagLeaf {
        let nonce = self.nonce();
        DagLeaf {
            hyperedge: self.hyperedge,
            sender: self.sender,
            receiver: self.receiver,
            value: self.value,
            fee: self.fee,
            delta: self.delta,
            revocation: RevocationTriple { prev_hash: self.prev_hash, prev_secret: None, next_hash: self.next_hash },
            condition: self.condition,
            fulfils: self.fulfils,
            sender_sig: sign(key, &nonce),
            receiver_sig: None,
            nonce,
        }
    }
}

impl DagLeaf {
    pub fn body(&self) -> LeafBody {
        LeafBody {
            hyperedge: self.hyperedge,
            sender: self.sender,
            receiver: self.receiver,
            value: self.value,
            fee: self.fee,
            delta: self.delta,
            prev_hash: self.revocation.prev_hash,
            next_hash: self.revocation.next_hash,
            condition: self.condition.clone(),
            fulfils: self.fulfils,
        }
    }

    pub fn compute_nonce(&self) -> Digest {
        self.body().nonce()
    }

    pub fn prev_hash(&self) -> Digest {
        self.revocation.prev_hash
    }

    pub fn next_hash(&self) -> Digest {
        self.revocation.next_hash
    }

    pub fn is_conditional(&self) -> bool {
        self.condition.is_some()
    }

    pub fn cosigned(mut self, key: &KeyPair) -> DagLeaf {
        self.receiver_sig = Some(sign(key, &self.nonce));
        self
    }

    /// Both signatures present and valid under `ring`, and the stored nonce
    /// matches the body.
    pub fn fully_signed(&self, ring: &KeyRing) -> bool {
        self.nonce == self.compute_nonce()
            && self.sender_sig.signer == self.sender
            && ring.verify(&self.nonce, &self.sender_sig)
            && self.receiver_sig.is_some_and(|s| s.signer == self.receiver && ring.verify(&self.nonce, &s))
    }

    /// Full encoding including signatures and the revealed secret.
    pub fn encode_full(&self, e: &mut Encoder) {
        e.digest(&self.nonce).u32(self.sender_sig.signer.0).bytes(self.sender_sig.bytes());
        e.option(self.receiver_sig.as_ref(), |e, s| {
            e.u32(s.signer.0).bytes(s.bytes());
        });
        e.option(self.revocation.prev_secret.as_ref(), |e, s| {
            e.bytes(&s.0);
        });
    }
}

/// One participant's sequence of accepted leaves.
#[derive(Clone, Debug)]
pub struct ProposerChain {
    pub owner: ParticipantId,
    base: Digest,
    pub(crate) leaves: Vec<Arc<DagLeaf>>,
    pub(crate) finalized: usize,
}

impl ProposerChain {
    pub fn new(owner: ParticipantId, base: Digest) -> Self {
        Self { owner, base, leaves: Vec::new(), finalized: 0 }
    }

    /// Hash of the unrevealed secret the next leaf must reference.
    pub fn tip_hash(&self) -> Digest {
        self.leaves.last().map_or(self.base, |l| l.next_hash())
    }

    /// Hash the first retained leaf extends: the genesis hash until the
    /// chain is pruned.
    pub fn base(&self) -> Digest {
        self.base
    }

    pub fn leaves(&self) -> &[Arc<DagLeaf>] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Number of leading leaves covered by finalized roots.
    pub fn finalized_len(&self) -> usize {
        self.finalized
    }

    pub fn unfinalized(&self) -> &[Arc<DagLeaf>] {
        &self.leaves[self.finalized..]
    }

    /// Latest accepted leaf, finalized or not.
    pub fn tip_leaf(&self) -> Option<&Arc<DagLeaf>> {
        self.leaves.last()
    }

    /// Hashes that have already been extended and can never be extended
    /// again.
    pub fn revoked_tips(&self) -> impl Iterator<Item = Digest> + '_ {
        self.leaves.iter().map(|l| l.prev_hash())
    }

    pub fn is_revoked(&self, h: &Digest) -> bool {
        self.leaves.iter().any(|l| l.prev_hash() == *h)
    }

    /// The accepted leaf that extended `h`.
    pub fn extension_of(&self, h: &Digest) -> Option<&Arc<DagLeaf>> {
        self.leaves.iter().find(|l| l.prev_hash() == *h)
    }
}

#[derive(Clone, Debug)]
pub struct PendingConditional {
    pub leaf: Arc<DagLeaf>,
    pub proof: Option<Arc<ProofOfTransfer>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Extended,
    Pending,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AdmitError {
    #[error("leaf belongs to {0}")]
    WrongHyperedge(HyperedgeId),
    #[error("{0} is not a member")]
    UnknownParticipant(ParticipantId),
    #[error("sender pays itself")]
    SelfPayment,
    #[error("zero value")]
    ZeroValue,
    #[error("nonce does not match the leaf body")]
    BadNonce,
    #[error("sender signature invalid")]
    BadSenderSignature,
    #[error("receiver signature missing")]
    MissingReceiverSignature,
    #[error("receiver signature invalid")]
    BadReceiverSignature,
    #[error("balance delta is not the canonical payment form")]
    NonCanonicalDelta,
    #[error("leaf already accepted")]
    Duplicate,
    #[error("sender {0} is quarantined for equivocation")]
    Banned(ParticipantId),
    #[error("sender {0} has an unresolved conditional leaf")]
    LockedOut(ParticipantId),
    #[error("leaf extends a revoked tip")]
    RevokedTip,
    #[error("leaf extends an unknown parent")]
    UnknownParent,
    #[error("previous secret not revealed")]
    MissingSecret,
    #[error("revealed secret does not open prev_hash")]
    SecretMismatch,
    #[error("conditional leaf must not reveal a secret")]
    UnexpectedSecret,
}

impl AdmitError {
    pub fn code(&self) -> &'static str {
        match self {
            AdmitError::WrongHyperedge(_) => "wrong_hyperedge",
            AdmitError::UnknownParticipant(_) => "unknown_participant",
            AdmitError::SelfPayment => "self_payment",
            AdmitError::ZeroValue => "zero_value",
            AdmitError::BadNonce => "bad_nonce",
            AdmitError::BadSenderSignature => "bad_sender_signature",
            AdmitError::MissingReceiverSignature => "missing_receiver_signature",
            AdmitError::BadReceiverSignature => "bad_receiver_signature",
            AdmitError::NonCanonicalDelta => "non_canonical_delta",
            AdmitError::Duplicate => "duplicate",
            AdmitError::Banned(_) => "banned",
            AdmitError::LockedOut(_) => "locked_out",
            AdmitError::RevokedTip => "revoked_tip",
            AdmitError::UnknownParent => "unknown_parent",
            AdmitError::MissingSecret => "missing_secret",
            AdmitError::SecretMismatch => "secret_mismatch",
            AdmitError::UnexpectedSecret => "unexpected_secret",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReceiverReject {
    #[error("leaf is not addressed to this member")]
    NotAddressedToMe,
    #[error("malformed leaf: {0}")]
    Malformed(AdmitError),
    #[error("check 1: sender balance {available} cannot cover {required}")]
    InsufficientBalance { available: i128, required: Amount },
    #[error("check 2: balance delta is not canonical")]
    NonCanonicalDelta,
    #[error("check 3: prev_hash is not the sender's latest tip")]
    StaleTip,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BuildError {
    #[error("{0} is not a member")]
    UnknownReceiver(ParticipantId),
    #[error("sender pays itself")]
    SelfPayment,
    #[error("zero value")]
    ZeroValue,
    #[error(transparent)]
    Fee(#[from] StateError),
    #[error("spendable balance {available} cannot cover {required}")]
    InsufficientBalance { available: i128, required: Amount },
    #[error("an unresolved conditional leaf locks the sender")]
    LockedOut,
    #[error("sender tip is revoked")]
    RevokedTip,
    #[error("a previous leaf is still awaiting co-signature")]
    InFlight,
    #[error("sender is quarantined")]
    Banned,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RevealError {
    #[error("receiver signature missing or invalid")]
    NotCosigned,
    #[error("leaf was not built by this member")]
    NotMine,
    #[error("secret for prev_hash unknown")]
    UnknownSecret,
    #[error(transparent)]
    Admit(#[from] AdmitError),
}

/// Proof that a participant misbehaved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FraudEvidence {
    /// Two co-signed normal leaves from one sender extending the same tip.
    Equivocation { first: DagLeaf, second: DagLeaf },
    /// A leaf by the accused that reveals the secret of a state the accused
    /// posted on-chain, finalized in a strictly newer root.
    RevokedState { leaf: DagLeaf, newer_root: DagRoot },
}

impl FraudEvidence {
    pub fn accused(&self) -> ParticipantId {
        match self {
            FraudEvidence::Equivocation { first, .. } => first.sender,
            FraudEvidence::RevokedState { leaf, .. } => leaf.sender,
        }
    }
}

/// Local view of one hyperedge held by one member.
#[derive(Clone, Debug)]
pub struct LocalDag {
    pub(crate) edge: Hyperedge,
    pub(crate) ring: KeyRing,
    pub(crate) registry: Arc<Registry>,
    pub(crate) chains: Vec<ProposerChain>,
    pub(crate) index: HashMap<Digest, (usize, usize)>,
    pub(crate) conditionals: BTreeMap<Digest, PendingConditional>,
    pub(crate) locks: Vec<u32>,
    pub(crate) roots: Vec<Arc<DagRoot>>,
    pub(crate) last_digest: Digest,
    pub(crate) balances: BalanceVector,
    pub(crate) pending: DeltaAccumulator,
    pub(crate) banned: BTreeSet<ParticipantId>,
}

impl LocalDag {
    /// `bases[i]` is the genesis revocation hash of participant `i`.
    pub fn new(
        edge: Hyperedge,
        ring: KeyRing,
        registry: Arc<Registry>,
        bases: &[Digest],
        genesis: Arc<DagRoot>,
        balances: BalanceVector,
    ) -> Self {
        assert_eq!(bases.len(), edge.n(), "one genesis base per participant");
        assert_eq!(balances.len(), edge.n(), "one balance per participant");
        let chains = edge.participants().iter().zip(bases).map(|(p, b)| ProposerChain::new(*p, *b)).collect();
        let n = edge.n();
        Self {
            edge,
            ring,
            registry,
            chains,
            index: HashMap::new(),
            conditionals: BTreeMap::new(),
            locks: vec![0; n],
            last_digest: genesis.digest(),
            roots: vec![genesis],
            balances,
            pending: DeltaAccumulator::new(n),
            banned: BTreeSet::new(),
        }
    }

    pub fn edge(&self) -> &Hyperedge {
        &self.edge
    }

    pub fn ring(&self) -> &KeyRing {
        &self.ring
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn last_root(&self) -> &Arc<DagRoot> {
        self.roots.last().expect("genesis root is always present")
    }

    /// Digest of `last_root()`, cached.
    pub fn last_root_digest(&self) -> Digest {
        self.last_digest
    }

    pub fn roots(&self) -> &[Arc<DagRoot>] {
        &self.roots
    }

    /// Balances committed by the last finalized root.
    pub fn balances(&self) -> &BalanceVector {
        &self.balances
    }

    pub fn chain(&self, p: ParticipantId) -> Option<&ProposerChain> {
        self.edge.index_of(p).map(|i| &self.chains[i])
    }

    pub fn chains(&self) -> &[ProposerChain] {
        &self.chains
    }

    pub fn is_banned(&self, p: ParticipantId) -> bool {
        self.banned.contains(&p)
    }

    pub fn is_locked(&self, p: ParticipantId) -> bool {
        self.edge.index_of(p).is_some_and(|i| self.locks[i] > 0)
    }

    pub fn leaf(&self, nonce: &Digest) -> Option<&Arc<DagLeaf>> {
        self.index.get(nonce).map(|&(c, i)| &self.chains[c].leaves[i])
    }

    pub fn conditionals(&self) -> &BTreeMap<Digest, PendingConditional> {
        &self.conditionals
    }

    pub fn has_unfinalized(&self) -> bool {
        self.chains.iter().any(|c| !c.unfinalized().is_empty())
    }

    /// Balance at the last root plus every accepted, non-pending leaf since.
    pub fn reconstruct_balance(&self, p: ParticipantId) -> Option<i128> {
        let i = self.edge.index_of(p)?;
        Some(i128::from(self.balances.get(i)) + self.pending.net(i))
    }

    fn shape_check(&self, leaf: &DagLeaf) -> Result<(usize, usize), AdmitError> {
        if leaf.hyperedge != self.edge.id {
            return Err(AdmitError::WrongHyperedge(leaf.hyperedge));
        }
        let s = self.edge.index_of(leaf.sender).ok_or(AdmitError::UnknownParticipant(leaf.sender))?;
        let r = self.edge.index_of(leaf.receiver).ok_or(AdmitError::UnknownParticipant(leaf.receiver))?;
        if s == r {
            return Err(AdmitError::SelfPayment);
        }
        if leaf.value == 0 {
            return Err(AdmitError::ZeroValue);
        }
        if leaf.nonce != leaf.compute_nonce() {
            return Err(AdmitError::BadNonce);
        }
        if leaf.sender_sig.signer != leaf.sender || !self.ring.verify(&leaf.nonce, &leaf.sender_sig) {
            return Err(AdmitError::BadSenderSignature);
        }
        Ok((s, r))
    }

    fn delta_is_canonical(&self, leaf: &DagLeaf) -> bool {
        SymbolicDelta::canonical(self.edge.n(), leaf.value, leaf.fee).is_ok_and(|d| d == leaf.delta)
    }

    /// Deterministic admission. Rules are checked in a fixed order and the
    /// first violation is returned.
    pub fn admit_leaf(&mut self, leaf: Arc<DagLeaf>) -> Result<Admission, AdmitError> {
        let (s, r) = self.shape_check(&leaf)?;
        let Some(rsig) = leaf.receiver_sig else {
            return Err(AdmitError::MissingReceiverSignature);
        };
        if rsig.signer != leaf.receiver || !self.ring.verify(&leaf.nonce, &rsig) {
            return Err(AdmitError::BadReceiverSignature);
        }
        if !self.delta_is_canonical(&leaf) {
            return Err(AdmitError::NonCanonicalDelta);
        }
        if self.index.contains_key(&leaf.nonce) || self.conditionals.contains_key(&leaf.nonce) {
            return Err(AdmitError::Duplicate);
        }
        if self.banned.contains(&leaf.sender) {
            return Err(AdmitError::Banned(leaf.sender));
        }
        if self.locks[s] > 0 {
            return Err(AdmitError::LockedOut(leaf.sender));
        }
        let chain = &self.chains[s];
        if leaf.prev_hash() != chain.tip_hash() {
            return Err(if chain.is_revoked(&leaf.prev_hash()) {
                AdmitError::RevokedTip
            } else {
                AdmitError::UnknownParent
            });
        }
        if leaf.is_conditional() {
            if leaf.revocation.prev_secret.is_some() {
                return Err(AdmitError::UnexpectedSecret);
            }
            self.locks[s] += 1;
            self.conditionals.insert(leaf.nonce, PendingConditional { leaf, proof: None });
            return Ok(Admission::Pending);
        }
        match leaf.revocation.prev_secret {
            None => return Err(AdmitError::MissingSecret),
            Some(_) if !leaf.revocation.secret_matches() => return Err(AdmitError::SecretMismatch),
            Some(_) => {}
        }
        self.pending.add(s, r, &leaf.delta);
        let chain = &mut self.chains[s];
        self.index.insert(leaf.nonce, (s, chain.leaves.len()));
        chain.leaves.push(leaf);
        Ok(Admission::Extended)
    }

    /// Drop finalized leaves that none of the last `keep` roots include.
    /// Forks of a pruned tip are then rejected as unknown parents.
    pub fn prune(&mut self, keep: usize) {
        let recent: HashSet<Digest> =
            self.roots.iter().rev().take(keep).flat_map(|r| r.included.iter().map(|l| l.nonce)).collect();
        for (c, chain) in self.chains.iter_mut().enumerate() {
            let drop = chain.leaves[..chain.finalized].iter().take_while(|l| !recent.contains(&l.nonce)).count();
            if drop == 0 {
                continue;
            }
            chain.base = chain.leaves[drop - 1].next_hash();
            for l in chain.leaves.drain(..drop) {
                self.index.remove(&l.nonce);
            }
            chain.finalized -= drop;
            for (i, l) in chain.leaves.iter().enumerate() {
                self.index.insert(l.nonce, (c, i));
            }
        }
    }

    /// If `leaf` forks an accepted leaf of the same sender, build evidence.
    pub fn check_equivocation(&self, leaf: &DagLeaf) -> Option<FraudEvidence> {
        let chain = self.chain(leaf.sender)?;
        let other = chain.extension_of(&leaf.prev_hash())?;
        detect_equivocation(self, other, leaf)
    }

    /// Ban `p` and drop its unfinalized leaves. Every honest member that
    /// sees the same evidence ends in the same state.
    pub fn quarantine(&mut self, p: ParticipantId) {
        let Some(i) = self.edge.index_of(p) else {
            return;
        };
        self.banned.insert(p);
        let chain = &mut self.chains[i];
        let dropped: Vec<Arc<DagLeaf>> = chain.leaves.drain(chain.finalized..).collect();
        for leaf in dropped {
            self.index.remove(&leaf.nonce);
            let r = self.edge.index_of(leaf.receiver).expect("admitted receiver");
            self.pending.remove(i, r, &leaf.delta);
        }
    }

    /// Digest of everything that must agree between honest members that saw
    /// the same messages.
    pub fn state_digest(&self) -> Digest {
        let mut e = Encoder::new("hmpc/local-dag");
        e.digest(&self.last_digest);
        self.balances.encode(&mut e);
        for c in &self.chains {
            e.u32(c.owner.0).u64(c.finalized as u64).u64(c.leaves.len() as u64);
            for l in &c.leaves {
                e.digest(&l.nonce);
            }
        }
        for (nonce, pc) in &self.conditionals {
            e.digest(nonce).u8(pc.proof.is_some() as u8);
        }
        for p in &self.banned {
            e.u32(p.0);
        }
        e.digest_of()
    }
}

/// Evidence iff both leaves are distinct, co-signed, non-conditional, by the
/// same sender, extend the same tip and both reveal its secret. A leaf whose
/// secret was never revealed is an abandoned request, not a spend.
pub fn detect_equivocation(dag: &LocalDag, a: &DagLeaf, b: &DagLeaf) -> Option<FraudEvidence> {
    equivocation_valid(&dag.ring, a, b).then(|| {
        let (first, second) = if a.nonce <= b.nonce { (a, b) } else { (b, a) };
        FraudEvidence::Equivocation { first: first.clone(), second: second.clone() }
    })
}

pub(crate) fn equivocation_valid(ring: &KeyRing, a: &DagLeaf, b: &DagLeaf) -> bool {
    a.nonce != b.nonce
        && a.sender == b.sender
        && a.hyperedge == b.hyperedge
        && a.prev_hash() == b.prev_hash()
        && !a.is_conditional()
        && !b.is_conditional()
        && a.revocation.prev_secret.is_some()
        && a.revocation.secret_matches()
        && b.revocation.prev_secret.is_some()
        && b.revocation.secret_matches()
        && a.fully_signed(ring)
        && b.fully_signed(ring)
}

/// Participant-side state: keys, unrevealed secrets and the local DAG.
#[derive(Clone, Debug)]
pub struct Member {
    pub key: KeyPair,
    pub dag: LocalDag,
    seed: Digest,
    secrets: HashMap<Digest, Secret>,
    counter: u64,
    in_flight: Option<Digest>,
}

fn revocation_stream(key: &KeyPair, edge: HyperedgeId) -> Digest {
    let mut e = Encoder::new("hmpc/revocation-stream");
    e.digest(&key.revocation_seed()).u32(edge.0);
    e.digest_of()
}

impl Member {
    /// The genesis revocation hash this key publishes at funding.
    pub fn genesis_base(key: &KeyPair, edge: HyperedgeId) -> Digest {
        Secret::derive(&revocation_stream(key, edge), 0).commitment()
    }

    pub fn new(key: KeyPair, dag: LocalDag) -> Self {
        let seed = revocation_stream(&key, dag.edge.id);
        let genesis = Secret::derive(&seed, 0);
        let mut secrets = HashMap::new();
        secrets.insert(genesis.commitment(), genesis);
        Self { key, dag, seed, secrets, counter: 0, in_flight: None }
    }

    pub fn id(&self) -> ParticipantId {
        self.key.participant
    }

    pub fn in_flight(&self) -> Option<Digest> {
        self.in_flight
    }

    pub fn spendable(&self) -> i128 {
        self.dag.reconstruct_balance(self.id()).unwrap_or(0)
    }

    fn fresh_secret(&mut self) -> Digest {
        self.counter += 1;
        let s = Secret::derive(&self.seed, self.counter);
        let h = s.commitment();
        self.secrets.insert(h, s);
        h
    }

    /// Unrevealed secret behind `h`, if this member generated it.
    pub fn secret_for(&self, h: &Digest) -> Option<Secret> {
        self.secrets.get(h).copied()
    }

    /// Build and sign a leaf on this member's current tip. The previous
    /// secret is not revealed yet.
    pub fn build_leaf(
        &mut self,
        receiver: ParticipantId,
        value: Amount,
        fee: Amount,
        condition: Option<ConditionSpec>,
        fulfils: Option<Digest>,
    ) -> Result<DagLeaf, BuildError> {
        let me = self.id();
        if !self.dag.edge.contains(receiver) {
            return Err(BuildError::UnknownReceiver(receiver));
        }
        if receiver == me {
            return Err(BuildError::SelfPayment);
        }
        if value == 0 {
            return Err(BuildError::ZeroValue);
        }
        if self.dag.is_banned(me) {
            return Err(BuildError::Banned);
        }
        if self.in_flight.is_some() {
            return Err(BuildError::InFlight);
        }
        if self.dag.is_locked(me) {
            return Err(BuildError::LockedOut);
        }
        let delta = SymbolicDelta::canonical(self.dag.edge.n(), value, fee)?;
        let available = self.spendable();
        if available < i128::from(delta.sender_debit) {
            return Err(BuildError::InsufficientBalance { available, required: delta.sender_debit });
        }
        let prev_hash = self.dag.chain(me).expect("member of own edge").tip_hash();
        if !self.secrets.contains_key(&prev_hash) {
            return Err(BuildError::RevokedTip);
        }
        let next_hash = self.fresh_secret();
        let leaf = self.build_on(prev_hash, next_hash, receiver, value, fee, delta, condition, fulfils);
        self.in_flight = Some(leaf.nonce);
        Ok(leaf)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_on(
        &self,
        prev_hash: Digest,
        next_hash: Digest,
        receiver: ParticipantId,
        value: Amount,
        fee: Amount,
        delta: SymbolicDelta,
        condition: Option<ConditionSpec>,
        fulfils: Option<Digest>,
    ) -> DagLeaf {
        LeafBody {
            hyperedge: self.dag.edge.id,
            sender: self.id(),
            receiver,
            value,
            fee,
            delta,
            prev_hash,
            next_hash,
            condition,
            fulfils,
        }
        .sign(&self.key)
    }

    /// A second leaf on the current tip, bypassing the in-flight guard.
    /// Only Byzantine profiles and tests use this.
    pub fn build_fork(&mut self, receiver: ParticipantId, value: Amount, fee: Amount) -> Result<DagLeaf, BuildError> {
        let delta = SymbolicDelta::canonical(self.dag.edge.n(), value, fee)?;
        let prev_hash = self.dag.chain(self.id()).expect("member").tip_hash();
        let next_hash = self.fresh_secret();
        Ok(self.build_on(prev_hash, next_hash, receiver, value, fee, delta, None, None))
    }

    /// Drop an unanswered request so the member can build again.
    pub fn abandon(&mut self) {
        self.in_flight = None;
    }

    /// The three receiver checks. Returns the co-signed leaf.
    pub fn receiver_verify(&self, leaf: &DagLeaf) -> Result<DagLeaf, ReceiverReject> {
        if leaf.receiver != self.id() {
            return Err(ReceiverReject::NotAddressedToMe);
        }
        self.dag.shape_check(leaf).map_err(ReceiverReject::Malformed)?;
        if self.dag.is_banned(leaf.sender) {
            return Err(ReceiverReject::Malformed(AdmitError::Banned(leaf.sender)));
        }
        if self.dag.is_locked(leaf.sender) {
            return Err(ReceiverReject::Malformed(AdmitError::LockedOut(leaf.sender)));
        }
        let available = self.dag.reconstruct_balance(leaf.sender).unwrap_or(0);
        let required = leaf.value.saturating_add(leaf.fee);
        if available < i128::from(required) {
            return Err(ReceiverReject::InsufficientBalance { available, required });
        }
        if !self.dag.delta_is_canonical(leaf) {
            return Err(ReceiverReject::NonCanonicalDelta);
        }
        let tip = self.dag.chain(leaf.sender).expect("checked member").tip_hash();
        if leaf.prev_hash() != tip {
            return Err(ReceiverReject::StaleTip);
        }
        Ok(leaf.clone().cosigned(&self.key))
    }

    /// Attach the previous secret (normal leaves only), admit locally and
    /// return the leaf to broadcast.
    pub fn reveal_and_broadcast(&mut self, mut leaf: DagLeaf) -> Result<Arc<DagLeaf>, RevealError> {
        if leaf.sender != self.id() {
            return Err(RevealError::NotMine);
        }
        let cosigned =
            leaf.receiver_sig.is_some_and(|s| s.signer == leaf.receiver && self.dag.ring.verify(&leaf.nonce, &s));
        if !cosigned {
            return Err(RevealError::NotCosigned);
        }
        if !leaf.is_conditional() {
            let secret = self.secret_for(&leaf.prev_hash()).ok_or(RevealError::UnknownSecret)?;
            leaf.revocation.prev_secret = Some(secret);
        }
        let leaf = Arc::new(leaf);
        self.dag.admit_leaf(leaf.clone())?;
        if !leaf.is_conditional() {
            self.secrets.remove(&leaf.prev_hash());
        }
        if self.in_flight == Some(leaf.nonce) {
            self.in_flight = None;
        }
        Ok(leaf)
    }

    /// Forget the secret of an expired conditional's `next_hash`.
    pub(crate) fn forget_secret(&mut self, h: &Digest) {
        self.secrets.remove(h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::EdgeGroup;
    use crate::state::{apply_delta, payment_delta};
    use proptest::prelude::*;

    fn p(i: u32) -> ParticipantId {
        ParticipantId(i)
    }

    #[test]
    fn first_leaf_references_genesis_base() {
        let mut g = EdgeGroup::uniform(4, 100);
        let base = g.members[0].dag.chain(p(0)).unwrap().base();
        let leaf = g.members[0].build_leaf(p(1), 10, 2, None, None).unwrap();
        assert_eq!(leaf.prev_hash(), base);
        assert_eq!(base, Member::genesis_base(&g.members[0].key, g.edge_id()));
        assert!(leaf.revocation.prev_secret.is_none());
        assert!(leaf.receiver_sig.is_none());
    }

    #[test]
    fn build_rejects_overdraft_and_second_request() {
        let mut g = EdgeGroup::uniform(4, 100);
        assert_eq!(
            g.members[0].build_leaf(p(1), 99, 2, None, None),
            Err(BuildError::InsufficientBalance { available: 100, required: 101 })
        );
        g.members[0].build_leaf(p(1), 10, 2, None, None).unwrap();
        assert_eq!(g.members[0].build_leaf(p(2), 10, 2, None, None), Err(BuildError::InFlight));
        assert!(matches!(g.members[0].build_leaf(p(2), 10, 1, None, None), Err(BuildError::InFlight)));
    }

    #[test]
    fn fee_must_split_evenly() {
        let mut g = EdgeGroup::uniform(5, 100);
        assert!(matches!(
            g.members[0].build_leaf(p(1), 10, 2, None, None),
            Err(BuildError::Fee(StateError::FeeNotDivisible { fee: 2, divisor: 3 }))
        ));
    }

    #[test]
    fn receiver_accepts_and_cosigns() {
        let mut g = EdgeGroup::uniform(4, 100);
        let leaf = g.members[0].build_leaf(p(1), 10, 2, None, None).unwrap();
        let co = g.members[1].receiver_verify(&leaf).unwrap();
        assert!(co.fully_signed(g.members[1].dag.ring()));
        assert_eq!(co.nonce, leaf.nonce);
    }

    #[test]
    fn receiver_check_two_rejects_inflated_credit() {
        let mut g = EdgeGroup::uniform(4, 100);
        let mut body = g.members[0].build_leaf(p(1), 10, 2, None, None).unwrap().body();
        body.delta.receiver_credit += 1;
        let forged = body.sign(&g.members[0].key);
        assert_eq!(g.members[1].receiver_verify(&forged), Err(ReceiverReject::NonCanonicalDelta));
    }

    #[test]
    fn receiver_check_one_rejects_overdraft_built_elsewhere() {
        let mut g = EdgeGroup::uniform(4, 100);
        let leaf = g.members[0].build_fork(p(1), 99, 2).unwrap();
        assert!(matches!(
            g.members[1].receiver_verify(&leaf),
            Err(ReceiverReject::InsufficientBalance { available: 100, required: 101 })
        ));
    }

    #[test]
    fn receiver_check_three_rejects_revoked_tip() {
        let mut g = EdgeGroup::uniform(4, 100);
        let stale = g.members[0].build_fork(p(2), 5, 2).unwrap();
        g.intra_pay(0, 1, 10, 2).unwrap();
        assert_eq!(g.members[2].receiver_verify(&stale), Err(ReceiverReject::StaleTip));
    }

    #[test]
    fn reveal_requires_cosignature_and_revokes_tip() {
        let mut g = EdgeGroup::uniform(4, 100);
        let leaf = g.members[0].build_leaf(p(1), 10, 2, None, None).unwrap();
        assert_eq!(g.members[0].reveal_and_broadcast(leaf.clone()), Err(RevealError::NotCosigned));
        let base = g.members[0].dag.chain(p(0)).unwrap().base();
        let co = g.members[1].receiver_verify(&leaf).unwrap();
        let out = g.members[0].reveal_and_broadcast(co).unwrap();
        assert_eq!(out.revocation.prev_secret.unwrap().commitment(), base);
        let chain = g.members[0].dag.chain(p(0)).unwrap();
        assert!(chain.revoked_tips().any(|h| h == base));
        assert_eq!(chain.tip_hash(), out.next_hash());
    }

    #[test]
    fn admission_happy_path_and_duplicate() {
        let mut g = EdgeGroup::uniform(4, 100);
        let leaf = g.intra_pay(0, 1, 10, 2).unwrap();
        for m in &g.members {
            assert!(m.dag.leaf(&leaf.nonce).is_some());
        }
        assert_eq!(g.members[3].dag.admit_leaf(leaf), Err(AdmitError::Duplicate));
    }

    #[test]
    fn admission_rejects_corrupted_secret() {
        let mut g = EdgeGroup::uniform(4, 100);
        let leaf = g.members[0].build_leaf(p(1), 10, 2, None, None).unwrap();
        let mut co = g.members[1].receiver_verify(&leaf).unwrap();
        co.revocation.prev_secret = Some(Secret([7; 32]));
        assert_eq!(g.members[2].dag.admit_leaf(Arc::new(co)), Err(AdmitError::SecretMismatch));
    }

    #[test]
    fn admission_rejects_missing_signatures() {
        let mut g = EdgeGroup::uniform(4, 100);
        let leaf = g.members[0].build_leaf(p(1), 10, 2, None, None).unwrap();
        let mut bare = leaf.clone();
        bare.revocation.prev_secret = g.members[0].secret_for(&leaf.prev_hash());
        assert_eq!(g.members[2].dag.admit_leaf(Arc::new(bare.clone())), Err(AdmitError::MissingReceiverSignature));
        let mut bad = g.members[1].receiver_verify(&leaf).unwrap();
        bad.sender_sig = bad.sender_sig.corrupted();
        assert_eq!(g.members[2].dag.admit_leaf(Arc::new(bad)), Err(AdmitError::BadSenderSignature));
        let mut self_signed = bare;
        self_signed.receiver_sig = Some(self_signed.sender_sig.reattributed(p(1)));
        assert_eq!(g.members[2].dag.admit_leaf(Arc::new(self_signed)), Err(AdmitError::BadReceiverSignature));
    }

    #[test]
    fn second_leaf_on_same_tip_is_rejected_and_flagged() {
        let mut g = EdgeGroup::uniform(4, 100);
        let a = g.members[0].build_fork(p(1), 10, 2).unwrap();
        let b = g.members[0].build_fork(p(2), 20, 2).unwrap();
        let secret = g.members[0].secret_for(&a.prev_hash());
        let mut a = g.members[1].receiver_verify(&a).unwrap();
        let mut b = g.members[2].receiver_verify(&b).unwrap();
        a.revocation.prev_secret = secret;
        b.revocation.prev_secret = secret;
        let dag = &mut g.members[3].dag;
        assert_eq!(dag.admit_leaf(Arc::new(a.clone())), Ok(Admission::Extended));
        assert_eq!(dag.admit_leaf(Arc::new(b.clone())), Err(AdmitError::RevokedTip));
        let ev = dag.check_equivocation(&b).expect("fork is evidence");
        assert_eq!(ev.accused(), p(0));
        assert!(detect_equivocation(dag, &a, &a).is_none());
        // A co-signed request whose secret was never revealed is not a spend.
        let mut unrevealed = a.clone();
        unrevealed.revocation.prev_secret = None;
        assert!(detect_equivocation(dag, &unrevealed, &b).is_none());
        dag.quarantine(p(0));
        assert!(dag.chain(p(0)).unwrap().is_empty());
        assert_eq!(dag.reconstruct_balance(p(1)), Some(100));
    }

    #[test]
    fn pruning_keeps_tips_balances_and_recent_leaves() {
        let mut g = EdgeGroup::uniform(4, 100);
        let old = g.intra_pay(0, 1, 10, 2).unwrap();
        g.finalize(10).unwrap();
        let recent = g.intra_pay(0, 2, 5, 2).unwrap();
        g.finalize(20).unwrap();
        let open = g.intra_pay(0, 3, 1, 0).unwrap();
        let before: Vec<_> = g.members.iter().map(|m| (m.dag.chain(p(0)).unwrap().tip_hash(), m.spendable())).collect();
        for m in &mut g.members {
            m.dag.prune(1);
            let chain = m.dag.chain(p(0)).unwrap();
            assert_eq!(chain.len(), 2);
            assert_eq!(chain.base(), old.next_hash());
            assert!(m.dag.leaf(&old.nonce).is_none());
            assert_eq!(m.dag.leaf(&recent.nonce).map(|l| l.nonce), Some(recent.nonce));
            assert_eq!(m.dag.leaf(&open.nonce).map(|l| l.nonce), Some(open.nonce));
        }
        let after: Vec<_> = g.members.iter().map(|m| (m.dag.chain(p(0)).unwrap().tip_hash(), m.spendable())).collect();
        assert_eq!(before, after);
        g.intra_pay(0, 1, 1, 0).unwrap();
        let root = g.finalize(30).unwrap().unwrap();
        assert_eq!(root.included.len(), 2);
        assert_eq!(g.members[1].dag.balances().total(), 400);
        // A replay of a pruned leaf no longer links to anything.
        assert_eq!(g.members[0].dag.admit_leaf(old), Err(AdmitError::UnknownParent));
    }

    #[test]
    fn leaves_on_different_tips_are_not_evidence() {
        let mut g = EdgeGroup::uniform(4, 100);
        let a = g.intra_pay(0, 1, 10, 2).unwrap();
        let b = g.intra_pay(0, 2, 10, 2).unwrap();
        assert!(detect_equivocation(&g.members[3].dag, &a, &b).is_none());
    }

    #[test]
    fn unknown_parent_is_distinct_from_revoked() {
        let mut g = EdgeGroup::uniform(4, 100);
        let first = g.intra_pay(0, 1, 10, 2).unwrap();
        let second = g.intra_pay(0, 1, 10, 2).unwrap();
        let mut fresh = EdgeGroup::uniform(4, 100);
        assert_eq!(fresh.members[3].dag.admit_leaf(second), Err(AdmitError::UnknownParent));
        fresh.members[3].dag.admit_leaf(first).unwrap();
    }

    #[test]
    fn reconstruct_balance_single_payment() {
        let mut g = EdgeGroup::uniform(4, 100);
        g.intra_pay(0, 1, 10, 2).unwrap();
        let dag = &g.members[2].dag;
        let got: Vec<i128> = (0..4).map(|i| dag.reconstruct_balance(p(i)).unwrap()).collect();
        assert_eq!(got, vec![88, 110, 101, 101]);
    }

    #[test]
    fn reconstruct_after_root_starts_from_committed_balances() {
        let mut g = EdgeGroup::uniform(4, 100);
        g.intra_pay(0, 1, 10, 2).unwrap();
        g.finalize(10).unwrap();
        let dag = &g.members[3].dag;
        assert_eq!(dag.balances().0, vec![88, 110, 101, 101]);
        assert_eq!(dag.reconstruct_balance(p(0)), Some(88));
    }

    /// Replays every accepted leaf from genesis with dense deltas.
    fn replay_oracle(dag: &LocalDag, genesis: &BalanceVector) -> Vec<i128> {
        let n = dag.edge().n();
        let mut acc: Vec<i128> = genesis.0.iter().map(|b| i128::from(*b)).collect();
        for chain in dag.chains() {
            for leaf in chain.leaves() {
                let s = dag.edge().index_of(leaf.sender).unwrap();
                let r = dag.edge().index_of(leaf.receiver).unwrap();
                let d = payment_delta(n, s, r, leaf.value, leaf.fee).unwrap();
                for (a, x) in acc.iter_mut().zip(d.0) {
                    *a += i128::from(x);
                }
            }
        }
        acc
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reconstruct_matches_replay(
            n in 3usize..=10,
            ops in prop::collection::vec((any::<u16>(), any::<u16>(), 1u64..60, 0u64..3, prop::bool::weighted(0.1)), 1..120),
        ) {
            let mut g = EdgeGroup::uniform(n, 500);
            let genesis = BalanceVector::uniform(n, 500);
            let mut t = 1;
            for (s, r, v, share, root) in ops {
                let s = s as usize % n;
                let r = (s + 1 + r as usize % (n - 1)) % n;
                let _ = g.intra_pay(s, r, v, share * (n as u64 - 2));
                if root {
                    t += 1;
                    g.finalize(t).unwrap();
                }
            }
            for m in &g.members {
                let oracle = replay_oracle(&m.dag, &genesis);
                for i in 0..n {
                    prop_assert_eq!(m.dag.reconstruct_balance(p(i as u32)).unwrap(), oracle[i]);
                }
                let dense = apply_delta(&genesis, &[]).unwrap();
                prop_assert_eq!(dense.total(), m.dag.balances().total());
            }
            let d0 = g.members[0].dag.state_digest();
            prop_assert!(g.members.iter().all(|m| m.dag.state_digest() == d0));
        }
    }
}
