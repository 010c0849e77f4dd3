//! Mock on-chain arbiter: funding, closure, disputes and escape/reseal.
//!
//! The arbiter stores, per hyperedge, the roster fixed at funding and the
//! highest root sequence it has seen. Every check is a signature or
//! commitment check; the arbiter never sees leaves except inside evidence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::consensus::{check_finalized, DagRoot, RootReject};
use crate::crypto::{sign, Digest, KeyPair, KeyRing, Signature, SignerSet};
use crate::dag::{equivocation_valid, ConditionSpec, FraudEvidence, Member};
use crate::payments::{verify_proof, ProofOfTransfer};
use crate::state::{
    commit, merkle_leaf, merkle_prove, merkle_root, merkle_verify, BalanceVector, Hyperedge, MerkleProof, StateError,
};
use crate::types::{Amount, HyperedgeId, ParticipantId, Tick};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FundingTx {
    pub hyperedge: HyperedgeId,
    pub inputs: Vec<(ParticipantId, Amount)>,
    pub total: Amount,
    pub policy: KeyRing,
    /// Genesis revocation hash of each participant, in participant order.
    pub bases: Vec<Digest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseTx {
    pub hyperedge: HyperedgeId,
    pub root: Digest,
    pub outputs: Vec<(ParticipantId, Amount)>,
}

impl CloseTx {
    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new("hmpc/close");
        e.u32(self.hyperedge.0).digest(&self.root).u32(self.outputs.len() as u32);
        for (p, a) in &self.outputs {
            e.u32(p.0).u64(*a);
        }
        e.digest_of()
    }

    pub fn total(&self) -> u128 {
        self.outputs.iter().map(|(_, a)| u128::from(*a)).sum()
    }
}

/// Exit half of an escape. Commits to the digest of its reseal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitTx {
    pub hyperedge: HyperedgeId,
    pub participant: ParticipantId,
    pub balance: Amount,
    pub proof: MerkleProof,
    pub root: DagRoot,
    pub reseal_digest: Digest,
}

/// Reseal half of an escape: the remaining members' new funding output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResealTx {
    pub old_hyperedge: HyperedgeId,
    pub new_hyperedge: HyperedgeId,
    pub participants: Vec<ParticipantId>,
    pub balances: BalanceVector,
    pub genesis_commitment: Digest,
    pub policy: KeyRing,
    pub bases: Vec<Digest>,
}

impl ResealTx {
    pub fn digest(&self) -> Digest {
        let mut e = Encoder::new("hmpc/reseal");
        e.u32(self.old_hyperedge.0).u32(self.new_hyperedge.0).u32(self.participants.len() as u32);
        for p in &self.participants {
            e.u32(p.0);
        }
        self.balances.encode(&mut e);
        e.digest(&self.genesis_commitment);
        for k in self.policy.keys() {
            e.u32(k.participant.0).bytes(k.bytes());
        }
        for b in &self.bases {
            e.digest(b);
        }
        e.digest_of()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscapePair {
    pub tx1: ExitTx,
    pub tx2: ResealTx,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("hyperedge {0} unknown")]
    UnknownHyperedge(HyperedgeId),
    #[error("hyperedge {0} already exists")]
    HyperedgeExists(HyperedgeId),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("deposit of {0} is zero")]
    ZeroDeposit(ParticipantId),
    #[error("hyperedge is not open")]
    NotOpen,
    #[error("no dispute is open")]
    NoDispute,
    #[error("root not final: {0}")]
    Root(RootReject),
    #[error("balances do not match the root commitment")]
    BalanceMismatch,
    #[error("root sequence {got} is older than recorded sequence {recorded}")]
    StaleRoot { got: u64, recorded: u64 },
    #[error("challenge root is not strictly newer than the current best")]
    NotNewer,
    #[error("close authorization missing from {0}")]
    MissingAuthorization(ParticipantId),
    #[error("dispute window open until {0}")]
    WindowOpen(Tick),
    #[error("dispute window closed at {0}")]
    WindowClosed(Tick),
    #[error("invalid evidence: {0}")]
    Evidence(EvidenceReject),
    #[error("escape would leave fewer than 3 members")]
    EscapeTooSmall,
    #[error("merkle proof does not open the root at the participant's position")]
    BadMerkleProof,
    #[error("reseal does not match the exit's committed digest")]
    CovenantMismatch,
    #[error("reseal contents are inconsistent with the exit")]
    BadReseal,
    #[error("reseal submitted without its exit")]
    ResealWithoutExit,
    #[error("exit submitted without its committed reseal")]
    ExitWithoutReseal,
    #[error("{0} is not a member")]
    NotMember(ParticipantId),
}

impl ChainError {
    pub fn code(&self) -> &'static str {
        match self {
            ChainError::UnknownHyperedge(_) => "unknown_hyperedge",
            ChainError::HyperedgeExists(_) => "hyperedge_exists",
            ChainError::State(_) => "state",
            ChainError::ZeroDeposit(_) => "zero_deposit",
            ChainError::NotOpen => "not_open",
            ChainError::NoDispute => "no_dispute",
            ChainError::Root(r) => r.code(),
            ChainError::BalanceMismatch => "balance_mismatch",
            ChainError::StaleRoot { .. } => "stale_root",
            ChainError::NotNewer => "not_newer",
            ChainError::MissingAuthorization(_) => "missing_authorization",
            ChainError::WindowOpen(_) => "window_open",
            ChainError::WindowClosed(_) => "window_closed",
            ChainError::Evidence(e) => e.code(),
            ChainError::EscapeTooSmall => "escape_too_small",
            ChainError::BadMerkleProof => "merkle_proof",
            ChainError::CovenantMismatch => "covenant_mismatch",
            ChainError::BadReseal => "bad_reseal",
            ChainError::ResealWithoutExit => "reseal_without_exit",
            ChainError::ExitWithoutReseal => "exit_without_reseal",
            ChainError::NotMember(_) => "not_member",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvidenceReject {
    #[error("leaves do not form an equivocation")]
    NotEquivocation,
    #[error("leaf is not by the participant who posted the state")]
    WrongAccused,
    #[error("leaf signatures invalid")]
    BadLeaf,
    #[error("leaf does not reveal the secret behind its previous state")]
    SecretDoesNotOpen,
    #[error("newer root is not strictly newer or does not include the leaf")]
    NotSuperseded,
    #[error("newer root not final: {0}")]
    NewerRoot(RootReject),
    #[error("revoked-state evidence needs the posted root")]
    NoPostedRoot,
}

impl EvidenceReject {
    pub fn code(&self) -> &'static str {
        match self {
            EvidenceReject::NotEquivocation => "not_equivocation",
            EvidenceReject::WrongAccused => "wrong_accused",
            EvidenceReject::BadLeaf => "leaf_signature",
            EvidenceReject::SecretDoesNotOpen => "secret_does_not_open",
            EvidenceReject::NotSuperseded => "not_superseded",
            EvidenceReject::NewerRoot(r) => r.code(),
            EvidenceReject::NoPostedRoot => "no_posted_root",
        }
    }
}

/// Check fraud evidence and return the participant it convicts. `posted` is
/// the root the accused put on-chain, needed for revoked-state evidence.
pub fn verify_evidence(
    ring: &KeyRing,
    evidence: &FraudEvidence,
    posted: Option<(&DagRoot, ParticipantId)>,
) -> Result<ParticipantId, EvidenceReject> {
    match evidence {
        FraudEvidence::Equivocation { first, second } => {
            if equivocation_valid(ring, first, second) {
                Ok(first.sender)
            } else {
                Err(EvidenceReject::NotEquivocation)
            }
        }
        FraudEvidence::RevokedState { leaf, newer_root } => {
            let (posted, submitter) = posted.ok_or(EvidenceReject::NoPostedRoot)?;
            if leaf.sender != submitter {
                return Err(EvidenceReject::WrongAccused);
            }
            if !leaf.fully_signed(ring) {
                return Err(EvidenceReject::BadLeaf);
            }
            let Some(secret) = leaf.revocation.prev_secret else {
                return Err(EvidenceReject::SecretDoesNotOpen);
            };
            // The accused revealed the secret of a state it held at or
            // before the posted root, in a leaf finalized after it.
            if secret.commitment() != leaf.prev_hash() {
                return Err(EvidenceReject::SecretDoesNotOpen);
            }
            if newer_root.sequence <= posted.sequence || !newer_root.includes(&leaf.nonce) {
                return Err(EvidenceReject::NotSuperseded);
            }
            check_finalized(newer_root, ring).map_err(EvidenceReject::NewerRoot)?;
            Ok(submitter)
        }
    }
}

/// Redistribute the cheater's balance to the others in proportion to their
/// balances. Remainder units go to the lowest-indexed others.
pub fn pro_rata_penalty(balances: &BalanceVector, cheater: usize) -> BalanceVector {
    let take = u128::from(balances.get(cheater));
    let others: u128 = balances.total() - take;
    let n = balances.len();
    let mut out = balances.0.clone();
    out[cheater] = 0;
    let mut paid = 0u128;
    for (i, b) in balances.0.iter().enumerate() {
        if i == cheater {
            continue;
        }
        let share = if others == 0 { take / (n as u128 - 1) } else { take * u128::from(*b) / others };
        out[i] += share as u64;
        paid += share;
    }
    let mut rest = take - paid;
    for (i, o) in out.iter_mut().enumerate() {
        if rest == 0 {
            break;
        }
        if i != cheater {
            *o += 1;
            rest -= 1;
        }
    }
    BalanceVector(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Settled,
    Penalized { cheater: ParticipantId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisputeCase {
    pub submitter: ParticipantId,
    pub posted: DagRoot,
    pub window_deadline: Tick,
    pub best: DagRoot,
    pub best_balances: BalanceVector,
    pub cheater: Option<ParticipantId>,
    pub challenges: Vec<(ParticipantId, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum EdgeStatus {
    Open,
    Disputed(Box<DisputeCase>),
    Closed { close: CloseTx, verdict: Verdict },
    Escaped { successor: HyperedgeId },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub edge: Hyperedge,
    pub funding: FundingTx,
    pub genesis: DagRoot,
    pub highest_sequence: u64,
    pub status: EdgeStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChainEvent {
    Funded {
        height: Tick,
        hyperedge: HyperedgeId,
        total: Amount,
        external: bool,
    },
    RootPosted {
        height: Tick,
        hyperedge: HyperedgeId,
        submitter: ParticipantId,
        sequence: u64,
        deadline: Tick,
    },
    Challenged {
        height: Tick,
        hyperedge: HyperedgeId,
        challenger: ParticipantId,
        kind: String,
        accepted: bool,
        detail: String,
    },
    Closed {
        height: Tick,
        hyperedge: HyperedgeId,
        sequence: u64,
        verdict: Verdict,
        outputs: Vec<(ParticipantId, Amount)>,
    },
    Escaped {
        height: Tick,
        hyperedge: HyperedgeId,
        participant: ParticipantId,
        payout: Amount,
        successor: HyperedgeId,
        reseal_total: Amount,
    },
    Rejected {
        height: Tick,
        hyperedge: HyperedgeId,
        op: String,
        reason: String,
    },
}

/// Totals across the arbiter's lifetime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    #[serde(with = "crate::types::total_as_u64")]
    pub inputs: u128,
    #[serde(with = "crate::types::total_as_u64")]
    pub payouts: u128,
    #[serde(with = "crate::types::total_as_u64")]
    pub locked: u128,
}

impl Audit {
    pub fn conserved(&self) -> bool {
        self.inputs == self.payouts + self.locked
    }
}

/// Result of funding: the hyperedge, its funding transaction and the
/// genesis root signed by every member.
#[derive(Clone, Debug)]
pub struct Funded {
    pub edge: Hyperedge,
    pub funding: FundingTx,
    pub genesis: DagRoot,
}

/// Genesis root at sequence 0 committing to `deposits`, signed by all.
pub fn genesis_root(edge: &Hyperedge, deposits: &BalanceVector, keys: &[KeyPair]) -> DagRoot {
    let mut root = DagRoot::genesis(edge.id, commit(edge, deposits, 0), edge.n());
    let digest = root.digest();
    let mut set = SignerSet::new(edge.n());
    for k in keys {
        set.insert(sign(k, &digest)).expect("distinct keys");
    }
    root.signer_set = set;
    root
}

pub struct Arbiter {
    height: Tick,
    dispute_window: Tick,
    edges: BTreeMap<HyperedgeId, EdgeRecord>,
    log: Vec<ChainEvent>,
    penalty: fn(&BalanceVector, usize) -> BalanceVector,
    inputs: u128,
    payouts: u128,
}

impl Arbiter {
    pub fn new(dispute_window: Tick) -> Self {
        Self {
            height: 0,
            dispute_window,
            edges: BTreeMap::new(),
            log: Vec::new(),
            penalty: pro_rata_penalty,
            inputs: 0,
            payouts: 0,
        }
    }

    pub fn with_penalty(mut self, policy: fn(&BalanceVector, usize) -> BalanceVector) -> Self {
        self.penalty = policy;
        self
    }

    pub fn height(&self) -> Tick {
        self.height
    }

    pub fn advance_to(&mut self, height: Tick) {
        self.height = self.height.max(height);
    }

    pub fn dispute_window(&self) -> Tick {
        self.dispute_window
    }

    pub fn log(&self) -> &[ChainEvent] {
        &self.log
    }

    pub fn record(&self, id: HyperedgeId) -> Option<&EdgeRecord> {
        self.edges.get(&id)
    }

    pub fn audit(&self) -> Audit {
        let locked = self
            .edges
            .values()
            .filter(|r| matches!(r.status, EdgeStatus::Open | EdgeStatus::Disputed(_)))
            .map(|r| u128::from(r.funding.total))
            .sum();
        Audit { inputs: self.inputs, payouts: self.payouts, locked }
    }

    fn reject(&mut self, id: HyperedgeId, op: &str, e: ChainError) -> ChainError {
        self.log.push(ChainEvent::Rejected {
            height: self.height,
            hyperedge: id,
            op: op.to_string(),
            reason: e.code().to_string(),
        });
        e
    }

    /// Lock every deposit into one output and register the genesis state.
    pub fn fund(&mut self, id: HyperedgeId, keys: &[KeyPair], deposits: &[Amount]) -> Result<Funded, ChainError> {
        if self.edges.contains_key(&id) {
            return Err(ChainError::HyperedgeExists(id));
        }
        let participants: Vec<ParticipantId> = keys.iter().map(|k| k.participant).collect();
        let edge = Hyperedge::new(id, participants.clone())?;
        if deposits.len() != keys.len() {
            return Err(StateError::LengthMismatch { expected: keys.len(), got: deposits.len() }.into());
        }
        if let Some(i) = deposits.iter().position(|d| *d == 0) {
            return Err(ChainError::ZeroDeposit(participants[i]));
        }
        let balances = BalanceVector(deposits.to_vec());
        let total = u64::try_from(balances.total()).map_err(|_| StateError::Overflow)?;
        let policy = KeyRing::new(id, keys.iter().map(|k| k.public()).collect());
        let funding = FundingTx {
            hyperedge: id,
            inputs: participants.iter().copied().zip(deposits.iter().copied()).collect(),
            total,
            policy,
            bases: keys.iter().map(|k| Member::genesis_base(k, id)).collect(),
        };
        let genesis = genesis_root(&edge, &balances, keys);
        self.edges.insert(
            id,
            EdgeRecord {
                edge: edge.clone(),
                funding: funding.clone(),
                genesis: genesis.clone(),
                highest_sequence: 0,
                status: EdgeStatus::Open,
            },
        );
        self.inputs += u128::from(total);
        self.log.push(ChainEvent::Funded { height: self.height, hyperedge: id, total, external: true });
        Ok(Funded { edge, funding, genesis })
    }

    fn checked_root(&self, id: HyperedgeId, root: &DagRoot, balances: &BalanceVector) -> Result<(), ChainError> {
        let rec = self.edges.get(&id).ok_or(ChainError::UnknownHyperedge(id))?;
        check_finalized(root, &rec.funding.policy).map_err(ChainError::Root)?;
        if balances.len() != rec.edge.n() || commit(&rec.edge, balances, root.sequence) != root.commitment {
            return Err(ChainError::BalanceMismatch);
        }
        Ok(())
    }

    fn close_with(&mut self, id: HyperedgeId, root: &DagRoot, balances: &BalanceVector, verdict: Verdict) -> CloseTx {
        let rec = self.edges.get_mut(&id).expect("checked");
        let close = CloseTx {
            hyperedge: id,
            root: root.digest(),
            outputs: rec.edge.participants().iter().copied().zip(balances.0.iter().copied()).collect(),
        };
        debug_assert_eq!(close.total(), u128::from(rec.funding.total));
        rec.status = EdgeStatus::Closed { close: close.clone(), verdict: verdict.clone() };
        rec.highest_sequence = rec.highest_sequence.max(root.sequence);
        self.payouts += close.total();
        self.log.push(ChainEvent::Closed {
            height: self.height,
            hyperedge: id,
            sequence: root.sequence,
            verdict,
            outputs: close.outputs.clone(),
        });
        close
    }

    /// Close at `root` with signatures from every member over the close
    /// transaction.
    pub fn cooperative_close(
        &mut self,
        id: HyperedgeId,
        root: &DagRoot,
        balances: &BalanceVector,
        authorizations: &[Signature],
    ) -> Result<CloseTx, ChainError> {
        let res = self.try_cooperative(id, root, balances, authorizations);
        res.map_err(|e| self.reject(id, "cooperative_close", e))
    }

    fn try_cooperative(
        &mut self,
        id: HyperedgeId,
        root: &DagRoot,
        balances: &BalanceVector,
        authorizations: &[Signature],
    ) -> Result<CloseTx, ChainError> {
        self.checked_root(id, root, balances)?;
        let rec = &self.edges[&id];
        if rec.status != EdgeStatus::Open {
            return Err(ChainError::NotOpen);
        }
        if root.sequence < rec.highest_sequence {
            return Err(ChainError::StaleRoot { got: root.sequence, recorded: rec.highest_sequence });
        }
        let draft = close_draft(&rec.edge, root, balances);
        let digest = draft.digest();
        for p in rec.edge.participants() {
            let ok = authorizations.iter().any(|s| s.signer == *p && rec.funding.policy.verify(&digest, s));
            if !ok {
                return Err(ChainError::MissingAuthorization(*p));
            }
        }
        Ok(self.close_with(id, root, balances, Verdict::Settled))
    }

    /// Post a root unilaterally and open the dispute window.
    pub fn unilateral_close(
        &mut self,
        id: HyperedgeId,
        submitter: ParticipantId,
        root: &DagRoot,
        balances: &BalanceVector,
    ) -> Result<Tick, ChainError> {
        let res = self.try_unilateral(id, submitter, root, balances);
        res.map_err(|e| self.reject(id, "unilateral_close", e))
    }

    fn try_unilateral(
        &mut self,
        id: HyperedgeId,
        submitter: ParticipantId,
        root: &DagRoot,
        balances: &BalanceVector,
    ) -> Result<Tick, ChainError> {
        self.checked_root(id, root, balances)?;
        let deadline = self.height + self.dispute_window;
        let rec = self.edges.get_mut(&id).expect("checked");
        if !rec.edge.contains(submitter) {
            return Err(ChainError::NotMember(submitter));
        }
        if rec.status != EdgeStatus::Open {
            return Err(ChainError::NotOpen);
        }
        rec.status = EdgeStatus::Disputed(Box::new(DisputeCase {
            submitter,
            posted: root.clone(),
            window_deadline: deadline,
            best: root.clone(),
            best_balances: balances.clone(),
            cheater: None,
            challenges: Vec::new(),
        }));
        self.log.push(ChainEvent::RootPosted {
            height: self.height,
            hyperedge: id,
            submitter,
            sequence: root.sequence,
            deadline,
        });
        Ok(deadline)
    }

    fn open_case(&mut self, id: HyperedgeId) -> Result<&mut DisputeCase, ChainError> {
        let height = self.height;
        let rec = self.edges.get_mut(&id).ok_or(ChainError::UnknownHyperedge(id))?;
        match &mut rec.status {
            EdgeStatus::Disputed(case) => {
                if height < case.window_deadline {
                    Ok(case)
                } else {
                    Err(ChainError::WindowClosed(case.window_deadline))
                }
            }
            _ => Err(ChainError::NoDispute),
        }
    }

    /// Replace the posted root with a strictly newer finalized one.
    pub fn challenge_newer(
        &mut self,
        id: HyperedgeId,
        challenger: ParticipantId,
        root: &DagRoot,
        balances: &BalanceVector,
    ) -> Result<(), ChainError> {
        let res = self.try_newer(id, challenger, root, balances);
        self.log_challenge(id, challenger, "newer_root", &res);
        res
    }

    fn try_newer(
        &mut self,
        id: HyperedgeId,
        challenger: ParticipantId,
        root: &DagRoot,
        balances: &BalanceVector,
    ) -> Result<(), ChainError> {
        self.checked_root(id, root, balances)?;
        let case = self.open_case(id)?;
        if root.sequence <= case.best.sequence {
            return Err(ChainError::NotNewer);
        }
        case.best = root.clone();
        case.best_balances = balances.clone();
        case.challenges.push((challenger, format!("newer_root:{}", root.sequence)));
        Ok(())
    }

    /// Submit fraud evidence; on success the accused forfeits its balance
    /// at settlement. `latest`, when given, must be strictly newer than the
    /// current best and becomes the settlement basis.
    pub fn challenge_fraud(
        &mut self,
        id: HyperedgeId,
        challenger: ParticipantId,
        evidence: &FraudEvidence,
        latest: Option<(&DagRoot, &BalanceVector)>,
    ) -> Result<ParticipantId, ChainError> {
        let res = self.try_fraud(id, challenger, evidence, latest);
        self.log_challenge(id, challenger, "fraud", &res);
        res
    }

    fn try_fraud(
        &mut self,
        id: HyperedgeId,
        challenger: ParticipantId,
        evidence: &FraudEvidence,
        latest: Option<(&DagRoot, &BalanceVector)>,
    ) -> Result<ParticipantId, ChainError> {
        if let Some((root, balances)) = latest {
            self.checked_root(id, root, balances)?;
        }
        let ring = self.edges.get(&id).ok_or(ChainError::UnknownHyperedge(id))?.funding.policy.clone();
        let case = self.open_case(id)?;
        let cheater =
            verify_evidence(&ring, evidence, Some((&case.posted, case.submitter))).map_err(ChainError::Evidence)?;
        if let Some((root, balances)) = latest {
            if root.sequence > case.best.sequence {
                case.best = root.clone();
                case.best_balances = balances.clone();
            }
        }
        case.cheater = Some(cheater);
        case.challenges.push((challenger, format!("fraud:{cheater}")));
        Ok(cheater)
    }

    fn log_challenge<T>(
        &mut self,
        id: HyperedgeId,
        challenger: ParticipantId,
        kind: &str,
        res: &Result<T, ChainError>,
    ) {
        self.log.push(ChainEvent::Challenged {
            height: self.height,
            hyperedge: id,
            challenger,
            kind: kind.to_string(),
            accepted: res.is_ok(),
            detail: match res {
                Ok(_) => String::new(),
                Err(e) => e.code().to_string(),
            },
        });
    }

    /// After the deadline, pay out the best root, penalizing a convicted
    /// cheater.
    pub fn settle_dispute(&mut self, id: HyperedgeId) -> Result<CloseTx, ChainError> {
        let height = self.height;
        let rec = self.edges.get(&id).ok_or(ChainError::UnknownHyperedge(id))?;
        let EdgeStatus::Disputed(case) = &rec.status else {
            return Err(ChainError::NoDispute);
        };
        if height < case.window_deadline {
            return Err(ChainError::WindowOpen(case.window_deadline));
        }
        let case = case.clone();
        let (balances, verdict) = match case.cheater {
            Some(c) => {
                let i = rec.edge.index_of(c).expect("evidence names a member");
                ((self.penalty)(&case.best_balances, i), Verdict::Penalized { cheater: c })
            }
            None => (case.best_balances.clone(), Verdict::Settled),
        };
        Ok(self.close_with(id, &case.best, &balances, verdict))
    }

    /// A reseal alone never confirms: the covenant only releases it together
    /// with its exit.
    pub fn submit_reseal(&mut self, tx2: &ResealTx) -> Result<(), ChainError> {
        Err(self.reject(tx2.old_hyperedge, "reseal", ChainError::ResealWithoutExit))
    }

    /// An exit alone never confirms either.
    pub fn submit_exit(&mut self, tx1: &ExitTx) -> Result<(), ChainError> {
        Err(self.reject(tx1.hyperedge, "exit", ChainError::ExitWithoutReseal))
    }

    /// Apply both halves of an escape or neither.
    pub fn apply_escape(&mut self, pair: &EscapePair) -> Result<(Amount, Hyperedge), ChainError> {
        let res = self.check_escape(pair);
        let new_edge = match res {
            Ok(e) => e,
            Err(e) => return Err(self.reject(pair.tx1.hyperedge, "escape", e)),
        };
        let (tx1, tx2) = (&pair.tx1, &pair.tx2);
        let reseal_total = u64::try_from(tx2.balances.total()).expect("bounded by funding");
        let old = self.edges.get_mut(&tx1.hyperedge).expect("checked");
        old.status = EdgeStatus::Escaped { successor: tx2.new_hyperedge };
        old.highest_sequence = old.highest_sequence.max(tx1.root.sequence);
        let genesis = DagRoot::genesis(
            tx2.new_hyperedge,
            crate::state::StateCommitment { root: tx2.genesis_commitment, height: 0 },
            new_edge.n(),
        );
        self.edges.insert(
            tx2.new_hyperedge,
            EdgeRecord {
                edge: new_edge.clone(),
                funding: FundingTx {
                    hyperedge: tx2.new_hyperedge,
                    inputs: tx2.participants.iter().copied().zip(tx2.balances.0.iter().copied()).collect(),
                    total: reseal_total,
                    policy: tx2.policy.clone(),
                    bases: tx2.bases.clone(),
                },
                genesis,
                highest_sequence: 0,
                status: EdgeStatus::Open,
            },
        );
        self.payouts += u128::from(tx1.balance);
        self.log.push(ChainEvent::Funded {
            height: self.height,
            hyperedge: tx2.new_hyperedge,
            total: reseal_total,
            external: false,
        });
        self.log.push(ChainEvent::Escaped {
            height: self.height,
            hyperedge: tx1.hyperedge,
            participant: tx1.participant,
            payout: tx1.balance,
            successor: tx2.new_hyperedge,
            reseal_total,
        });
        Ok((tx1.balance, new_edge))
    }

    fn check_escape(&self, pair: &EscapePair) -> Result<Hyperedge, ChainError> {
        let (tx1, tx2) = (&pair.tx1, &pair.tx2);
        let rec = self.edges.get(&tx1.hyperedge).ok_or(ChainError::UnknownHyperedge(tx1.hyperedge))?;
        if rec.status != EdgeStatus::Open {
            return Err(ChainError::NotOpen);
        }
        if tx1.reseal_digest != tx2.digest() {
            return Err(ChainError::CovenantMismatch);
        }
        let i = rec.edge.index_of(tx1.participant).ok_or(ChainError::NotMember(tx1.participant))?;
        if rec.edge.n() - 1 < 3 {
            return Err(ChainError::EscapeTooSmall);
        }
        check_finalized(&tx1.root, &rec.funding.policy).map_err(ChainError::Root)?;
        if tx1.root.sequence < rec.highest_sequence {
            return Err(ChainError::StaleRoot { got: tx1.root.sequence, recorded: rec.highest_sequence });
        }
        if tx1.proof.index != i
            || !merkle_verify(&tx1.root.commitment.root, &merkle_leaf(tx1.participant, tx1.balance), &tx1.proof)
        {
            return Err(ChainError::BadMerkleProof);
        }
        if self.edges.contains_key(&tx2.new_hyperedge) {
            return Err(ChainError::HyperedgeExists(tx2.new_hyperedge));
        }
        let remaining: Vec<ParticipantId> =
            rec.edge.participants().iter().copied().filter(|p| *p != tx1.participant).collect();
        let mut full = tx2.balances.0.clone();
        if full.len() != remaining.len() {
            return Err(ChainError::BadReseal);
        }
        full.insert(i, tx1.balance);
        let consistent = tx2.old_hyperedge == tx1.hyperedge
            && tx2.participants == remaining
            && commit(&rec.edge, &BalanceVector(full), tx1.root.sequence) == tx1.root.commitment
            && tx2.genesis_commitment == merkle_root(&remaining, tx2.balances.as_slice())
            && tx2.policy == rec.funding.policy.without(tx1.participant).with_hyperedge(tx2.new_hyperedge)
            && tx2.bases.len() == remaining.len();
        if !consistent {
            return Err(ChainError::BadReseal);
        }
        Ok(Hyperedge::new(tx2.new_hyperedge, remaining)?)
    }
}

pub fn close_draft(edge: &Hyperedge, root: &DagRoot, balances: &BalanceVector) -> CloseTx {
    CloseTx {
        hyperedge: edge.id,
        root: root.digest(),
        outputs: edge.participants().iter().copied().zip(balances.0.iter().copied()).collect(),
    }
}

/// Build the covenant-linked escape pair for `participant` leaving at
/// `root`. `bases` are the remaining members' genesis revocation hashes for
/// the resealed hyperedge.
#[allow(clippy::too_many_arguments)]
pub fn escape(
    edge: &Hyperedge,
    ring: &KeyRing,
    participant: ParticipantId,
    root: &DagRoot,
    balances: &BalanceVector,
    new_hyperedge: HyperedgeId,
    bases: Vec<Digest>,
) -> Result<EscapePair, ChainError> {
    let i = edge.index_of(participant).ok_or(ChainError::NotMember(participant))?;
    if edge.n() - 1 < 3 {
        return Err(ChainError::EscapeTooSmall);
    }
    if commit(edge, balances, root.sequence) != root.commitment {
        return Err(ChainError::BalanceMismatch);
    }
    let proof = merkle_prove(edge, balances, i)?;
    let remaining: Vec<ParticipantId> = edge.participants().iter().copied().filter(|p| *p != participant).collect();
    let rest = balances.without(i);
    let tx2 = ResealTx {
        old_hyperedge: edge.id,
        new_hyperedge,
        genesis_commitment: merkle_root(&remaining, rest.as_slice()),
        participants: remaining,
        balances: rest,
        policy: ring.without(participant).with_hyperedge(new_hyperedge),
        bases,
    };
    let tx1 = ExitTx {
        hyperedge: edge.id,
        participant,
        balance: balances.get(i),
        proof,
        root: root.clone(),
        reseal_digest: tx2.digest(),
    };
    Ok(EscapePair { tx1, tx2 })
}

/// Self-contained input to the standalone verifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvidenceBundle {
    Proof { proof: ProofOfTransfer, condition: ConditionSpec, ring: KeyRing },
    Fraud { evidence: FraudEvidence, ring: KeyRing, posted_root: Option<DagRoot>, submitter: Option<ParticipantId> },
    Root { root: DagRoot, ring: KeyRing },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum BundleVerdict {
    Accept { detail: String },
    Reject { rule: String, detail: String },
}

/// The same checks the arbiter and members apply, on a bundle.
pub fn verify_bundle(bundle: &EvidenceBundle) -> BundleVerdict {
    match bundle {
        EvidenceBundle::Proof { proof, condition, ring } => match verify_proof(proof, condition, ring) {
            Ok(()) => BundleVerdict::Accept { detail: "proof".into() },
            Err(e) => BundleVerdict::Reject { rule: e.code().into(), detail: e.to_string() },
        },
        EvidenceBundle::Fraud { evidence, ring, posted_root, submitter } => {
            let posted = posted_root.as_ref().zip(*submitter);
            match verify_evidence(ring, evidence, posted) {
                Ok(c) => BundleVerdict::Accept { detail: format!("fraud:{c}") },
                Err(e) => BundleVerdict::Reject { rule: e.code().into(), detail: e.to_string() },
            }
        }
        EvidenceBundle::Root { root, ring } => match check_finalized(root, ring) {
            Ok(()) => BundleVerdict::Accept { detail: format!("root:{}", root.sequence) },
            Err(e) => BundleVerdict::Reject { rule: e.code().into(), detail: e.to_string() },
        },
    }
}
