//! In-process harness that drives every member of one or more hyperedges in
//! lockstep, without a network. Tests, examples and the CLI inspector use it.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::chain::genesis_root;
use crate::consensus::{
    collect_and_finalize, endorse, propose_root, sign_root, verify_root, DagRoot, Finality, ProposeError, RootReject,
    SettlementWindow,
};
use crate::crypto::{KeyPair, KeyRing};
use crate::dag::{BuildError, ConditionSpec, DagLeaf, LocalDag, Member, ReceiverReject, Registry, RevealError};
use crate::payments::{build_proof, inter_pay_commit, AttachError, CommitError, HopPlan, ProofError, Route};
use crate::state::{BalanceVector, Hyperedge};
use crate::types::{Amount, HyperedgeId, ParticipantId, Tick};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlowError {
    #[error("unknown participant {0}")]
    Unknown(ParticipantId),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Commit(#[from] CommitError),
    #[error("receiver refused: {0}")]
    Receiver(ReceiverReject),
    #[error(transparent)]
    Reveal(#[from] RevealError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FinalizeError {
    #[error(transparent)]
    Propose(#[from] ProposeError),
    #[error(transparent)]
    Root(#[from] RootReject),
    #[error("only {valid} of {needed} signatures")]
    Pending { valid: usize, needed: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteRunError {
    #[error("hop {hop}: {source}")]
    Flow { hop: usize, source: FlowError },
    #[error("hop {hop}: {source}")]
    Finalize { hop: usize, source: FinalizeError },
    #[error("hop {hop}: {source}")]
    Proof { hop: usize, source: ProofError },
    #[error("hop {hop}: {source}")]
    Attach { hop: usize, source: AttachError },
}

/// All members of one hyperedge plus the balances after each root.
#[derive(Clone, Debug)]
pub struct EdgeGroup {
    pub members: Vec<Member>,
    pub history: Vec<BalanceVector>,
}

impl EdgeGroup {
    /// Hyperedge 0 with participants `0..n`, each depositing `balance`.
    pub fn uniform(n: usize, balance: Amount) -> Self {
        let id = HyperedgeId(0);
        let keys: Vec<KeyPair> = (0..n as u32).map(|i| KeyPair::derive(1, id, ParticipantId(i))).collect();
        let ring = KeyRing::new(id, keys.iter().map(|k| k.public()).collect());
        let registry = Arc::new(Registry::from([(id, ring)]));
        Self::new(id, keys, &vec![balance; n], registry)
    }

    /// `registry` must already hold this hyperedge's key ring.
    pub fn new(id: HyperedgeId, keys: Vec<KeyPair>, deposits: &[Amount], registry: Arc<Registry>) -> Self {
        let ring = registry.get(&id).expect("registry holds the ring").clone();
        let edge = Hyperedge::new(id, keys.iter().map(|k| k.participant).collect()).expect("valid roster");
        Self::start(edge, ring, keys, BalanceVector(deposits.to_vec()), registry)
    }

    fn start(
        edge: Hyperedge,
        ring: KeyRing,
        keys: Vec<KeyPair>,
        balances: BalanceVector,
        registry: Arc<Registry>,
    ) -> Self {
        let genesis = Arc::new(genesis_root(&edge, &balances, &keys));
        let bases: Vec<_> = keys.iter().map(|k| Member::genesis_base(k, edge.id)).collect();
        let members = keys
            .into_iter()
            .map(|k| {
                let dag = LocalDag::new(
                    edge.clone(),
                    ring.clone(),
                    registry.clone(),
                    &bases,
                    genesis.clone(),
                    balances.clone(),
                );
                Member::new(k, dag)
            })
            .collect();
        Self { members, history: vec![balances] }
    }

    /// Continue with the remaining members on a resealed hyperedge.
    pub fn reseal(&self, edge: &Hyperedge, balances: &BalanceVector) -> EdgeGroup {
        let old = &self.members[0].dag;
        let leaver = old.edge().participants().iter().find(|p| !edge.contains(**p)).copied().expect("one member left");
        let ring = old.ring().without(leaver).with_hyperedge(edge.id);
        let mut registry = old.registry().clone();
        registry.insert(edge.id, ring.clone());
        let keys = self.members.iter().filter(|m| edge.contains(m.id())).map(|m| m.key.clone()).collect();
        Self::start(edge.clone(), ring, keys, balances.clone(), Arc::new(registry))
    }

    pub fn edge_id(&self) -> HyperedgeId {
        self.members[0].dag.edge().id
    }

    pub fn index_of(&self, p: ParticipantId) -> Option<usize> {
        self.members.iter().position(|m| m.id() == p)
    }

    pub fn member_mut(&mut self, p: ParticipantId) -> Option<&mut Member> {
        self.members.iter_mut().find(|m| m.id() == p)
    }

    pub fn balances_at(&self, sequence: usize) -> BalanceVector {
        self.history[sequence].clone()
    }

    /// Co-sign, reveal and broadcast a leaf built by member `s`.
    pub fn complete(&mut self, s: usize, leaf: DagLeaf) -> Result<Arc<DagLeaf>, FlowError> {
        let r = self.index_of(leaf.receiver).ok_or(FlowError::Unknown(leaf.receiver))?;
        let cosigned = match self.members[r].receiver_verify(&leaf) {
            Ok(l) => l,
            Err(e) => {
                self.members[s].abandon();
                return Err(FlowError::Receiver(e));
            }
        };
        let leaf = self.members[s].reveal_and_broadcast(cosigned)?;
        self.broadcast(&leaf);
        Ok(leaf)
    }

    /// Deliver `leaf` to every member; the sender has already admitted it.
    pub fn broadcast(&mut self, leaf: &Arc<DagLeaf>) {
        for m in &mut self.members {
            if m.id() != leaf.sender {
                m.dag.admit_leaf(leaf.clone()).expect("honest leaf admits everywhere");
            }
        }
    }

    /// Normal payment between member indices.
    pub fn intra_pay(&mut self, s: usize, r: usize, value: Amount, fee: Amount) -> Result<Arc<DagLeaf>, FlowError> {
        let receiver = self.members[r].id();
        let leaf = self.members[s].build_leaf(receiver, value, fee, None, None)?;
        self.complete(s, leaf)
    }

    /// Any payment between participant ids.
    pub fn pay(
        &mut self,
        payer: ParticipantId,
        payee: ParticipantId,
        value: Amount,
        fee: Amount,
        condition: Option<ConditionSpec>,
        fulfils: Option<crate::crypto::Digest>,
    ) -> Result<Arc<DagLeaf>, FlowError> {
        let s = self.index_of(payer).ok_or(FlowError::Unknown(payer))?;
        let leaf = self.members[s].build_leaf(payee, value, fee, condition, fulfils)?;
        self.complete(s, leaf)
    }

    pub fn pay_hop(&mut self, hop: &HopPlan) -> Result<Arc<DagLeaf>, FlowError> {
        self.pay(hop.payer, hop.payee, hop.amount, 0, hop.condition.clone(), hop.fulfils)
    }

    /// One full settlement round closing at `window_end`: everyone
    /// endorses, member 0 proposes, everyone verifies and signs, and the
    /// finalized root is applied everywhere. `Ok(None)` when there is
    /// nothing to settle.
    pub fn finalize(&mut self, window_end: Tick) -> Result<Option<Arc<DagRoot>>, FinalizeError> {
        let endorsements = self.members.iter().filter_map(|m| endorse(m).map(|e| (m.id(), e))).collect();
        let window = SettlementWindow::new(window_end.saturating_sub(1), 1);
        let now = window.end();
        let Some(root) = propose_root(&self.members[0].dag, &endorsements, &window, now)? else {
            return Ok(None);
        };
        let leaves = self.members[0].dag.leaves_for(&root);
        let mut sigs = Vec::with_capacity(self.members.len());
        for m in &mut self.members {
            m.dag.catch_up(&leaves);
            verify_root(&m.dag, &root)?;
            sigs.push(sign_root(&m.key, &root));
        }
        let ring = self.members[0].dag.ring().clone();
        let root = match collect_and_finalize(&root, sigs, &ring)? {
            Finality::Finalized(r) => Arc::new(r),
            Finality::Pending { valid, needed } => return Err(FinalizeError::Pending { valid, needed }),
        };
        for m in &mut self.members {
            m.apply_finalized(root.clone())?;
        }
        self.history.push(self.members[0].dag.balances().clone());
        Ok(Some(root))
    }

    fn next_tick(&self, now: Tick) -> Tick {
        now.max(self.members[0].dag.last_root().window_end) + 1
    }
}

/// Several hyperedges sharing one key registry. Hyperedge `i` has id `i`.
#[derive(Clone, Debug)]
pub struct Web {
    pub groups: Vec<EdgeGroup>,
}

impl Web {
    pub fn new(rosters: &[Vec<u32>], balance: Amount) -> Self {
        let keys: Vec<Vec<KeyPair>> = rosters
            .iter()
            .enumerate()
            .map(|(e, ps)| ps.iter().map(|p| KeyPair::derive(1, HyperedgeId(e as u32), ParticipantId(*p))).collect())
            .collect();
        let registry: Registry = keys
            .iter()
            .enumerate()
            .map(|(e, ks)| {
                let id = HyperedgeId(e as u32);
                (id, KeyRing::new(id, ks.iter().map(|k| k.public()).collect()))
            })
            .collect();
        let registry = Arc::new(registry);
        let groups = keys
            .into_iter()
            .enumerate()
            .map(|(e, ks)| {
                let n = ks.len();
                EdgeGroup::new(HyperedgeId(e as u32), ks, &vec![balance; n], registry.clone())
            })
            .collect();
        Self { groups }
    }

    pub fn group(&self, i: usize) -> &EdgeGroup {
        &self.groups[i]
    }

    pub fn group_mut(&mut self, i: usize) -> &mut EdgeGroup {
        &mut self.groups[i]
    }

    pub fn member_mut(&mut self, edge: usize, p: ParticipantId) -> &mut Member {
        self.groups[edge].member_mut(p).expect("member of edge")
    }

    /// Commit the conditional leaf of hop `hop`.
    pub fn commit_hop(&mut self, route: &Route, hop: usize, now: Tick) -> Result<Arc<DagLeaf>, FlowError> {
        let plan = route.hops()[hop].clone();
        let cond = plan.condition.clone().expect("not the last hop");
        let source: Vec<ParticipantId> =
            self.groups[cond.source_hyperedge.0 as usize].members.iter().map(|m| m.id()).collect();
        let g = &mut self.groups[plan.hyperedge.0 as usize];
        let s = g.index_of(plan.payer).ok_or(FlowError::Unknown(plan.payer))?;
        let leaf = inter_pay_commit(&mut g.members[s], plan.payee, plan.amount, cond, &source, plan.fulfils, now)?;
        g.complete(s, leaf)
    }

    /// Run a route end to end: forward commits, the final plain payment,
    /// then proofs backward hop by hop. Returns each participant's net
    /// change summed across hyperedges.
    pub fn run_route(&mut self, route: &Route, now: Tick) -> Result<BTreeMap<ParticipantId, i128>, RouteRunError> {
        let before = self.totals();
        let hops = route.hops();
        let k = hops.len();
        let mut nonces = Vec::with_capacity(k);
        for i in 0..k - 1 {
            let leaf = self.commit_hop(route, i, now).map_err(|source| RouteRunError::Flow { hop: i, source })?;
            nonces.push(leaf.nonce);
        }
        let last = &mut self.groups[hops[k - 1].hyperedge.0 as usize];
        let leaf = last.pay_hop(&hops[k - 1]).map_err(|source| RouteRunError::Flow { hop: k - 1, source })?;
        nonces.push(leaf.nonce);
        let t = last.next_tick(now);
        last.finalize(t).map_err(|source| RouteRunError::Finalize { hop: k - 1, source })?;
        for i in (0..k - 1).rev() {
            let src = &self.groups[hops[i + 1].hyperedge.0 as usize];
            let proof = build_proof(&src.members[0].dag, &nonces[i + 1])
                .map_err(|source| RouteRunError::Proof { hop: i + 1, source })?;
            let proof = Arc::new(proof);
            let g = &mut self.groups[hops[i].hyperedge.0 as usize];
            for m in &mut g.members {
                m.dag
                    .attach_proof(&nonces[i], proof.clone())
                    .map_err(|source| RouteRunError::Attach { hop: i, source })?;
            }
            let t = g.next_tick(now);
            g.finalize(t).map_err(|source| RouteRunError::Finalize { hop: i, source })?;
        }
        let after = self.totals();
        Ok(after.into_iter().map(|(p, a)| (p, a - before.get(&p).copied().unwrap_or(0))).collect())
    }

    fn totals(&self) -> BTreeMap<ParticipantId, i128> {
        let mut out = BTreeMap::new();
        for g in &self.groups {
            let dag = &g.members[0].dag;
            for (p, b) in dag.edge().participants().iter().zip(dag.balances().as_slice()) {
                *out.entry(*p).or_insert(0) += i128::from(*b);
            }
        }
        out
    }
}
