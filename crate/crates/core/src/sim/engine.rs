//! Discrete-event engine. Nodes exchange messages over a delayed, per-link
//! FIFO network that may drop payment requests and replies. Each batch
//! ends with one settlement window per hyperedge, closed by phased root
//! consensus with rotating designated proposers.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{close_draft, verify_evidence, Arbiter, ChainError, EdgeStatus, Verdict};
use crate::consensus::{
    collect_and_finalize, endorse, propose_root, verify_root, ConditionalOutcome, DagRoot, Endorsement, Finality,
    IncludedLeaf, SettlementWindow,
};
use crate::crypto::{sign, Digest, KeyPair, Secret, Signature};
use crate::dag::{
    AdmitError, BuildError, ConditionSpec, DagLeaf, FraudEvidence, LeafBody, LocalDag, Member, ReceiverReject, Registry,
};
use crate::payments::{build_proof, inter_pay_commit, AttachError, CommitError, ProofOfTransfer};
use crate::sim::metrics::{aggregate, ratio, skew, BatchMetrics, LogEvent, RootPoint, RunReport, SafetyReport};
use crate::sim::scenario::{CloseMode, Profile, Scenario};
use crate::sim::workload::{generate_workload, stream, Intent, IntentKind};
use crate::state::{BalanceVector, SymbolicDelta};
use crate::types::{Amount, HyperedgeId, ParticipantId, Tick};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("liveness stall on {edge} at sequence {sequence} after {attempts} attempts: {diagnostic}")]
    LivenessStall { edge: HyperedgeId, sequence: u64, attempts: u32, diagnostic: String },
    #[error("funding {edge} failed: {source}")]
    Funding { edge: HyperedgeId, source: ChainError },
}

enum Msg {
    Request {
        edge: HyperedgeId,
        leaf: Arc<DagLeaf>,
    },
    Cosigned {
        edge: HyperedgeId,
        leaf: Arc<DagLeaf>,
    },
    Refused {
        edge: HyperedgeId,
        nonce: Digest,
        reason: &'static str,
    },
    Leaf {
        edge: HyperedgeId,
        leaf: Arc<DagLeaf>,
    },
    Evidence {
        edge: HyperedgeId,
        evidence: Arc<FraudEvidence>,
    },
    Proof {
        edge: HyperedgeId,
        nonce: Digest,
        proof: Arc<ProofOfTransfer>,
    },
    Endorse {
        edge: HyperedgeId,
        round: u64,
        endorsement: Endorsement,
    },
    Proposal {
        edge: HyperedgeId,
        round: u64,
        root: Arc<DagRoot>,
        leaves: Arc<[Arc<DagLeaf>]>,
    },
    /// `digest` is the signer's own hash of `root`.
    RootSig {
        edge: HyperedgeId,
        round: u64,
        root: Arc<DagRoot>,
        digest: Digest,
        sig: Signature,
    },
    Finalized {
        edge: HyperedgeId,
        root: Arc<DagRoot>,
        leaves: Arc<[Arc<DagLeaf>]>,
    },
}

#[derive(Clone, Copy)]
enum Phase {
    Propose,
    Sign,
    Collect,
    Deadline,
}

enum Payload {
    Deliver { from: ParticipantId, to: ParticipantId, msg: Msg },
    StartIntent(usize),
    RequestTimeout { who: ParticipantId, edge: HyperedgeId, nonce: Digest },
    Phase { edge: usize, round: u64, phase: Phase },
    CheckWindow,
}

struct Queued {
    at: Tick,
    seq: u64,
    payload: Payload,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct Net {
    queue: BinaryHeap<Reverse<Queued>>,
    seq: u64,
    now: Tick,
    links: HashMap<(u32, u32), Tick>,
    rng: Vec<ChaCha8Rng>,
    min_delay: Tick,
    max_delay: Tick,
    drop_rate: f64,
    in_flight: u64,
}

impl Net {
    fn at(&mut self, at: Tick, payload: Payload) {
        self.seq += 1;
        self.queue.push(Reverse(Queued { at, seq: self.seq, payload }));
    }

    /// Delay comes from the sender's stream; a link never reorders.
    fn send(&mut self, from: ParticipantId, to: ParticipantId, msg: Msg, lossy: bool) {
        let rng = &mut self.rng[from.0 as usize];
        if lossy && self.drop_rate > 0.0 && rng.gen_bool(self.drop_rate) {
            return;
        }
        let d = rng.gen_range(self.min_delay..=self.max_delay);
        let link = self.links.entry((from.0, to.0)).or_insert(0);
        let at = (self.now + d).max(*link);
        *link = at;
        self.in_flight += 1;
        self.at(at, Payload::Deliver { from, to, msg });
    }
}

#[derive(Clone, Copy, Debug)]
struct Task {
    intent: usize,
    step: usize,
    /// Upstream conditional this payment lets the payer claim.
    upstream: Option<(HyperedgeId, Digest)>,
}

#[derive(Default)]
struct Cons {
    round: u64,
    endorsements: BTreeMap<ParticipantId, Endorsement>,
    proposals: Vec<(Arc<DagRoot>, Arc<[Arc<DagLeaf>]>)>,
    sigs: BTreeMap<Digest, (Arc<DagRoot>, Vec<Signature>)>,
}

struct Node {
    profile: Option<Profile>,
    members: BTreeMap<HyperedgeId, Member>,
    queues: BTreeMap<HyperedgeId, VecDeque<Task>>,
    outstanding: BTreeMap<HyperedgeId, (Digest, Task)>,
    cons: BTreeMap<HyperedgeId, Cons>,
    /// Own downstream leaf -> upstream conditional it proves.
    relay: BTreeMap<Digest, (HyperedgeId, Digest)>,
    reported: BTreeSet<(HyperedgeId, ParticipantId)>,
    forks: HashMap<Digest, Secret>,
    forked_batch: Option<u64>,
    faked: BTreeSet<Digest>,
    rng: ChaCha8Rng,
}

impl Node {
    fn acts(&self) -> bool {
        self.profile != Some(Profile::Silent)
    }

    fn honest(&self) -> bool {
        self.profile.is_none()
    }
}

struct Step {
    edge: HyperedgeId,
    payer: ParticipantId,
    payee: ParticipantId,
    amount: Amount,
    fee: Amount,
    condition: Option<ConditionSpec>,
    fulfils: Option<Digest>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Status {
    Waiting,
    Sent,
    Committed,
    Settled,
    Expired,
    Failed,
}

struct IntentState {
    intent: Intent,
    steps: Vec<Step>,
    status: Vec<Status>,
    reason: Option<String>,
}

struct EdgeRun {
    round: u64,
    attempt: u32,
    sequence: u64,
    window_end: Tick,
    done: bool,
    proposals: u64,
    best_sigs: u64,
}

#[derive(Default)]
struct Book {
    intents: Vec<IntentState>,
    tags: HashMap<Digest, (usize, usize)>,
    leaf_owner: HashMap<Digest, (usize, usize)>,
    finalized_at: HashMap<Digest, Tick>,
    proof_at: HashMap<Digest, Tick>,
    fake_proofs: HashSet<Digest>,
    /// Committed conditionals not yet resolved: nonce -> (edge, timeout).
    pending_cond: BTreeMap<Digest, (usize, Tick)>,
    safety: SafetyReport,
    rejections: BTreeMap<String, u64>,
    events: Vec<LogEvent>,
    evidence: Vec<(HyperedgeId, FraudEvidence)>,
    applied: Vec<BTreeMap<u64, Digest>>,
    history: Vec<Vec<BalanceVector>>,
    edge_totals: Vec<u128>,
    /// Per batch, each hyperedge's root sequence at the batch's end.
    batch_end: Vec<Vec<u64>>,
    batch: u64,
    pending_starts: u64,
}

impl Book {
    fn reject(&mut self, code: &str) {
        *self.rejections.entry(code.to_string()).or_insert(0) += 1;
    }

    fn fail(&mut self, intent: usize, step: usize, reason: impl Into<String>) {
        let st = &mut self.intents[intent];
        st.status[step] = Status::Failed;
        st.reason.get_or_insert_with(|| reason.into());
    }
}

fn build_code(e: &BuildError) -> &'static str {
    match e {
        BuildError::InsufficientBalance { .. } => "insufficient_balance",
        BuildError::LockedOut => "locked_out",
        BuildError::Banned => "banned",
        BuildError::RevokedTip => "revoked_tip",
        BuildError::InFlight => "in_flight",
        BuildError::Fee(_) => "fee",
        BuildError::UnknownReceiver(_) | BuildError::SelfPayment | BuildError::ZeroValue => "bad_intent",
    }
}

fn commit_code(e: &CommitError) -> &'static str {
    match e {
        CommitError::TimeoutInPast { .. } => "timeout_passed",
        CommitError::ZeroRequiredValue | CommitError::ConnectorNotShared(_) => "bad_route",
        CommitError::Build(b) => build_code(b),
    }
}

fn refusal_code(r: &ReceiverReject) -> &'static str {
    match r {
        ReceiverReject::NotAddressedToMe => "not_addressed",
        ReceiverReject::Malformed(e) => e.code(),
        ReceiverReject::InsufficientBalance { .. } => "insufficient_balance",
        ReceiverReject::NonCanonicalDelta => "non_canonical_delta",
        ReceiverReject::StaleTip => "stale_tip",
    }
}

fn attach_code(e: &AttachError) -> &'static str {
    match e {
        AttachError::UnknownConditional => "unknown_conditional",
        AttachError::Rejected(r) => r.code(),
    }
}

fn steps_of(intent: &Intent) -> Vec<Step> {
    match &intent.kind {
        IntentKind::Intra { edge, sender, receiver, value, fee } => vec![Step {
            edge: *edge,
            payer: *sender,
            payee: *receiver,
            amount: *value,
            fee: *fee,
            condition: None,
            fulfils: None,
        }],
        IntentKind::Route { route } => route
            .hops()
            .into_iter()
            .map(|h| Step {
                edge: h.hyperedge,
                payer: h.payer,
                payee: h.payee,
                amount: h.amount,
                fee: 0,
                condition: h.condition,
                fulfils: h.fulfils,
            })
            .collect(),
    }
}

struct Engine<'a> {
    sc: &'a Scenario,
    rosters: Vec<Vec<ParticipantId>>,
    net: Net,
    nodes: Vec<Node>,
    edges: Vec<EdgeRun>,
    book: Book,
    arbiter: Arbiter,
    funding_total: u128,
    rounds: u64,
    batch_done: bool,
    drain: bool,
    stall: Option<SimError>,
}

pub fn run(sc: &Scenario) -> Result<RunReport, SimError> {
    let mut eng = Engine::new(sc)?;
    let mut next_id = 0;
    for b in 0..sc.batches {
        let start = eng.net.now + 1;
        let intents = generate_workload(sc, b, start, next_id, &mut stream(sc.seed, "workload", b));
        next_id += intents.len() as u64;
        eng.run_batch(b, intents)?;
    }
    // Conditionals still pending after the last batch get extra windows
    // with no new traffic until they release or expire.
    let mut b = sc.batches;
    let limit = b + 3 * eng.rosters.len() as u64 + 4;
    while !eng.book.pending_cond.is_empty() && b < limit {
        eng.drain = true;
        eng.run_batch(b, Vec::new())?;
        b += 1;
    }
    eng.close_chain();
    Ok(eng.report())
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario) -> Result<Self, SimError> {
        let rosters = sc.rosters();
        let population = sc.population() as usize;
        let mut arbiter = Arbiter::new(sc.chain.dispute_window);
        let mut registry = Registry::new();
        let mut funded = Vec::new();
        for (e, roster) in rosters.iter().enumerate() {
            let id = HyperedgeId(e as u32);
            let keys: Vec<KeyPair> = roster.iter().map(|p| KeyPair::derive(sc.seed, id, *p)).collect();
            let deposits = vec![sc.initial_balance; roster.len()];
            let f = arbiter.fund(id, &keys, &deposits).map_err(|source| SimError::Funding { edge: id, source })?;
            registry.insert(id, f.funding.policy.clone());
            funded.push((f, keys));
        }
        let registry = Arc::new(registry);
        let mut nodes: Vec<Node> = (0..population)
            .map(|i| Node {
                profile: sc.profile_of(ParticipantId(i as u32)),
                members: BTreeMap::new(),
                queues: BTreeMap::new(),
                outstanding: BTreeMap::new(),
                cons: BTreeMap::new(),
                relay: BTreeMap::new(),
                reported: BTreeSet::new(),
                forks: HashMap::new(),
                forked_batch: None,
                faked: BTreeSet::new(),
                rng: stream(sc.seed, "byz", i as u64),
            })
            .collect();
        let mut book = Book::default();
        let mut funding_total = 0;
        for (f, keys) in funded {
            let id = f.edge.id;
            let balances = BalanceVector(vec![sc.initial_balance; keys.len()]);
            let genesis = Arc::new(f.genesis.clone());
            for key in keys {
                let p = key.participant;
                let dag = LocalDag::new(
                    f.edge.clone(),
                    f.funding.policy.clone(),
                    registry.clone(),
                    &f.funding.bases,
                    genesis.clone(),
                    balances.clone(),
                );
                let node = &mut nodes[p.0 as usize];
                node.members.insert(id, Member::new(key, dag));
                node.queues.insert(id, VecDeque::new());
            }
            funding_total += balances.total();
            book.edge_totals.push(balances.total());
            book.history.push(vec![balances]);
            book.applied.push(BTreeMap::new());
        }
        book.safety.liveness_ok = true;
        book.events.push(LogEvent::Setup {
            seed: sc.seed,
            edges: rosters.clone(),
            initial_balance: sc.initial_balance,
            funding_total,
        });
        let net = Net {
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            links: HashMap::new(),
            rng: (0..population).map(|i| stream(sc.seed, "net", i as u64)).collect(),
            min_delay: sc.network.min_delay,
            max_delay: sc.network.max_delay,
            drop_rate: sc.network.drop_rate,
            in_flight: 0,
        };
        let edges = rosters
            .iter()
            .map(|_| EdgeRun {
                round: 0,
                attempt: 0,
                sequence: 0,
                window_end: 0,
                done: true,
                proposals: 0,
                best_sigs: 0,
            })
            .collect();
        Ok(Self {
            sc,
            rosters,
            net,
            nodes,
            edges,
            book,
            arbiter,
            funding_total,
            rounds: 0,
            batch_done: false,
            drain: false,
            stall: None,
        })
    }

    fn run_batch(&mut self, b: u64, intents: Vec<Intent>) -> Result<(), SimError> {
        self.book.batch = b;
        self.batch_done = false;
        let start = self.net.now + 1;
        self.book.events.push(LogEvent::BatchStart { batch: b, tick: start, intents: intents.len() as u64 });
        let mut last = start;
        for intent in intents {
            let idx = self.book.intents.len();
            let steps = steps_of(&intent);
            for (s, step) in steps.iter().enumerate() {
                if let Some(c) = &step.condition {
                    self.book.tags.insert(c.tag, (idx, s));
                }
            }
            last = last.max(intent.at);
            self.net.at(intent.at, Payload::StartIntent(idx));
            self.book.pending_starts += 1;
            let status = vec![Status::Waiting; steps.len()];
            self.book.intents.push(IntentState { intent, steps, status, reason: None });
        }
        self.net.at(last + 1, Payload::CheckWindow);
        while !self.batch_done {
            let Reverse(q) = self.net.queue.pop().expect("a window check or phase is always scheduled");
            debug_assert!(q.at >= self.net.now);
            self.net.now = q.at;
            self.dispatch(q.payload);
            if let Some(e) = self.stall.take() {
                return Err(e);
            }
        }
        let counts = std::mem::take(&mut self.book.rejections);
        self.book.events.push(LogEvent::Rejections { batch: b, counts });
        Ok(())
    }

    fn dispatch(&mut self, payload: Payload) {
        match payload {
            Payload::Deliver { from, to, msg } => {
                self.net.in_flight -= 1;
                self.deliver(from, to, msg);
            }
            Payload::StartIntent(i) => {
                self.book.pending_starts -= 1;
                self.start_intent(i);
            }
            Payload::RequestTimeout { who, edge, nonce } => self.give_up(who, edge, nonce, "timeout"),
            Payload::Phase { edge, round, phase } => {
                if self.edges[edge].round != round || self.edges[edge].done {
                    return;
                }
                match phase {
                    Phase::Propose => self.phase_propose(edge),
                    Phase::Sign => self.phase_sign(edge),
                    Phase::Collect => self.phase_collect(edge),
                    Phase::Deadline => self.phase_deadline(edge),
                }
            }
            Payload::CheckWindow => self.check_window(),
        }
    }

    fn honest_members(&self, e: usize) -> Vec<ParticipantId> {
        self.rosters[e].iter().copied().filter(|p| self.nodes[p.0 as usize].honest()).collect()
    }

    fn member(&self, p: ParticipantId, edge: HyperedgeId) -> &Member {
        &self.nodes[p.0 as usize].members[&edge]
    }

    fn broadcast(&mut self, from: ParticipantId, edge: HyperedgeId, leaf: &Arc<DagLeaf>) {
        for &q in &self.rosters[edge.0 as usize] {
            if q != from {
                self.net.send(from, q, Msg::Leaf { edge, leaf: leaf.clone() }, false);
            }
        }
    }

    // Payments.

    fn start_intent(&mut self, i: usize) {
        let step = &self.book.intents[i].steps[0];
        let (payer, edge) = (step.payer, step.edge);
        match self.nodes[payer.0 as usize].profile {
            Some(Profile::Silent) => self.book.fail(i, 0, "silent_sender"),
            Some(Profile::Forger) => {
                self.forge(i);
                self.book.fail(i, 0, "forged");
            }
            _ => {
                let task = Task { intent: i, step: 0, upstream: None };
                self.nodes[payer.0 as usize].queues.get_mut(&edge).expect("member").push_back(task);
                self.pump(payer, edge);
            }
        }
    }

    /// Start the next queued payment of `p` in `edge` if none is in flight.
    fn pump(&mut self, p: ParticipantId, edge: HyperedgeId) {
        let now = self.net.now;
        loop {
            let node = &mut self.nodes[p.0 as usize];
            if node.outstanding.contains_key(&edge) {
                return;
            }
            let Some(task) = node.queues.get_mut(&edge).and_then(|q| q.pop_front()) else {
                return;
            };
            let steps = &self.book.intents[task.intent].steps;
            // A queued forward may have waited; recheck the upstream margin.
            if task.upstream.is_some() {
                let timeout = steps[task.step - 1].condition.as_ref().expect("conditional upstream").timeout;
                if timeout < now + self.sc.forward_margin() {
                    self.book.fail(task.intent, task.step, "forward_refused");
                    continue;
                }
            }
            let step = &steps[task.step];
            let m = node.members.get_mut(&edge).expect("member");
            let built = match &step.condition {
                Some(c) => inter_pay_commit(
                    m,
                    step.payee,
                    step.amount,
                    c.clone(),
                    &self.rosters[c.source_hyperedge.0 as usize],
                    step.fulfils,
                    now,
                )
                .map_err(|e| commit_code(&e)),
                None => m.build_leaf(step.payee, step.amount, step.fee, None, step.fulfils).map_err(|e| build_code(&e)),
            };
            let leaf = match built {
                Ok(l) => l,
                Err(reason) => {
                    self.book.fail(task.intent, task.step, reason);
                    continue;
                }
            };
            let (payee, amount, fee) = (step.payee, step.amount, step.fee);
            if node.profile == Some(Profile::Equivocator)
                && step.condition.is_none()
                && node.forked_batch != Some(self.book.batch)
            {
                // Double-spend the same tip towards a second receiver.
                node.forked_batch = Some(self.book.batch);
                let others: Vec<ParticipantId> =
                    self.rosters[edge.0 as usize].iter().copied().filter(|q| *q != p && *q != payee).collect();
                let r2 = others[node.rng.gen_range(0..others.len())];
                let secret = m.secret_for(&leaf.prev_hash());
                if let (Some(secret), Ok(fork)) = (secret, m.build_fork(r2, amount, fee)) {
                    node.forks.insert(fork.nonce, secret);
                    self.net.send(p, r2, Msg::Request { edge, leaf: Arc::new(fork) }, true);
                }
            }
            let nonce = leaf.nonce;
            node.outstanding.insert(edge, (nonce, task));
            self.book.intents[task.intent].status[task.step] = Status::Sent;
            self.book.leaf_owner.insert(nonce, (task.intent, task.step));
            self.net.send(p, payee, Msg::Request { edge, leaf: Arc::new(leaf) }, true);
            self.net.at(now + self.sc.network.request_timeout, Payload::RequestTimeout { who: p, edge, nonce });
            return;
        }
    }

    fn give_up(&mut self, p: ParticipantId, edge: HyperedgeId, nonce: Digest, reason: &str) {
        let node = &mut self.nodes[p.0 as usize];
        match node.outstanding.get(&edge) {
            Some((n, _)) if *n == nonce => {}
            _ => return,
        }
        let (_, task) = node.outstanding.remove(&edge).expect("checked");
        node.members.get_mut(&edge).expect("member").abandon();
        self.book.fail(task.intent, task.step, reason);
        self.pump(p, edge);
    }

    fn on_request(&mut self, from: ParticipantId, to: ParticipantId, edge: HyperedgeId, leaf: Arc<DagLeaf>) {
        let Some(m) = self.nodes[to.0 as usize].members.get(&edge) else {
            return;
        };
        match m.receiver_verify(&leaf) {
            Ok(c) => self.net.send(to, from, Msg::Cosigned { edge, leaf: Arc::new(c) }, true),
            Err(r) => {
                let reason = refusal_code(&r);
                self.net.send(to, from, Msg::Refused { edge, nonce: leaf.nonce, reason }, false);
            }
        }
    }

    fn on_cosigned(&mut self, p: ParticipantId, edge: HyperedgeId, leaf: Arc<DagLeaf>) {
        let node = &mut self.nodes[p.0 as usize];
        if let Some(secret) = node.forks.remove(&leaf.nonce) {
            let mut fork = (*leaf).clone();
            fork.revocation.prev_secret = Some(secret);
            self.broadcast(p, edge, &Arc::new(fork));
            return;
        }
        let task = match node.outstanding.get(&edge) {
            Some((n, task)) if *n == leaf.nonce => *task,
            _ => return,
        };
        node.outstanding.remove(&edge);
        let m = node.members.get_mut(&edge).expect("member");
        match m.reveal_and_broadcast((*leaf).clone()) {
            Ok(l) => {
                if let Some(up) = task.upstream {
                    node.relay.insert(l.nonce, up);
                }
                self.book.intents[task.intent].status[task.step] = Status::Committed;
                if let Some(c) = &l.condition {
                    self.book.pending_cond.insert(l.nonce, (edge.0 as usize, c.timeout));
                }
                self.broadcast(p, edge, &l);
            }
            Err(e) => {
                m.abandon();
                self.book.fail(task.intent, task.step, format!("reveal:{e}"));
            }
        }
        self.pump(p, edge);
    }

    fn on_leaf(&mut self, from: ParticipantId, to: ParticipantId, edge: HyperedgeId, leaf: Arc<DagLeaf>) {
        let forged = self.nodes[from.0 as usize].profile == Some(Profile::Forger);
        let node = &mut self.nodes[to.0 as usize];
        let honest = node.honest();
        let Some(m) = node.members.get_mut(&edge) else {
            return;
        };
        match m.dag.admit_leaf(leaf.clone()) {
            Ok(_) => {
                if leaf.receiver == to && leaf.is_conditional() {
                    self.forward(to, edge, &leaf);
                }
            }
            Err(AdmitError::Duplicate) => {}
            Err(err) => {
                if honest {
                    self.book.reject(err.code());
                    if forged {
                        self.book.safety.forged_leaves_rejected += 1;
                    }
                }
                if err == AdmitError::RevokedTip {
                    if let Some(ev) = m.dag.check_equivocation(&leaf) {
                        self.raise(to, edge, ev);
                    }
                }
            }
        }
    }

    /// A connector received an upstream conditional: pay the next hop.
    fn forward(&mut self, q: ParticipantId, edge: HyperedgeId, leaf: &Arc<DagLeaf>) {
        let cond = leaf.condition.as_ref().expect("conditional");
        let Some(&(i, s)) = self.book.tags.get(&cond.tag) else {
            return;
        };
        if self.nodes[q.0 as usize].profile == Some(Profile::ConnectorAbort) {
            self.book.fail(i, s + 1, "connector_abort");
            return;
        }
        if cond.timeout < self.net.now + self.sc.forward_margin() {
            self.book.fail(i, s + 1, "forward_refused");
            return;
        }
        let next = self.book.intents[i].steps[s + 1].edge;
        let task = Task { intent: i, step: s + 1, upstream: Some((edge, leaf.nonce)) };
        self.nodes[q.0 as usize].queues.get_mut(&next).expect("connector is a member").push_back(task);
        self.pump(q, next);
    }

    fn raise(&mut self, p: ParticipantId, edge: HyperedgeId, ev: FraudEvidence) {
        let accused = ev.accused();
        let node = &mut self.nodes[p.0 as usize];
        if accused == p || !node.reported.insert((edge, accused)) {
            return;
        }
        node.members.get_mut(&edge).expect("member").dag.quarantine(accused);
        let known = self.book.evidence.iter().any(|(e, x)| *e == edge && x.accused() == accused);
        if !known {
            self.book.safety.equivocations_detected += 1;
            self.book.events.push(LogEvent::Evidence {
                edge,
                accused,
                kind: "equivocation".into(),
                tick: self.net.now,
                detector: p,
            });
            self.book.evidence.push((edge, ev.clone()));
        }
        let ev = Arc::new(ev);
        for &q in &self.rosters[edge.0 as usize] {
            if q != p {
                self.net.send(p, q, Msg::Evidence { edge, evidence: ev.clone() }, false);
            }
        }
    }

    fn on_evidence(&mut self, p: ParticipantId, edge: HyperedgeId, ev: &FraudEvidence) {
        let accused = ev.accused();
        let node = &mut self.nodes[p.0 as usize];
        if accused == p || node.reported.contains(&(edge, accused)) {
            return;
        }
        let m = node.members.get_mut(&edge).expect("member");
        if verify_evidence(m.dag.ring(), ev, None).is_ok() {
            node.reported.insert((edge, accused));
            m.dag.quarantine(accused);
        }
    }

    fn on_proof(&mut self, p: ParticipantId, edge: HyperedgeId, nonce: Digest, proof: Arc<ProofOfTransfer>) {
        let node = &mut self.nodes[p.0 as usize];
        let honest = node.honest();
        let m = node.members.get_mut(&edge).expect("member");
        match m.dag.attach_proof(&nonce, proof) {
            Ok(()) => {
                if honest {
                    self.book.proof_at.entry(nonce).or_insert(self.net.now);
                }
            }
            Err(e) => {
                if honest {
                    self.book.reject(&format!("proof:{}", attach_code(&e)));
                }
            }
        }
    }

    /// Garbled leaves: unsigned by the receiver, a forged co-signature, or a
    /// body that no longer matches its nonce.
    fn forge(&mut self, i: usize) {
        let intent_id = self.book.intents[i].intent.id;
        let step = &self.book.intents[i].steps[0];
        let (f, edge) = (step.payer, step.edge);
        let node = &mut self.nodes[f.0 as usize];
        let m = &node.members[&edge];
        let Ok(delta) = SymbolicDelta::canonical(m.dag.edge().n(), step.amount, step.fee) else {
            return;
        };
        let body = LeafBody {
            hyperedge: edge,
            sender: f,
            receiver: step.payee,
            value: step.amount,
            fee: step.fee,
            delta,
            prev_hash: m.dag.chain(f).expect("member").tip_hash(),
            next_hash: Digest(node.rng.gen()),
            condition: None,
            fulfils: None,
        };
        let mut leaf = body.sign(&m.key);
        match intent_id % 3 {
            0 => {}
            1 => leaf.receiver_sig = Some(sign(&m.key, &leaf.nonce).reattributed(step.payee)),
            _ => {
                leaf.receiver_sig = Some(sign(&m.key, &leaf.nonce).reattributed(step.payee));
                leaf.value += 1;
            }
        }
        self.broadcast(f, edge, &Arc::new(leaf));
    }

    fn deliver(&mut self, from: ParticipantId, to: ParticipantId, msg: Msg) {
        if !self.nodes[to.0 as usize].acts() {
            return;
        }
        match msg {
            Msg::Request { edge, leaf } => self.on_request(from, to, edge, leaf),
            Msg::Cosigned { edge, leaf } => self.on_cosigned(to, edge, leaf),
            Msg::Refused { edge, nonce, reason } => self.give_up(to, edge, nonce, reason),
            Msg::Leaf { edge, leaf } => self.on_leaf(from, to, edge, leaf),
            Msg::Evidence { edge, evidence } => self.on_evidence(to, edge, &evidence),
            Msg::Proof { edge, nonce, proof } => self.on_proof(to, edge, nonce, proof),
            Msg::Endorse { edge, round, endorsement } => {
                if let Some(c) = self.nodes[to.0 as usize].cons.get_mut(&edge) {
                    if c.round == round {
                        c.endorsements.insert(from, endorsement);
                    }
                }
            }
            Msg::Proposal { edge, round, root, leaves } => {
                if let Some(c) = self.nodes[to.0 as usize].cons.get_mut(&edge) {
                    if c.round == round {
                        c.proposals.push((root, leaves));
                    }
                }
            }
            Msg::RootSig { edge, round, root, digest, sig } => {
                if let Some(c) = self.nodes[to.0 as usize].cons.get_mut(&edge) {
                    if c.round == round {
                        c.sigs.entry(digest).or_insert_with(|| (root, Vec::new())).1.push(sig);
                    }
                }
            }
            Msg::Finalized { edge, root, leaves } => self.on_finalized(to, edge, root, &leaves),
        }
    }

    // Settlement windows and root consensus.

    fn check_window(&mut self) {
        let now = self.net.now;
        let busy = self.net.in_flight > 0
            || self.book.pending_starts > 0
            || self.nodes.iter().any(|n| !n.outstanding.is_empty() || n.queues.values().any(|q| !q.is_empty()));
        if busy {
            self.net.at(now + 1, Payload::CheckWindow);
            return;
        }
        if self.drain {
            // Without new traffic, wait for a proof or the next timeout.
            let proven = self.book.pending_cond.keys().any(|n| self.book.proof_at.contains_key(n));
            let next = self.book.pending_cond.values().map(|(_, t)| *t).min();
            if let (false, Some(t)) = (proven, next) {
                if now < t {
                    self.net.at(t, Payload::CheckWindow);
                    return;
                }
            }
        }
        for e in 0..self.edges.len() {
            self.start_attempt(e, 0);
        }
    }

    fn designated(&self, e: usize, sequence: u64, attempt: u32) -> Vec<ParticipantId> {
        let roster = &self.rosters[e];
        let n = roster.len();
        let k = (self.sc.consensus.proposers as usize).min(n);
        let offset = (sequence as usize * 7 + attempt as usize * k) % n;
        (0..k).map(|i| roster[(offset + i) % n]).collect()
    }

    fn start_attempt(&mut self, e: usize, attempt: u32) {
        let id = HyperedgeId(e as u32);
        let now = self.net.now;
        self.rounds += 1;
        let round = self.rounds;
        let h = self.honest_members(e)[0];
        let sequence = self.member(h, id).dag.last_root().sequence + 1;
        self.edges[e] = EdgeRun { round, attempt, sequence, window_end: now, done: false, proposals: 0, best_sigs: 0 };
        let proposers = self.designated(e, sequence, attempt);
        for &p in &self.rosters[e] {
            let node = &mut self.nodes[p.0 as usize];
            if !node.acts() {
                continue;
            }
            node.cons.insert(id, Cons { round, ..Cons::default() });
            if let Some(en) = endorse(&node.members[&id]) {
                for &q in &proposers {
                    self.net.send(p, q, Msg::Endorse { edge: id, round, endorsement: en.clone() }, false);
                }
            }
        }
        let step = self.sc.consensus.phase_ticks;
        for (i, phase) in [Phase::Propose, Phase::Sign, Phase::Collect, Phase::Deadline].into_iter().enumerate() {
            self.net.at(now + step * (i as Tick + 1), Payload::Phase { edge: e, round, phase });
        }
    }

    fn window_for(dag: &LocalDag, end: Tick) -> SettlementWindow {
        let prev = dag.last_root().window_end.min(end.saturating_sub(1));
        SettlementWindow::new(prev, end - prev)
    }

    fn phase_propose(&mut self, e: usize) {
        let id = HyperedgeId(e as u32);
        let run = &self.edges[e];
        let (round, w) = (run.round, run.window_end);
        for q in self.designated(e, run.sequence, run.attempt) {
            let node = &mut self.nodes[q.0 as usize];
            if !node.acts() {
                continue;
            }
            let Some(cons) = node.cons.get(&id).filter(|c| c.round == round) else {
                continue;
            };
            let m = &node.members[&id];
            let window = Self::window_for(&m.dag, w);
            let Ok(Some(mut root)) = propose_root(&m.dag, &cons.endorsements, &window, w) else {
                continue;
            };
            if node.profile == Some(Profile::Forger) {
                root.included.push(IncludedLeaf {
                    nonce: Digest(node.rng.gen()),
                    sender: q,
                    next_hash: Digest(node.rng.gen()),
                });
            }
            let leaves: Arc<[Arc<DagLeaf>]> = m.dag.leaves_for(&root).into();
            let root = Arc::new(root);
            for &r in &self.rosters[e] {
                let msg = Msg::Proposal { edge: id, round, root: root.clone(), leaves: leaves.clone() };
                self.net.send(q, r, msg, false);
            }
        }
    }

    fn phase_sign(&mut self, e: usize) {
        let id = HyperedgeId(e as u32);
        let run = &self.edges[e];
        let round = run.round;
        let proposers = self.designated(e, run.sequence, run.attempt);
        let mut seen = 0;
        // Members share proposal allocations, so hash each one once.
        let mut digests: Vec<(Arc<DagRoot>, Digest)> = Vec::new();
        for &p in &self.rosters[e] {
            let node = &mut self.nodes[p.0 as usize];
            if !node.acts() {
                continue;
            }
            let honest = node.honest();
            let Some(cons) = node.cons.get_mut(&id).filter(|c| c.round == round) else {
                continue;
            };
            let props = std::mem::take(&mut cons.proposals);
            if props.is_empty() {
                continue;
            }
            seen = seen.max(props.len() as u64);
            let m = node.members.get_mut(&id).expect("member");
            for (_, leaves) in &props {
                m.dag.catch_up(leaves);
            }
            let mut best: Option<(Digest, &Arc<DagRoot>)> = None;
            for (root, _) in &props {
                match verify_root(&m.dag, root) {
                    Ok(_) => {
                        let d = match digests.iter().find(|(r, _)| Arc::ptr_eq(r, root)) {
                            Some((_, d)) => *d,
                            None => {
                                let d = root.digest();
                                digests.push((root.clone(), d));
                                d
                            }
                        };
                        if best.as_ref().is_none_or(|(b, _)| d < *b) {
                            best = Some((d, root));
                        }
                    }
                    Err(err) => {
                        if honest {
                            self.book.reject(&format!("root:{}", err.code()));
                        }
                    }
                }
            }
            if let Some((digest, root)) = best {
                let sig = sign(&m.key, &digest);
                for &q in &proposers {
                    let msg = Msg::RootSig { edge: id, round, root: root.clone(), digest, sig };
                    self.net.send(p, q, msg, false);
                }
            }
        }
        self.edges[e].proposals = seen;
    }

    fn phase_collect(&mut self, e: usize) {
        let id = HyperedgeId(e as u32);
        let run = &self.edges[e];
        let round = run.round;
        let mut best_sigs = 0;
        for q in self.designated(e, run.sequence, run.attempt) {
            let node = &mut self.nodes[q.0 as usize];
            if !node.acts() {
                continue;
            }
            let Some(cons) = node.cons.get_mut(&id).filter(|c| c.round == round) else {
                continue;
            };
            let sigs = std::mem::take(&mut cons.sigs);
            let m = &node.members[&id];
            for (_, (root, s)) in sigs {
                best_sigs = best_sigs.max(s.len() as u64);
                if let Ok(Finality::Finalized(r)) = collect_and_finalize(&root, s, m.dag.ring()) {
                    let leaves: Arc<[Arc<DagLeaf>]> = m.dag.leaves_for(&r).into();
                    let r = Arc::new(r);
                    for &to in &self.rosters[e] {
                        self.net.send(
                            q,
                            to,
                            Msg::Finalized { edge: id, root: r.clone(), leaves: leaves.clone() },
                            false,
                        );
                    }
                    break;
                }
            }
        }
        self.edges[e].best_sigs = best_sigs;
    }

    fn phase_deadline(&mut self, e: usize) {
        let id = HyperedgeId(e as u32);
        let honest = self.honest_members(e);
        let run = &self.edges[e];
        let applied = honest.iter().all(|p| self.member(*p, id).dag.last_root().sequence >= run.sequence);
        if applied || (run.proposals == 0 && self.nothing_to_settle(e)) {
            self.finish_edge(e);
            return;
        }
        let run = &self.edges[e];
        self.book.events.push(LogEvent::AttemptFailed {
            edge: id,
            sequence: run.sequence,
            attempt: run.attempt,
            tick: self.net.now,
            proposals: run.proposals,
            best_signatures: run.best_sigs,
        });
        let attempts = run.attempt + 1;
        if attempts >= self.sc.consensus.max_attempts {
            self.book.safety.liveness_ok = false;
            self.stall = Some(SimError::LivenessStall {
                edge: id,
                sequence: run.sequence,
                attempts,
                diagnostic: format!(
                    "last attempt saw {} proposals and at most {} of {} signatures",
                    run.proposals,
                    run.best_sigs,
                    self.rosters[e].len()
                ),
            });
            return;
        }
        self.start_attempt(e, attempts);
    }

    /// Whether an honest proposer holding every honest endorsement would
    /// propose nothing. Used only to end a window with no traffic.
    fn nothing_to_settle(&self, e: usize) -> bool {
        let id = HyperedgeId(e as u32);
        let honest = self.honest_members(e);
        let ends = honest.iter().filter_map(|p| endorse(self.member(*p, id)).map(|en| (*p, en))).collect();
        let dag = &self.member(honest[0], id).dag;
        let w = self.edges[e].window_end;
        matches!(propose_root(dag, &ends, &Self::window_for(dag, w), w), Ok(None))
    }

    fn finish_edge(&mut self, e: usize) {
        self.edges[e].done = true;
        if self.edges.iter().all(|r| r.done) {
            let seqs = (0..self.edges.len())
                .map(|e| {
                    let h = self.honest_members(e)[0];
                    self.member(h, HyperedgeId(e as u32)).dag.last_root().sequence
                })
                .collect();
            self.book.batch_end.push(seqs);
            self.batch_done = true;
        }
    }

    fn on_finalized(&mut self, p: ParticipantId, edge: HyperedgeId, root: Arc<DagRoot>, leaves: &[Arc<DagLeaf>]) {
        let node = &mut self.nodes[p.0 as usize];
        let honest = node.honest();
        let m = node.members.get_mut(&edge).expect("member");
        if root.sequence != m.dag.last_root().sequence + 1 {
            return;
        }
        m.dag.catch_up(leaves);
        if let Err(err) = m.apply_finalized(root.clone()) {
            if honest {
                self.book.reject(&format!("finalized:{}", err.code()));
            }
            return;
        }
        if honest {
            let e = edge.0 as usize;
            let digest = m.dag.last_root_digest();
            match self.book.applied[e].get(&root.sequence) {
                None => {
                    self.book.applied[e].insert(root.sequence, digest);
                    self.check_root(p, edge, &root);
                }
                Some(d) if *d != digest => self.book.safety.divergent_roots += 1,
                Some(_) => {}
            }
        }
        self.after_root(p, edge, &root);
    }

    /// Node-side follow-ups to a newly applied root: relay proofs for
    /// downstream payments it made, then prune.
    fn after_root(&mut self, p: ParticipantId, edge: HyperedgeId, root: &DagRoot) {
        let node = &mut self.nodes[p.0 as usize];
        let due: Vec<Digest> = node.relay.keys().filter(|n| root.includes(n)).copied().collect();
        for d in due {
            let (up_edge, up_nonce) = node.relay.remove(&d).expect("listed");
            if let Ok(proof) = build_proof(&node.members[&edge].dag, &d) {
                let proof = Arc::new(proof);
                for &q in &self.rosters[up_edge.0 as usize] {
                    let msg = Msg::Proof { edge: up_edge, nonce: up_nonce, proof: proof.clone() };
                    self.net.send(p, q, msg, false);
                }
            }
        }
        if node.profile == Some(Profile::FakeProofRelayer) {
            let dag = &node.members[&edge].dag;
            let mut fakes = Vec::new();
            for (nonce, pc) in dag.conditionals() {
                if !node.faked.insert(*nonce) {
                    continue;
                }
                let cond = pc.leaf.condition.as_ref().expect("conditional");
                let mut leaf = (*pc.leaf).clone();
                leaf.hyperedge = cond.source_hyperedge;
                leaf.sender = cond.required_payer;
                leaf.receiver = cond.required_payee;
                leaf.value = cond.required_value;
                leaf.condition = None;
                leaf.fulfils = Some(cond.tag);
                let last = (**dag.last_root()).clone();
                fakes.push((*nonce, ProofOfTransfer { leaf, root_before: last.clone(), root_after: last }));
            }
            for (nonce, proof) in fakes {
                self.book.fake_proofs.insert(proof.digest());
                self.book.safety.fake_proofs_sent += 1;
                let proof = Arc::new(proof);
                for &q in &self.rosters[edge.0 as usize] {
                    self.net.send(p, q, Msg::Proof { edge, nonce, proof: proof.clone() }, false);
                }
            }
        }
        let keep = self.sc.consensus.keep_roots;
        self.nodes[p.0 as usize].members.get_mut(&edge).expect("member").dag.prune(keep);
    }

    /// Safety checks on the first honest application of a root.
    fn check_root(&mut self, p: ParticipantId, edge: HyperedgeId, root: &DagRoot) {
        let e = edge.0 as usize;
        let now = self.net.now;
        let dag = &self.nodes[p.0 as usize].members[&edge].dag;
        let book = &mut self.book;
        book.safety.roots_checked += 1;
        let leaves = dag.leaves_for(root);
        book.safety.unsigned_leaves_in_roots += (root.included.len() - leaves.len()) as u64;
        for l in &leaves {
            let revealed = l.is_conditional() || (l.revocation.prev_secret.is_some() && l.revocation.secret_matches());
            if !l.fully_signed(dag.ring()) || !revealed {
                book.safety.unsigned_leaves_in_roots += 1;
            }
            book.finalized_at.entry(l.nonce).or_insert(now);
            if let Some(&(i, s)) = book.leaf_owner.get(&l.nonce) {
                book.intents[i].status[s] = Status::Settled;
            }
        }
        let balances = dag.balances().clone();
        if balances.total() != book.edge_totals[e] {
            book.safety.conservation_violations += 1;
        }
        let (mut released, mut expired) = (0, 0);
        for o in &root.outcomes {
            book.pending_cond.remove(&o.nonce());
            match o {
                ConditionalOutcome::Released { proof, .. } => {
                    released += 1;
                    if book.fake_proofs.contains(&proof.digest()) {
                        book.safety.fake_proof_releases += 1;
                    }
                    if !book.finalized_at.contains_key(&proof.leaf.nonce) {
                        book.safety.releases_without_transfer += 1;
                    }
                }
                ConditionalOutcome::Expired { nonce } => {
                    expired += 1;
                    if let Some(&(i, s)) = book.leaf_owner.get(nonce) {
                        book.intents[i].status[s] = Status::Expired;
                    }
                }
            }
        }
        for (nonce, &(ce, timeout)) in &book.pending_cond {
            let proven = book.proof_at.get(nonce).is_some_and(|t| *t < root.window_end);
            if ce == e && proven && root.window_end < timeout {
                book.safety.ignored_proofs += 1;
            }
        }
        debug_assert_eq!(book.history[e].len() as u64, root.sequence);
        book.events.push(LogEvent::Root {
            edge,
            sequence: root.sequence,
            batch: book.batch,
            attempt: self.edges[e].attempt,
            tick: now,
            included: root.included.len() as u64,
            released,
            expired,
            balances: balances.0.clone(),
            total: balances.total(),
            skewness: skew(&balances),
        });
        book.history[e].push(balances);
    }

    // Closing on-chain.

    fn revoked_state_evidence(dag: &LocalDag, cheater: ParticipantId, posted: u64) -> Option<FraudEvidence> {
        let chain = dag.chain(cheater)?;
        for leaf in chain.leaves().iter().rev() {
            if leaf.revocation.prev_secret.is_none() {
                continue;
            }
            if let Some(r) = dag.roots().iter().find(|r| r.sequence > posted && r.includes(&leaf.nonce)) {
                return Some(FraudEvidence::RevokedState { leaf: (**leaf).clone(), newer_root: (**r).clone() });
            }
        }
        None
    }

    fn close_chain(&mut self) {
        if self.sc.chain.close == CloseMode::None {
            self.book.events.extend(self.arbiter.log().iter().cloned().map(|event| LogEvent::Chain { event }));
            return;
        }
        self.arbiter.advance_to(self.net.now + 1);
        let mut disputed = Vec::new();
        for e in 0..self.rosters.len() {
            let id = HyperedgeId(e as u32);
            let h = self.honest_members(e)[0];
            let hdag = &self.nodes[h.0 as usize].members[&id].dag;
            let latest = (**hdag.last_root()).clone();
            let balances = self.book.history[e][latest.sequence as usize].clone();
            let roster = &self.rosters[e];
            let stale =
                roster.iter().copied().find(|p| self.nodes[p.0 as usize].profile == Some(Profile::StaleRootPoster));
            let fraud = self.book.evidence.iter().find(|(x, _)| *x == id).map(|(_, ev)| ev.clone());
            match (stale, fraud) {
                (Some(s), _) if latest.sequence >= 1 => {
                    let k = latest.sequence.saturating_sub(2);
                    let posted = (*hdag.roots()[k as usize]).clone();
                    let posted_balances = self.book.history[e][k as usize].clone();
                    if self.arbiter.unilateral_close(id, s, &posted, &posted_balances).is_ok() {
                        disputed.push(id);
                        match Self::revoked_state_evidence(hdag, s, k) {
                            Some(ev) => {
                                let _ = self.arbiter.challenge_fraud(id, h, &ev, Some((&latest, &balances)));
                            }
                            None if latest.sequence > k => {
                                let _ = self.arbiter.challenge_newer(id, h, &latest, &balances);
                            }
                            None => {}
                        }
                    }
                }
                (_, Some(ev)) => {
                    if self.arbiter.unilateral_close(id, h, &latest, &balances).is_ok() {
                        disputed.push(id);
                        let _ = self.arbiter.challenge_fraud(id, h, &ev, None);
                    }
                }
                _ => {
                    let digest = close_draft(hdag.edge(), &latest, &balances).digest();
                    let sigs: Vec<Signature> = roster
                        .iter()
                        .filter(|p| self.nodes[p.0 as usize].acts())
                        .map(|p| sign(&self.nodes[p.0 as usize].members[&id].key, &digest))
                        .collect();
                    if self.arbiter.cooperative_close(id, &latest, &balances, &sigs).is_err()
                        && self.arbiter.unilateral_close(id, h, &latest, &balances).is_ok()
                    {
                        disputed.push(id);
                    }
                }
            }
        }
        let h = self.arbiter.height() + self.arbiter.dispute_window();
        self.arbiter.advance_to(h);
        for id in disputed {
            let _ = self.arbiter.settle_dispute(id);
        }
        // A close favors a cheater if it settles on anything but the latest
        // honest root, or pays a convicted cheater.
        for e in 0..self.rosters.len() {
            let id = HyperedgeId(e as u32);
            let Some(EdgeStatus::Closed { close, verdict }) = self.arbiter.record(id).map(|r| &r.status) else {
                continue;
            };
            let h = self.honest_members(e)[0];
            let latest = self.member(h, id).dag.last_root().digest();
            let convicted_paid = match verdict {
                Verdict::Penalized { cheater } => close.outputs.iter().any(|(q, a)| q == cheater && *a > 0),
                Verdict::Settled => false,
            };
            if close.root != latest || convicted_paid {
                self.book.safety.cheater_favored += 1;
            }
        }
        if !self.arbiter.audit().conserved() {
            self.book.safety.conservation_violations += 1;
        }
        self.book.events.extend(self.arbiter.log().iter().cloned().map(|event| LogEvent::Chain { event }));
    }

    // Results.

    fn report(mut self) -> RunReport {
        let book = &mut self.book;
        let nb = book.batch_end.len();
        let mut attempted = vec![0u64; nb];
        let mut succeeded = vec![0u64; nb];
        let mut reasons = vec![BTreeMap::<String, u64>::new(); nb];
        let mut expected: BTreeMap<ParticipantId, i128> = BTreeMap::new();
        let mut intent_events = Vec::new();
        for st in &book.intents {
            let b = st.intent.batch as usize;
            attempted[b] += 1;
            let all = st.status.iter().all(|s| *s == Status::Settled);
            let any = st.status.contains(&Status::Settled);
            let reason = if all {
                None
            } else if let Some(r) = &st.reason {
                Some(r.clone())
            } else if st.status.contains(&Status::Expired) {
                Some("expired".to_string())
            } else if st.status.iter().any(|s| matches!(s, Status::Sent | Status::Committed)) {
                Some("dropped".to_string())
            } else {
                Some("unresolved".to_string())
            };
            match &reason {
                None => succeeded[b] += 1,
                Some(r) => *reasons[b].entry(r.clone()).or_insert(0) += 1,
            }
            if let IntentKind::Route { .. } = st.intent.kind {
                if all {
                    book.safety.routes_completed += 1;
                } else {
                    book.safety.routes_aborted += 1;
                    if any {
                        book.safety.partial_routes += 1;
                    }
                }
            }
            for (step, status) in st.steps.iter().zip(&st.status) {
                if *status != Status::Settled {
                    continue;
                }
                *expected.entry(step.payer).or_insert(0) -= i128::from(step.amount + step.fee);
                *expected.entry(step.payee).or_insert(0) += i128::from(step.amount);
                let roster = &self.rosters[step.edge.0 as usize];
                if step.fee > 0 {
                    let share = i128::from(step.fee / (roster.len() as Amount - 2));
                    for q in roster.iter().filter(|q| **q != step.payer && **q != step.payee) {
                        *expected.entry(*q).or_insert(0) += share;
                    }
                }
            }
            let (receiver, value, edges) = match &st.intent.kind {
                IntentKind::Intra { edge, receiver, value, .. } => (*receiver, *value, vec![*edge]),
                IntentKind::Route { route } => (route.receiver, route.value, route.edges.clone()),
            };
            intent_events.push(LogEvent::Intent {
                id: st.intent.id,
                batch: st.intent.batch,
                tick: st.intent.at,
                sender: st.intent.sender(),
                receiver,
                value,
                edges,
                outcome: if all { "success" } else { "failure" }.to_string(),
                reason,
            });
        }
        let mut actual: BTreeMap<ParticipantId, i128> = BTreeMap::new();
        for (e, roster) in self.rosters.iter().enumerate() {
            let h = &book.history[e];
            let (first, last) = (&h[0], h.last().expect("genesis"));
            for (i, p) in roster.iter().enumerate() {
                *actual.entry(*p).or_insert(0) += i128::from(last.get(i)) - i128::from(first.get(i));
            }
        }
        let everyone: BTreeSet<ParticipantId> = actual.keys().chain(expected.keys()).copied().collect();
        book.safety.accounting_mismatches = everyone
            .iter()
            .filter(|p| actual.get(p).copied().unwrap_or(0) != expected.get(p).copied().unwrap_or(0))
            .count() as u64;

        let batches: Vec<BatchMetrics> = (0..nb)
            .map(|b| {
                let seqs = &book.batch_end[b];
                BatchMetrics {
                    root_index: seqs[0],
                    batch: b as u64,
                    attempted: attempted[b],
                    succeeded: succeeded[b],
                    failed: attempted[b] - succeeded[b],
                    failed_by_reason: reasons[b].clone(),
                    success_ratio: ratio(succeeded[b], attempted[b]),
                    skewness: skew(&book.history[0][seqs[0] as usize]),
                    total_balance: seqs.iter().enumerate().map(|(e, s)| book.history[e][*s as usize].total()).sum(),
                }
            })
            .collect();
        let aggregate = aggregate(&batches);
        let edges = book
            .history
            .iter()
            .enumerate()
            .map(|(e, h)| {
                let points = h
                    .iter()
                    .enumerate()
                    .map(|(s, b)| RootPoint { sequence: s as u64, skewness: skew(b), total: b.total() })
                    .collect();
                (HyperedgeId(e as u32), points)
            })
            .collect();
        let audit = self.arbiter.audit();
        let mut events = std::mem::take(&mut book.events);
        events.extend(intent_events);
        events.push(LogEvent::Summary {
            attempted: aggregate.attempted,
            succeeded: aggregate.succeeded,
            success_ratio: aggregate.success_ratio,
            max_skewness: aggregate.max_skewness,
            audit,
            safety: book.safety.clone(),
        });
        RunReport {
            batches,
            aggregate,
            edges,
            safety: book.safety.clone(),
            audit,
            funding_total: self.funding_total,
            events,
        }
    }
}
