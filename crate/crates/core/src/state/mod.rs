//! Hyperedge membership, balance vectors, Merkle commitments and the
//! skewness metric.

mod merkle;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Encoder;
use crate::crypto::Digest;
use crate::types::{Amount, HyperedgeId, ParticipantId};

pub use merkle::{merkle_leaf, merkle_root, merkle_verify, root_of_leaves, MerkleProof};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("participant {0} listed twice")]
    DuplicateParticipant(ParticipantId),
    #[error("hyperedge needs at least 3 participants, got {0}")]
    TooFewParticipants(usize),
    #[error("sender and receiver are the same participant (index {0})")]
    SelfPayment(usize),
    #[error("fee {fee} is not divisible by n-2 = {divisor}")]
    FeeNotDivisible { fee: Amount, divisor: u64 },
    #[error("balance of participant at index {index} would become {value}")]
    NegativeBalance { index: usize, value: i128 },
    #[error("vector length {got} does not match hyperedge size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for {n} participants")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("skewness undefined for an all-zero balance vector")]
    ZeroTotal,
    #[error("amount overflow")]
    Overflow,
}

/// Participant set `P` of one hyperedge, in funding order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperedge {
    pub id: HyperedgeId,
    participants: Vec<ParticipantId>,
}

impl Hyperedge {
    pub fn new(id: HyperedgeId, participants: Vec<ParticipantId>) -> Result<Self, StateError> {
        if participants.len() < 3 {
            return Err(StateError::TooFewParticipants(participants.len()));
        }
        let mut seen = participants.clone();
        seen.sort();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(StateError::DuplicateParticipant(w[0]));
        }
        Ok(Self { id, participants })
    }

    pub fn n(&self) -> usize {
        self.participants.len()
    }

    pub fn participants(&self) -> &[ParticipantId] {
        &self.participants
    }

    pub fn participant(&self, index: usize) -> ParticipantId {
        self.participants[index]
    }

    pub fn index_of(&self, p: ParticipantId) -> Option<usize> {
        self.participants.iter().position(|q| *q == p)
    }

    pub fn contains(&self, p: ParticipantId) -> bool {
        self.index_of(p).is_some()
    }
}

/// Non-negative balances, index-aligned with `Hyperedge::participants`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BalanceVector(pub Vec<Amount>);

impl BalanceVector {
    pub fn uniform(n: usize, amount: Amount) -> Self {
        Self(vec![amount; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> u128 {
        self.0.iter().map(|b| u128::from(*b)).sum()
    }

    pub fn get(&self, index: usize) -> Amount {
        self.0[index]
    }

    pub fn as_slice(&self) -> &[Amount] {
        &self.0
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u32(self.0.len() as u32);
        for b in &self.0 {
            e.u64(*b);
        }
    }

    /// Vector with entry `index` removed.
    pub fn without(&self, index: usize) -> BalanceVector {
        let mut v = self.0.clone();
        v.remove(index);
        BalanceVector(v)
    }
}

/// Signed per-participant change; payment deltas sum to exactly zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BalanceDelta(pub Vec<i64>);

impl BalanceDelta {
    pub fn sum(&self) -> i128 {
        self.0.iter().map(|d| i128::from(*d)).sum()
    }
}

/// Merkle root `R̂` over a balance vector, tagged with the root sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCommitment {
    pub root: Digest,
    pub height: u64,
}

impl StateCommitment {
    pub fn encode(&self, e: &mut Encoder) {
        e.digest(&self.root).u64(self.height);
    }
}

pub fn commit(edge: &Hyperedge, balances: &BalanceVector, height: u64) -> StateCommitment {
    StateCommitment { root: merkle_root(edge.participants(), balances.as_slice()), height }
}

pub fn merkle_prove(edge: &Hyperedge, balances: &BalanceVector, index: usize) -> Result<MerkleProof, StateError> {
    let leaves = merkle::balance_leaves(edge.participants(), balances.as_slice());
    merkle::prove_leaves(&leaves, index).ok_or(StateError::IndexOutOfRange { index, n: leaves.len() })
}

/// `ΔB = [-v - f, +v, f/(n-2), …]` in participant order.
pub fn payment_delta(
    n: usize,
    sender: usize,
    receiver: usize,
    value: Amount,
    fee: Amount,
) -> Result<BalanceDelta, StateError> {
    let sym = SymbolicDelta::canonical(n, value, fee)?;
    if sender == receiver {
        return Err(StateError::SelfPayment(sender));
    }
    for i in [sender, receiver] {
        if i >= n {
            return Err(StateError::IndexOutOfRange { index: i, n });
        }
    }
    Ok(sym.to_dense(n, sender, receiver))
}

/// Element-wise `B + ΣΔB`, rejecting any negative result.
pub fn apply_delta(balances: &BalanceVector, deltas: &[BalanceDelta]) -> Result<BalanceVector, StateError> {
    let n = balances.len();
    let mut acc: Vec<i128> = balances.0.iter().map(|b| i128::from(*b)).collect();
    for d in deltas {
        if d.0.len() != n {
            return Err(StateError::LengthMismatch { expected: n, got: d.0.len() });
        }
        for (a, x) in acc.iter_mut().zip(&d.0) {
            *a += i128::from(*x);
        }
    }
    to_balances(acc)
}

fn to_balances(acc: Vec<i128>) -> Result<BalanceVector, StateError> {
    acc.into_iter()
        .enumerate()
        .map(|(index, value)| {
            if value < 0 {
                Err(StateError::NegativeBalance { index, value })
            } else {
                Amount::try_from(value).map_err(|_| StateError::Overflow)
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(BalanceVector)
}

/// The three numbers a payment leaf commits to instead of a dense vector:
/// the sender debit, the receiver credit and the per-bystander fee share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolicDelta {
    pub sender_debit: Amount,
    pub receiver_credit: Amount,
    pub fee_share: Amount,
}

impl SymbolicDelta {
    pub fn canonical(n: usize, value: Amount, fee: Amount) -> Result<Self, StateError> {
        if n < 3 {
            return Err(StateError::TooFewParticipants(n));
        }
        let divisor = (n - 2) as u64;
        if !fee.is_multiple_of(divisor) {
            return Err(StateError::FeeNotDivisible { fee, divisor });
        }
        Ok(Self {
            sender_debit: value.checked_add(fee).ok_or(StateError::Overflow)?,
            receiver_credit: value,
            fee_share: fee / divisor,
        })
    }

    pub fn to_dense(&self, n: usize, sender: usize, receiver: usize) -> BalanceDelta {
        let mut d = vec![self.fee_share as i64; n];
        d[sender] = -(self.sender_debit as i64);
        d[receiver] = self.receiver_credit as i64;
        BalanceDelta(d)
    }

    pub fn encode(&self, e: &mut Encoder) {
        e.u64(self.sender_debit).u64(self.receiver_credit).u64(self.fee_share);
    }
}

/// O(1)-per-payment accumulator for sums of payment deltas.
///
/// Bystander fee shares go to everyone except the two parties; they are
/// tracked as a common pool with per-party corrections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeltaAccumulator {
    direct: Vec<i128>,
    pool: i128,
}

impl DeltaAccumulator {
    pub fn new(n: usize) -> Self {
        Self { direct: vec![0; n], pool: 0 }
    }

    fn add_signed(&mut self, sender: usize, receiver: usize, d: &SymbolicDelta, sign: i128) {
        let share = i128::from(d.fee_share);
        self.direct[sender] -= sign * (i128::from(d.sender_debit) + share);
        self.direct[receiver] += sign * (i128::from(d.receiver_credit) - share);
        self.pool += sign * share;
    }

    pub fn add(&mut self, sender: usize, receiver: usize, d: &SymbolicDelta) {
        self.add_signed(sender, receiver, d, 1);
    }

    pub fn remove(&mut self, sender: usize, receiver: usize, d: &SymbolicDelta) {
        self.add_signed(sender, receiver, d, -1);
    }

    pub fn net(&self, index: usize) -> i128 {
        self.direct[index] + self.pool
    }

    pub fn is_zero(&self) -> bool {
        self.pool == 0 && self.direct.iter().all(|d| *d == 0)
    }

    pub fn apply(&self, balances: &BalanceVector) -> Result<BalanceVector, StateError> {
        if balances.len() != self.direct.len() {
            return Err(StateError::LengthMismatch { expected: self.direct.len(), got: balances.len() });
        }
        to_balances(balances.0.iter().enumerate().map(|(i, b)| i128::from(*b) + self.net(i)).collect())
    }
}

/// Mean relative deviation from the equal share:
/// `S(B) = (1/n) Σ |b_i − b̄| / b̄`.
pub fn skewness(balances: &BalanceVector) -> Result<f64, StateError> {
    let n = balances.len();
    let total = balances.total();
    if n == 0 || total == 0 {
        return Err(StateError::ZeroTotal);
    }
    let mean = total as f64 / n as f64;
    let dev: f64 = balances.0.iter().map(|b| (*b as f64 - mean).abs()).sum();
    Ok(dev / (n as f64 * mean))
}

/// `S_max(n) = 2(n−1)/n`, attained when one participant holds everything.
pub fn skewness_max(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    2.0 * (n as f64 - 1.0) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{hash, hash_pair};
    use proptest::prelude::*;

    fn ids(n: u32) -> Vec<ParticipantId> {
        (0..n).map(ParticipantId).collect()
    }

    fn edge(n: u32) -> Hyperedge {
        Hyperedge::new(HyperedgeId(0), ids(n)).unwrap()
    }

    #[test]
    fn hyperedge_rejects_duplicates_and_small_sets() {
        assert_eq!(Hyperedge::new(HyperedgeId(0), ids(2)), Err(StateError::TooFewParticipants(2)));
        let dup = vec![ParticipantId(1), ParticipantId(2), ParticipantId(1)];
        assert_eq!(Hyperedge::new(HyperedgeId(0), dup), Err(StateError::DuplicateParticipant(ParticipantId(1))));
    }

    #[test]
    fn leaf_is_deterministic_and_binding() {
        let u1 = ParticipantId(1);
        let u2 = ParticipantId(2);
        assert_eq!(merkle_leaf(u1, 5), merkle_leaf(u1, 5));
        assert_ne!(merkle_leaf(u1, 5), merkle_leaf(u1, 6));
        assert_ne!(merkle_leaf(u1, 5), merkle_leaf(u2, 5));
    }

    #[test]
    fn single_leaf_root_is_the_leaf() {
        let p = [ParticipantId(4)];
        assert_eq!(merkle_root(&p, &[9]), merkle_leaf(p[0], 9));
    }

    #[test]
    fn swapped_balances_commit_differently() {
        let p = ids(2);
        assert_ne!(merkle_root(&p, &[3, 1]), merkle_root(&p, &[1, 3]));
    }

    #[test]
    fn four_leaf_root_matches_hand_built_tree() {
        let p = ids(4);
        let b = [10, 20, 30, 40];
        let l: Vec<Digest> = (0..4).map(|i| merkle_leaf(p[i], b[i])).collect();
        // Hand-built: hash(hash(L1‖L2) ‖ hash(L3‖L4)) with raw concatenation.
        let cat = |a: &Digest, b: &Digest| {
            let mut v = a.0.to_vec();
            v.extend_from_slice(&b.0);
            hash(&v)
        };
        let expected = cat(&cat(&l[0], &l[1]), &cat(&l[2], &l[3]));
        assert_eq!(merkle_root(&p, &b), expected);
        assert_eq!(hash_pair(&l[0], &l[1]), cat(&l[0], &l[1]));
    }

    #[test]
    fn three_leaf_tree_duplicates_last_node() {
        let p = ids(3);
        let b = [1, 2, 3];
        let l: Vec<Digest> = (0..3).map(|i| merkle_leaf(p[i], b[i])).collect();
        let expected = hash_pair(&hash_pair(&l[0], &l[1]), &hash_pair(&l[2], &l[2]));
        assert_eq!(merkle_root(&p, &b), expected);
    }

    #[test]
    fn proofs_verify_only_at_their_own_position() {
        let e = edge(4);
        let b = BalanceVector(vec![5, 6, 7, 8]);
        let root = commit(&e, &b, 0).root;
        for i in 0..4 {
            let leaf = merkle_leaf(e.participant(i), b.get(i));
            let proof = merkle_prove(&e, &b, i).unwrap();
            assert!(merkle_verify(&root, &leaf, &proof));
            assert!(!merkle_verify(&hash(b"other"), &leaf, &proof));
            for j in 0..4 {
                if j != i {
                    let moved = MerkleProof { index: j, ..proof.clone() };
                    assert!(!merkle_verify(&root, &leaf, &moved), "i={i} j={j}");
                }
            }
        }
        assert_eq!(merkle_prove(&e, &b, 4), Err(StateError::IndexOutOfRange { index: 4, n: 4 }));
    }

    #[test]
    fn odd_tail_proof_cannot_claim_a_phantom_position() {
        let e = edge(3);
        let b = BalanceVector(vec![5, 6, 7]);
        let root = commit(&e, &b, 0).root;
        let leaf = merkle_leaf(e.participant(2), 7);
        let proof = merkle_prove(&e, &b, 2).unwrap();
        assert!(merkle_verify(&root, &leaf, &proof));
        let phantom = MerkleProof { index: 3, ..proof };
        assert!(!merkle_verify(&root, &leaf, &phantom));
    }

    #[test]
    fn payment_delta_examples() {
        assert_eq!(payment_delta(4, 0, 1, 10, 2).unwrap().0, vec![-12, 10, 1, 1]);
        assert_eq!(payment_delta(3, 0, 1, 5, 0).unwrap().0, vec![-5, 5, 0]);
        assert_eq!(payment_delta(4, 1, 1, 5, 0), Err(StateError::SelfPayment(1)));
        assert_eq!(payment_delta(5, 0, 1, 5, 2), Err(StateError::FeeNotDivisible { fee: 2, divisor: 3 }));
    }

    #[test]
    fn apply_delta_examples() {
        let b = BalanceVector(vec![100; 4]);
        assert_eq!(apply_delta(&b, &[]).unwrap(), b);
        let d = payment_delta(4, 0, 1, 10, 2).unwrap();
        assert_eq!(apply_delta(&b, &[d]).unwrap().0, vec![88, 110, 101, 101]);
        let over = payment_delta(4, 0, 1, 99, 2).unwrap();
        assert_eq!(apply_delta(&b, &[over]), Err(StateError::NegativeBalance { index: 0, value: -1 }));
    }

    #[test]
    fn skewness_examples() {
        assert_eq!(skewness(&BalanceVector::uniform(10, 7)).unwrap(), 0.0);
        assert!((skewness(&BalanceVector(vec![3, 1])).unwrap() - 0.5).abs() < 1e-12);
        let mut one = vec![0; 150];
        one[17] = 1_000;
        let s = skewness(&BalanceVector(one)).unwrap();
        assert!((s - 2.0 * 149.0 / 150.0).abs() < 1e-12);
        assert!((s - 1.986).abs() < 1e-3);
        assert_eq!(skewness(&BalanceVector(vec![0, 0, 0])), Err(StateError::ZeroTotal));
    }

    #[test]
    fn skewness_max_examples() {
        assert!((skewness_max(150) - 1.986_666).abs() < 1e-6);
        assert_eq!(skewness_max(1), 0.0);
        assert_eq!(skewness_max(2), 1.0);
        // Direct enumeration of the one-holder vector for n = 2.
        assert_eq!(skewness(&BalanceVector(vec![5, 0])).unwrap(), skewness_max(2));
    }

    proptest! {
        #[test]
        fn payment_delta_sums_to_zero(
            n in 3usize..=200,
            v in 1u64..1_000_000,
            share in 0u64..1_000,
            s_seed in any::<u32>(),
            r_seed in any::<u32>(),
        ) {
            let s = s_seed as usize % n;
            let r = (s + 1 + r_seed as usize % (n - 1)) % n;
            let d = payment_delta(n, s, r, v, share * (n as u64 - 2)).unwrap();
            prop_assert_eq!(d.sum(), 0);
        }

        #[test]
        fn accumulator_matches_dense_application(
            n in 3usize..=12,
            payments in prop::collection::vec((any::<u16>(), any::<u16>(), 1u64..50, 0u64..4), 0..40),
        ) {
            let start = BalanceVector::uniform(n, 10_000);
            let mut acc = DeltaAccumulator::new(n);
            let mut dense = Vec::new();
            for (s, r, v, share) in payments {
                let s = s as usize % n;
                let r = (s + 1 + r as usize % (n - 1)) % n;
                let fee = share * (n as u64 - 2);
                let sym = SymbolicDelta::canonical(n, v, fee).unwrap();
                acc.add(s, r, &sym);
                dense.push(payment_delta(n, s, r, v, fee).unwrap());
            }
            let a = acc.apply(&start).unwrap();
            prop_assert_eq!(&a, &apply_delta(&start, &dense).unwrap());
            prop_assert_eq!(a.total(), start.total());
        }

        #[test]
        fn commitment_is_binding(a in prop::collection::vec(0u64..1000, 3..20), flip in any::<usize>(), bump in 1u64..10) {
            let e = Hyperedge::new(HyperedgeId(0), (0..a.len() as u32).map(ParticipantId).collect()).unwrap();
            let mut b = a.clone();
            let i = flip % b.len();
            b[i] += bump;
            prop_assert_ne!(commit(&e, &BalanceVector(a), 0).root, commit(&e, &BalanceVector(b), 0).root);
        }

        #[test]
        fn skewness_is_bounded(v in prop::collection::vec(0u64..10_000, 1..200)) {
            let b = BalanceVector(v.clone());
            prop_assume!(b.total() > 0);
            let s = skewness(&b).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert!(s <= skewness_max(v.len()) + 1e-12);
            let uniform = v.iter().all(|x| *x == v[0]);
            prop_assert_eq!(s == 0.0, uniform);
        }

        #[test]
        fn proofs_are_complete(v in prop::collection::vec(0u64..10_000, 3..40), pick in any::<usize>()) {
            let e = Hyperedge::new(HyperedgeId(0), (0..v.len() as u32).map(ParticipantId).collect()).unwrap();
            let b = BalanceVector(v);
            let i = pick % b.len();
            let proof = merkle_prove(&e, &b, i).unwrap();
            prop_assert!(merkle_verify(&commit(&e, &b, 0).root, &merkle_leaf(e.participant(i), b.get(i)), &proof));
        }
    }
}
