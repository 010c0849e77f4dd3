//! Binary Merkle tree over balance leaves. Leaf order is participant order;
//! a level with an odd node count duplicates its last node.

use serde::{Deserialize, Serialize};

use crate::codec::Encoder;
use crate::crypto::{hash_pair, Digest};
use crate::types::{Amount, ParticipantId};

/// `L_i = H(u_i ‖ b_i)` under the canonical codec.
pub fn merkle_leaf(participant: ParticipantId, balance: Amount) -> Digest {
    let mut e = Encoder::new("hmpc/balance-leaf");
    e.u32(participant.0).u64(balance);
    e.digest_of()
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => hash_pair(l, r),
            [l] => hash_pair(l, l),
            _ => unreachable!(),
        })
        .collect()
}

/// Root over already-hashed leaves. Empty input yields the zero digest.
pub fn root_of_leaves(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::ZERO;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

pub fn balance_leaves(participants: &[ParticipantId], balances: &[Amount]) -> Vec<Digest> {
    participants.iter().zip(balances).map(|(p, b)| merkle_leaf(*p, *b)).collect()
}

pub fn merkle_root(participants: &[ParticipantId], balances: &[Amount]) -> Digest {
    root_of_leaves(&balance_leaves(participants, balances))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub index: usize,
    pub leaf_count: usize,
    /// Sibling hashes from the leaf level upward.
    pub siblings: Vec<Digest>,
}

pub(crate) fn prove_leaves(leaves: &[Digest], index: usize) -> Option<MerkleProof> {
    if index >= leaves.len() {
        return None;
    }
    let mut siblings = Vec::new();
    let mut level = leaves.to_vec();
    let mut pos = index;
    while level.len() > 1 {
        let sib = if pos.is_multiple_of(2) { pos + 1 } else { pos - 1 };
        siblings.push(*level.get(sib).unwrap_or(&level[pos]));
        level = next_level(&level);
        pos /= 2;
    }
    Some(MerkleProof { index, leaf_count: leaves.len(), siblings })
}

/// Recompute the path from `leaf` at `proof.index` and compare with `root`.
pub fn merkle_verify(root: &Digest, leaf: &Digest, proof: &MerkleProof) -> bool {
    if proof.index >= proof.leaf_count {
        return false;
    }
    let mut width = proof.leaf_count;
    let mut pos = proof.index;
    let mut acc = *leaf;
    let mut siblings = proof.siblings.iter();
    while width > 1 {
        let Some(sib) = siblings.next() else {
            return false;
        };
        // The last node of an odd level may only be paired with itself.
        if pos.is_multiple_of(2) && pos + 1 == width && *sib != acc {
            return false;
        }
        acc = if pos.is_multiple_of(2) { hash_pair(&acc, sib) } else { hash_pair(sib, &acc) };
        pos /= 2;
        width = width.div_ceil(2);
    }
    siblings.next().is_none() && acc == *root
}
