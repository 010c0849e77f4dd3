//! Hashing, per-participant keys, signatures and threshold signer sets.
//!
//! | Primitive  | Algorithm      | Used for                                   |
//! |------------|----------------|--------------------------------------------|
//! | Hash       | SHA-256 (32 B) | Merkle leaves, leaf identity, revocations  |
//! | Signature  | Ed25519 (64 B) | leaf co-signing, endorsements, root votes  |
//!
//! Threshold signing is modeled as an explicit set of individual signatures
//! that is counted against the `> 2n/3` rule.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashSet};
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::Encoder;
use crate::types::{HyperedgeId, ParticipantId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("duplicate signer {0} in signer set")]
    DuplicateSigner(ParticipantId),
    #[error("threshold undefined for hyperedge of size {0} (need n >= 3)")]
    ThresholdUndefined(usize),
    #[error("invalid hex encoding: {0}")]
    BadHex(String),
    #[error("invalid public key for {0}")]
    BadPublicKey(ParticipantId),
}

fn hex_array<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let raw = hex::decode(s).map_err(|e| CryptoError::BadHex(e.to_string()))?;
    raw.try_into().map_err(|_| CryptoError::BadHex(format!("expected {N} bytes")))
}

macro_rules! hex_serde {
    ($ty:ident, $len:expr) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                hex_array::<$len>(&s).map($ty).map_err(serde::de::Error::custom)
            }
        }
    };
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

hex_serde!(Digest, 32);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(payload: &[u8]) -> Digest {
    Digest(Sha256::digest(payload).into())
}

/// Hash of two child nodes, used for Merkle interior nodes.
pub fn hash_pair(left: &Digest, right: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update(left.0);
    h.update(right.0);
    Digest(h.finalize().into())
}

/// Revocation secret. Revealing it revokes the leaf whose `next_hash` it
/// opens.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Secret(pub [u8; 32]);

hex_serde!(Secret, 32);

impl Secret {
    /// Deterministic secret stream: `H("hmpc/rev" ‖ seed ‖ index)`.
    pub fn derive(seed: &Digest, index: u64) -> Self {
        let mut e = Encoder::new("hmpc/revocation-secret");
        e.digest(seed).u64(index);
        Secret(e.digest_of().0)
    }

    pub fn commitment(&self) -> Digest {
        hash(&self.0)
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct KeyBytes([u8; 32]);
hex_serde!(KeyBytes, 32);

#[derive(Clone, Copy, PartialEq, Eq)]
struct SigBytes([u8; 64]);

impl Serialize for SigBytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for SigBytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        hex_array::<64>(&s).map(SigBytes).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKey {
    pub participant: ParticipantId,
    key: KeyBytes,
}

impl PublicKey {
    pub fn bytes(&self) -> &[u8; 32] {
        &self.key.0
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}, {})", self.participant, &hex::encode(self.key.0)[..12])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer: ParticipantId,
    bytes: SigBytes,
}

impl Signature {
    pub fn bytes(&self) -> &[u8; 64] {
        &self.bytes.0
    }

    /// Flip one bit of the signature body. Only useful for building
    /// adversarial inputs.
    pub fn corrupted(&self) -> Signature {
        let mut s = *self;
        s.bytes.0[0] ^= 0x01;
        s
    }

    /// Reattribute the signature to another participant without changing
    /// its bytes.
    pub fn reattributed(&self, signer: ParticipantId) -> Signature {
        Signature { signer, bytes: self.bytes }
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}, {})", self.signer, &hex::encode(self.bytes.0)[..12])
    }
}

/// One participant's signing key inside one hyperedge.
#[derive(Clone)]
pub struct KeyPair {
    pub participant: ParticipantId,
    signing: SigningKey,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("participant", &self.participant)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Keys are a pure function of the scenario seed, the hyperedge and the
    /// participant id.
    pub fn derive(seed: u64, hyperedge: HyperedgeId, participant: ParticipantId) -> Self {
        let mut e = Encoder::new("hmpc/keypair");
        e.u64(seed).u32(hyperedge.0).u32(participant.0);
        let signing = SigningKey::from_bytes(&e.digest_of().0);
        let public = PublicKey { participant, key: KeyBytes(signing.verifying_key().to_bytes()) };
        Self { participant, signing, public }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    /// Seed for this key's revocation-secret stream. Known only to the key
    /// holder.
    pub fn revocation_seed(&self) -> Digest {
        let mut e = Encoder::new("hmpc/revocation-seed");
        e.bytes(&self.signing.to_bytes());
        e.digest_of()
    }
}

pub fn sign(key: &KeyPair, msg: &Digest) -> Signature {
    let sig = key.signing.sign(msg.as_bytes());
    Signature { signer: key.participant, bytes: SigBytes(sig.to_bytes()) }
}

const VERIFY_CACHE_LIMIT: usize = 1 << 21;

thread_local! {
    // Successful verifications only. Verification is a pure function of
    // (key, message, signature), so a hit is equivalent to re-verifying.
    static VERIFIED: RefCell<HashSet<[u8; 128]>> = RefCell::new(HashSet::new());
}

fn cache_key(pk: &PublicKey, msg: &Digest, sig: &Signature) -> [u8; 128] {
    let mut k = [0u8; 128];
    k[..32].copy_from_slice(&pk.key.0);
    k[32..64].copy_from_slice(&msg.0);
    k[64..].copy_from_slice(&sig.bytes.0);
    k
}

/// True iff `sig` was produced by the secret key behind `pk` over `msg` and
/// the signature is attributed to the key's participant.
pub fn verify(pk: &PublicKey, msg: &Digest, sig: &Signature) -> bool {
    if sig.signer != pk.participant {
        return false;
    }
    let key = cache_key(pk, msg, sig);
    if VERIFIED.with(|c| c.borrow().contains(&key)) {
        return true;
    }
    let Ok(vk) = VerifyingKey::from_bytes(&pk.key.0) else {
        return false;
    };
    let ed = ed25519_dalek::Signature::from_bytes(&sig.bytes.0);
    let ok = vk.verify(msg.as_bytes(), &ed).is_ok();
    if ok {
        VERIFIED.with(|c| {
            let mut c = c.borrow_mut();
            if c.len() >= VERIFY_CACHE_LIMIT {
                c.clear();
            }
            c.insert(key);
        });
    }
    ok
}

/// The strict supermajority rule: `count > 2n/3`, evaluated in integers.
pub fn threshold_met(count: usize, n: usize) -> bool {
    3 * count > 2 * n
}

/// Public keys of every member of one hyperedge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRing {
    pub hyperedge: HyperedgeId,
    keys: Vec<PublicKey>,
}

impl KeyRing {
    pub fn new(hyperedge: HyperedgeId, mut keys: Vec<PublicKey>) -> Self {
        keys.sort_by_key(|k| k.participant);
        keys.dedup_by_key(|k| k.participant);
        Self { hyperedge, keys }
    }

    pub fn get(&self, p: ParticipantId) -> Option<&PublicKey> {
        self.keys.binary_search_by_key(&p, |k| k.participant).ok().map(|i| &self.keys[i])
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, p: ParticipantId) -> bool {
        self.get(p).is_some()
    }

    /// Verify a signature against the key of its claimed signer.
    pub fn verify(&self, msg: &Digest, sig: &Signature) -> bool {
        self.get(sig.signer).is_some_and(|pk| verify(pk, msg, sig))
    }

    pub fn without(&self, p: ParticipantId) -> KeyRing {
        KeyRing { hyperedge: self.hyperedge, keys: self.keys.iter().copied().filter(|k| k.participant != p).collect() }
    }

    pub fn with_hyperedge(&self, hyperedge: HyperedgeId) -> KeyRing {
        KeyRing { hyperedge, keys: self.keys.clone() }
    }

    pub fn keys(&self) -> &[PublicKey] {
        &self.keys
    }
}

/// Signatures keyed by signer, for a hyperedge of size `n`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SignerSetWire", into = "SignerSetWire")]
pub struct SignerSet {
    n: usize,
    signatures: BTreeMap<ParticipantId, Signature>,
}

#[derive(Serialize, Deserialize)]
struct SignerSetWire {
    n: usize,
    signatures: Vec<Signature>,
}

impl TryFrom<SignerSetWire> for SignerSet {
    type Error = CryptoError;

    fn try_from(w: SignerSetWire) -> Result<Self, Self::Error> {
        SignerSet::from_signatures(w.n, w.signatures)
    }
}

impl From<SignerSet> for SignerSetWire {
    fn from(s: SignerSet) -> Self {
        SignerSetWire { n: s.n, signatures: s.signatures.into_values().collect() }
    }
}

impl SignerSet {
    pub fn new(n: usize) -> Self {
        Self { n, signatures: BTreeMap::new() }
    }

    pub fn from_signatures(n: usize, sigs: impl IntoIterator<Item = Signature>) -> Result<Self, CryptoError> {
        let mut set = Self::new(n);
        for s in sigs {
            set.insert(s)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, sig: Signature) -> Result<(), CryptoError> {
        if self.signatures.contains_key(&sig.signer) {
            return Err(CryptoError::DuplicateSigner(sig.signer));
        }
        self.signatures.insert(sig.signer, sig);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    pub fn contains(&self, p: ParticipantId) -> bool {
        self.signatures.contains_key(&p)
    }

    pub fn signatures(&self) -> impl Iterator<Item = &Signature> {
        self.signatures.values()
    }

    pub fn remove(&mut self, p: ParticipantId) -> Option<Signature> {
        self.signatures.remove(&p)
    }

    /// Replace a signer's entry; used to build mutated sets in tests.
    pub fn replace(&mut self, sig: Signature) {
        self.signatures.insert(sig.signer, sig);
    }

    pub fn valid_signers(&self, msg: &Digest, ring: &KeyRing) -> usize {
        self.signatures.values().filter(|s| ring.verify(msg, s)).count()
    }

    /// Distinct valid signers strictly exceed `2n/3`.
    pub fn threshold_met(&self, msg: &Digest, ring: &KeyRing) -> Result<bool, CryptoError> {
        if self.n < 3 {
            return Err(CryptoError::ThresholdUndefined(self.n));
        }
        Ok(threshold_met(self.valid_signers(msg, ring), self.n))
    }
}
