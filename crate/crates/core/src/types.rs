use std::fmt;

use serde::{Deserialize, Serialize};

/// Amounts are integers in the smallest currency unit.
pub type Amount = u64;

/// Simulation clock: one tick is the smallest schedulable unit of time.
pub type Tick = u64;

/// Global identity of a participant. The same id may appear in several
/// hyperedges (a connector node).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperedgeId(pub u32);

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

impl fmt::Display for HyperedgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H{}", self.0)
    }
}

/// Serde adapter writing a `u128` total as a JSON integer that fits `u64`.
/// Internally tagged enums cannot read `u128` back, and totals of `u64`
/// amounts over a validated scenario stay below `u64::MAX`.
pub mod total_as_u64 {
    use serde::{de, ser, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        let v = u64::try_from(*v).map_err(|_| ser::Error::custom("total exceeds u64"))?;
        s.serialize_u64(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        u64::deserialize(d).map(u128::from).map_err(de::Error::custom)
    }
}
