//! Canonical byte encoding.
//!
//! Every field is written as a 4-byte big-endian length followed by the
//! field bytes, in declared field order. Integers are big-endian. The first
//! field of every message is a domain tag so that two structurally similar
//! messages (a leaf and an endorsement, say) can never collide.

use crate::crypto::{hash, Digest};

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(domain: &str) -> Self {
        let mut enc = Self { buf: Vec::with_capacity(128) };
        enc.bytes(domain.as_bytes());
        enc
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn digest(&mut self, d: &Digest) -> &mut Self {
        self.bytes(d.as_bytes())
    }

    /// Presence flag followed by the value when present.
    pub fn option<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match v {
            None => {
                self.u8(0);
            }
            Some(inner) => {
                self.u8(1);
                f(self, inner);
            }
        }
        self
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn digest_of(&self) -> Digest {
        hash(&self.buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_are_length_prefixed() {
        let mut e = Encoder::new("t");
        e.u32(7);
        assert_eq!(e.finish(), vec![0, 0, 0, 1, b't', 0, 0, 0, 4, 0, 0, 0, 7]);
    }

    #[test]
    fn prefixing_prevents_concatenation_ambiguity() {
        let mut a = Encoder::new("t");
        a.bytes(b"ab").bytes(b"c");
        let mut b = Encoder::new("t");
        b.bytes(b"a").bytes(b"bc");
        assert_ne!(a.digest_of(), b.digest_of());
    }
}
