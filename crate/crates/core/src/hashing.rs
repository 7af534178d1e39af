//! Tuple serialization and the 64-bit connection-class hash.
//!
//! Each selected variable contributes one field:
//!
//! ```text
//! NAME '=' 0x01 VALUE 0x1F     variable present (VALUE may be empty)
//! NAME '=' 0x00 0x1F           variable absent
//! ```
//!
//! The hash is the low 64 bits (first little-endian word) of
//! MurmurHash3_x64_128 with seed 0.

use std::fmt;

use crate::engine::ConnectionEvent;
use crate::policy::SecurityRule;

const PRESENT: u8 = 0x01;
const ABSENT: u8 = 0x00;
const FIELD_END: u8 = 0x1F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TupleHash(pub u64);

impl TupleHash {
    /// 16 lowercase hex digits.
    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    /// Accepts exactly 16 lowercase hex digits.
    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 16 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        u64::from_str_radix(s, 16).ok().map(TupleHash)
    }
}

impl fmt::Display for TupleHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

pub fn serialize_tuple(rule: &SecurityRule, event: &ConnectionEvent) -> Vec<u8> {
    let mut out = Vec::new();
    serialize_tuple_into(rule, event, &mut out);
    out
}

/// Same as [`serialize_tuple`], reusing `out`'s allocation.
pub fn serialize_tuple_into(rule: &SecurityRule, event: &ConnectionEvent, out: &mut Vec<u8>) {
    out.clear();
    for var in &rule.outlier_vars {
        out.extend_from_slice(var.as_str().as_bytes());
        out.push(b'=');
        match event.get(var.as_str()) {
            Some(value) => {
                out.push(PRESENT);
                out.extend_from_slice(value.as_bytes());
            }
            None => out.push(ABSENT),
        }
        out.push(FIELD_END);
    }
}

pub fn hash_tuple(serialized: &[u8]) -> TupleHash {
    TupleHash(murmur3_x64_128(serialized, 0).0)
}

const C1: u64 = 0x87c3_7b91_1142_53d5;
const C2: u64 = 0x4cf5_ad43_2745_937f;

#[inline]
fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// MurmurHash3_x64_128. Returns `(h1, h2)`; the canonical 16-byte digest is
/// `h1` then `h2`, each little-endian.
pub fn murmur3_x64_128(data: &[u8], seed: u32) -> (u64, u64) {
    let mut h1 = u64::from(seed);
    let mut h2 = u64::from(seed);

    let mut blocks = data.chunks_exact(16);
    for block in &mut blocks {
        let mut k1 = u64::from_le_bytes(block[..8].try_into().unwrap());
        let mut k2 = u64::from_le_bytes(block[8..].try_into().unwrap());

        k1 = k1.wrapping_mul(C1).rotate_left(31).wrapping_mul(C2);
        h1 ^= k1;
        h1 = h1
            .rotate_left(27)
            .wrapping_add(h2)
            .wrapping_mul(5)
            .wrapping_add(0x52dc_e729);

        k2 = k2.wrapping_mul(C2).rotate_left(33).wrapping_mul(C1);
        h2 ^= k2;
        h2 = h2
            .rotate_left(31)
            .wrapping_add(h1)
            .wrapping_mul(5)
            .wrapping_add(0x3849_5ab5);
    }

    let tail = blocks.remainder();
    if !tail.is_empty() {
        let mut buf = [0u8; 16];
        buf[..tail.len()].copy_from_slice(tail);
        let k1 = u64::from_le_bytes(buf[..8].try_into().unwrap());
        let k2 = u64::from_le_bytes(buf[8..].try_into().unwrap());
        if tail.len() > 8 {
            h2 ^= k2.wrapping_mul(C2).rotate_left(33).wrapping_mul(C1);
        }
        h1 ^= k1.wrapping_mul(C1).rotate_left(31).wrapping_mul(C2);
    }

    let len = data.len() as u64;
    h1 ^= len;
    h2 ^= len;
    h1 = h1.wrapping_add(h2);
    h2 = h2.wrapping_add(h1);
    h1 = fmix64(h1);
    h2 = fmix64(h2);
    h1 = h1.wrapping_add(h2);
    h2 = h2.wrapping_add(h1);
    (h1, h2)
}
