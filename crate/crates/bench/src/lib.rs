//! Fixtures shared by the criterion benches.

use outlierwatch::{BaselineState, TupleHash};

/// A baseline holding `n` pseudo-random hashes (splitmix64 of `0..n`).
pub fn baseline_of(n: u64) -> BaselineState {
    BaselineState::from_hashes((0..n).map(|i| TupleHash(splitmix64(i))), n)
        .expect("observed == distinct")
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
