//! Counter-based seed derivation.
//!
//! Every stream used by the harness is `derive_seed(master, &[domain, a, b, ...])`,
//! a SplitMix64 chain over the master seed and the counters. A single run can be
//! replayed from the master seed and its counters without replaying anything else.

pub const DOMAIN_PREFILTER: u64 = 1;
pub const DOMAIN_LATENT: u64 = 2;
pub const DOMAIN_RUN: u64 = 3;
pub const DOMAIN_FIXTURE_TRAIN: u64 = 4;
pub const DOMAIN_FIXTURE_VERIFY: u64 = 5;
pub const DOMAIN_SWEEP: u64 = 6;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, counters: &[u64]) -> u64 {
    counters.iter().fold(splitmix64(master), |acc, &c| splitmix64(acc ^ splitmix64(c)))
}
