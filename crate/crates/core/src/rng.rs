//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream whose seed is a
//! hash of the master seed and a tuple of integers (domain tag, round, client
//! id, ...). Streams never share state, so the order in which tasks run cannot
//! change what any of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Domain tags keep streams for different purposes disjoint.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const WARMUP: u64 = 0x04;
    pub const AUX: u64 = 0x05;
    pub const SELECT: u64 = 0x06;
    pub const CLIENT: u64 = 0x07;
    pub const SERVER: u64 = 0x08;
    pub const EVAL: u64 = 0x09;
    pub const PROBE: u64 = 0x0a;
    pub const SAMPLE: u64 = 0x0b;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes `(master, parts...)` into a 64-bit seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn stream(master: u64, parts: &[u64]) -> Stream {
    Stream::seed_from_u64(derive_seed(master, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_differ_by_part_and_order() {
        let a = derive_seed(7, &[tag::CLIENT, 3, 1]);
        let b = derive_seed(7, &[tag::CLIENT, 1, 3]);
        let c = derive_seed(8, &[tag::CLIENT, 3, 1]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, &[tag::CLIENT, 3, 1]));
    }

    #[test]
    fn stream_is_reproducible() {
        let x: Vec<u64> = stream(42, &[1]).random_iter().take(4).collect();
        let y: Vec<u64> = stream(42, &[1]).random_iter().take(4).collect();
        assert_eq!(x, y);
    }
}
