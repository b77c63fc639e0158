//! Deterministic random-number streams.
//!
//! Every stochastic draw in the project (weight init, shuffling, pixel
//! binarization, reparameterization noise, sample generation) comes from a
//! stream derived from `(seed, domain, index)`. Streams are independent of
//! each other and of consumption order elsewhere, which is what makes whole
//! training runs bitwise reproducible and lets a checkpoint resume mid-run
//! without serializing generator state: the stream for epoch `e` can always
//! be re-derived from the seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent ChaCha8 stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut state = seed ^ fnv1a(domain.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut key = [0u8; 32];
    for word in key.chunks_exact_mut(8) {
        word.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_stream() {
        let mut a = stream(7, "noise", 3);
        let mut b = stream(7, "noise", 3);
        for _ in 0..32 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn streams_differ_across_domain_seed_and_index() {
        let base: Vec<u64> = (0..8).map(|_| 0u64).collect();
        let draw = |seed, domain: &str, index| {
            let mut r = stream(seed, domain, index);
            (0..8).map(|_| r.gen::<u64>()).collect::<Vec<_>>()
        };
        let a = draw(7, "noise", 3);
        assert_ne!(a, draw(8, "noise", 3));
        assert_ne!(a, draw(7, "shuffle", 3));
        assert_ne!(a, draw(7, "noise", 4));
        assert_ne!(a, base);
    }
}
