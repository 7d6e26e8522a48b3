//! Derived random streams.
//!
//! Every stochastic work item (an evaluation point, a repetition, an
//! integration stage) owns a stream keyed by the master seed and its integer
//! coordinates. The key is hashed with SplitMix64 finalizers and seeds a
//! ChaCha8 generator, so a stream depends only on its key and never on which
//! worker ran it or in what order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `(master, path...)` into a 256-bit ChaCha key.
pub fn stream(master: u64, path: &[u64]) -> Stream {
    let mut h = mix64(master);
    for (depth, &p) in path.iter().enumerate() {
        h = mix64(h ^ mix64(p ^ ((depth as u64 + 1) << 56)));
    }
    let mut seed = [0u8; 32];
    let mut w = h;
    for chunk in seed.chunks_exact_mut(8) {
        w = mix64(w);
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Uniform draw in [0, 1).
#[inline]
pub fn uniform(rng: &mut Stream) -> f64 {
    rng.random::<f64>()
}

#[inline]
pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform index in `0..n`.
#[inline]
pub fn index(rng: &mut Stream, n: usize) -> usize {
    rng.random_range(0..n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_keyed() {
        let a = stream(7, &[1, 2]).next_u64();
        assert_eq!(a, stream(7, &[1, 2]).next_u64());
        assert_ne!(a, stream(7, &[2, 1]).next_u64());
        assert_ne!(a, stream(8, &[1, 2]).next_u64());
        assert_ne!(stream(7, &[0]).next_u64(), stream(7, &[0, 0]).next_u64());
    }

    #[test]
    fn uniform_range() {
        let mut r = stream(1, &[]);
        for _ in 0..10_000 {
            let u = uniform(&mut r);
            assert!((0.0..1.0).contains(&u));
        }
    }
}
