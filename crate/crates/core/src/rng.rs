//! Named, reproducible random substreams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// FNV-1a; stable across platforms and releases.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent stream for `(seed, name)`; the same pair always yields the
/// same sequence.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Stream seeded as `base + index`, used for per-hypothesis sampling chains.
pub fn chain(base: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base.wrapping_add(index))
}

pub fn normal_vec<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
