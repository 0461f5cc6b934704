//! Counter-based seed derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha stream keyed by
//! `(seed, domain tag, indices...)`. A stream depends only on its key, never
//! on how many other streams were consumed before it, so Monte Carlo samples
//! can be generated in any order or on any thread and still be reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const TAG_PRIOR: u64 = 0x5052_494f;
pub(crate) const TAG_SIMULATE: u64 = 0x5349_4d55;
pub(crate) const TAG_ELBO: u64 = 0x454c_424f;
pub(crate) const TAG_INIT: u64 = 0x494e_4954;
pub(crate) const TAG_PLANT: u64 = 0x504c_414e;
pub(crate) const TAG_AUDIT: u64 = 0x4155_4449;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of keys into a single 64-bit value.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |h, &k| splitmix64(h ^ splitmix64(k)))
}

/// Independent generator for the given key path.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = derive_seed(seed, keys);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform draw clamped to `[1e-12, 1 - 1e-12]` so logits stay finite.
#[inline]
pub(crate) fn open_uniform<R: rand::Rng>(rng: &mut R) -> f64 {
    rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12)
}
