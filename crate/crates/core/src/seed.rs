//! Seed derivation.
//!
//! Every sub-stream seed is `splitmix64(root ^ splitmix64(stream))`. The rule
//! depends only on the root seed and the stream index, so parallel sweeps
//! produce identical pairs regardless of thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(root: u64, stream: u64) -> u64 {
    splitmix64(root ^ splitmix64(stream))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counter-based stream: one independent generator per `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_distinct_and_stable() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, 0));
    }

    #[test]
    fn streams_are_independent_of_creation_order() {
        let x: f64 = stream_rng(3, 5).random();
        let _ = stream_rng(3, 4).random::<f64>();
        let y: f64 = stream_rng(3, 5).random();
        assert_eq!(x, y);
        let z: f64 = stream_rng(3, 6).random();
        assert_ne!(x, z);
    }
}
