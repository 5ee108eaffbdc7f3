use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for one (level, cluster) node, so that one node's
/// draws never depend on another's.
pub(crate) fn substream(seed: u64, level: u64, cluster: u64) -> ChaCha8Rng {
    let s = mix64(mix64(mix64(seed) ^ level) ^ cluster);
    ChaCha8Rng::seed_from_u64(s)
}

pub(crate) fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
