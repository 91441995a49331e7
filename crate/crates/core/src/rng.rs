use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, stream...)`. Streams let per-task and
/// per-iteration randomness be addressed directly instead of threaded through
/// a shared generator, which keeps runs reproducible under any execution order.
pub fn seeded_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &s in stream {
        h = splitmix64(h ^ s);
    }
    ChaCha8Rng::seed_from_u64(h)
}
