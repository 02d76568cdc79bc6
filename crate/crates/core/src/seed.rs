//! Deterministic seed derivation for independent random streams.

/// Mix a base seed with two stream coordinates (splitmix64 finalizer steps).
/// Used to give every (epoch, query) pair its own reproducible RNG.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
