//! Deterministic hash and RNG primitives used for mock data synthesis,
//! reference-model weights, and content keys.

/// FNV-1a 64-bit hash over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// SplitMix64 sequence generator.
///
/// Produces a reproducible u64 stream from a seed; used to fill
/// reference-model weight matrices and fixture tile values.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Next value uniformly in [-1, 1).
    pub fn next_unit(&mut self) -> f64 {
        // 53 significant bits scaled into [0, 2), shifted down to [-1, 1).
        const INV_2_52: f64 = 1.0 / 4503599627370496.0; // 2^-52
        ((self.next_u64() >> 11) as f64) * INV_2_52 - 1.0
    }
}
