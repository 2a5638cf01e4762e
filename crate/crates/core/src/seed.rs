//! Sub-seed derivation.
//!
//! Every random draw in the pipeline uses a generator seeded from a master
//! seed and a path of integers (epoch, exam, layer, ...), so a result never
//! depends on the order in which workers happen to run.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `master` and `path` into an independent 64-bit seed.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix(master.wrapping_add(GOLDEN)), |acc, p| mix(acc ^ p.wrapping_add(GOLDEN)))
}

/// Seed for the exam with string id `id`.
pub fn derive_str(master: u64, id: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let h = id
        .bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01B3));
    derive(master, &[h])
}
