//! Small shared helpers: seed derivation for independent RNG streams and
//! content checksums for manifests.

use sha2::{Digest, Sha256};

/// SplitMix64 step; a strong 64-bit mixer used to derive child seeds.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a stream path.
///
/// Each path element is absorbed through a SplitMix64 chain, so
/// `derive_seed(s, &[a, b])` and `derive_seed(s, &[b, a])` are unrelated,
/// and distinct paths yield statistically independent streams.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut state = root;
    let mut out = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(0xA24B_AED4_963E_E407);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Hex-encoded SHA-256 of a file's contents.
pub fn sha256_file(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}
