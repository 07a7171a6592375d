use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic, platform-independent RNG stream derived from a master seed
/// and a purpose tag. Distinct tags yield statistically independent streams,
/// so adding a consumer never perturbs the draws of existing ones.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Hex-encoded SHA-256 of a byte string. Used for config hashes and report
/// fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("writing to String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_and_tag_reproduce_draws() {
        let a: Vec<u64> = stream(7, "init").random_iter().take(8).collect();
        let b: Vec<u64> = stream(7, "init").random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_tags_diverge() {
        let a: u64 = stream(7, "init").random();
        let b: u64 = stream(7, "shuffle").random();
        assert_ne!(a, b);
    }

    #[test]
    fn different_seeds_diverge() {
        let a: u64 = stream(7, "init").random();
        let b: u64 = stream(8, "init").random();
        assert_ne!(a, b);
    }

    #[test]
    fn sha256_hex_known_value() {
        // sha256("") is a published constant.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
