//! Seeded random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose key is
//! the SHA-256 digest of `(domain, global seed, sample key, epoch)`. Streams are
//! therefore reproducible, independent across samples and epochs, and do not
//! depend on the order in which samples are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives a 64-bit seed from a domain tag and an ordered list of parts.
pub fn derive_seed(domain: &str, parts: &[u64]) -> u64 {
    let digest = digest(domain, parts);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Opens a stream keyed by a domain tag and an ordered list of parts.
pub fn stream(domain: &str, parts: &[u64]) -> StreamRng {
    ChaCha8Rng::from_seed(digest(domain, parts))
}

/// Stream for one sample in one epoch.
pub fn sample_stream(domain: &str, seed: u64, sample_id: &str, epoch: u64) -> StreamRng {
    stream(domain, &[seed, sample_key(sample_id), epoch])
}

/// Stable 64-bit key for a sample identifier.
pub fn sample_key(sample_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn digest(domain: &str, parts: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    hasher.finalize().into()
}
