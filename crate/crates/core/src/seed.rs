use sha2::{Digest, Sha256};

/// Derives an independent stream seed from a base seed and a label.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
