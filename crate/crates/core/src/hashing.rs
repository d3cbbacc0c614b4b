use sha2::{Digest, Sha256};

/// SHA-256 over length-prefixed parts, hex encoded.
///
/// Length prefixes keep `["ab", "c"]` and `["a", "bc"]` distinct.
pub fn content_hash<I, T>(parts: I) -> String
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let part = part.as_ref();
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}
