use serde::Serialize;
use sha2::{Digest, Sha256};

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Digest of a value's canonical JSON form. All map-like fields in this crate
/// are `BTreeMap`s and all sequences have fixed order, so serialization is
/// canonical by construction.
pub(crate) fn json_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable value");
    sha256_hex(json.as_bytes())
}
