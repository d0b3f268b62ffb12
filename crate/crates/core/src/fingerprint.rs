use serde::Serialize;
use sha2::{Digest, Sha256};

/// Stable 16-hex-digit hash of a value's canonical JSON form.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize to json");
    let digest = Sha256::digest(&json);
    hex::encode(&digest[..8])
}
