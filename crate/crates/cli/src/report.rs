use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Everything a run produced. `payload` is a pure function of `config`;
/// wall time and timings are kept outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub wall_time_secs: f64,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Value>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, config: Value, payload: Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            wall_time_secs: 0.0,
            payload,
            timings: None,
        }
    }

    /// Compact encoding of the payload, used to compare runs byte for byte.
    pub fn payload_bytes(&self) -> String {
        serde_json::to_string(&self.payload).expect("payload serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a float sequence by its exact bit patterns.
pub fn sha256_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_bits().to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn float_hash_sees_sign_of_zero() {
        assert_ne!(sha256_f64(&[0.0]), sha256_f64(&[-0.0]));
    }
}
