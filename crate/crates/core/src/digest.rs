//! Content digests and the name-based GUID hash.
//!
//! Every content digest in the federation is SHA-256, rendered as 64 lowercase
//! hex characters. GUIDs use 128-bit FNV-1a over the dataname bytes.

use sha2::{Digest as _, Sha256};

/// Name of the content digest algorithm, recorded in configs and reports.
pub const DIGEST_ALGORITHM: &str = "sha256";

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Incremental hasher for streamed bodies.
#[derive(Default, Clone)]
pub struct ContentHasher(Sha256);

impl ContentHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, data: &[u8]) {
        self.0.update(data);
    }

    pub fn finish_hex(self) -> String {
        hex::encode(self.0.finalize())
    }
}

pub fn is_digest_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

const FNV128_OFFSET: u128 = 0x6c62272e07bb014262b821756295c58d;
const FNV128_PRIME: u128 = 0x0000000001000000000000000000013b;

pub fn fnv1a_128(data: &[u8]) -> u128 {
    data.iter().fold(FNV128_OFFSET, |h, &b| {
        (h ^ u128::from(b)).wrapping_mul(FNV128_PRIME)
    })
}

/// Proof token a subject presents in place of a certificate chain:
/// `sha256(deployment_secret ‖ subject)`.
pub fn proof_token(secret: &str, subject: &str) -> String {
    let mut h = Sha256::new();
    h.update(secret.as_bytes());
    h.update(subject.as_bytes());
    hex::encode(h.finalize())
}

/// Constant-time comparison for tokens.
pub fn tokens_equal(a: &str, b: &str) -> bool {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}
