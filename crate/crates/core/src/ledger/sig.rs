//! Pluggable signature scheme with a deterministic keyed-digest
//! default, so whole runs are bit-reproducible. A public-key scheme
//! can be swapped in behind [`SignatureScheme`] without touching the
//! ledger contract.

use sha2::{Digest as _, Sha256};

pub trait SignatureScheme: Send + Sync {
    fn sign(&self, signing_key: &[u8], message: &[u8]) -> Vec<u8>;
    fn verify(&self, verify_key: &[u8], message: &[u8], signature: &[u8]) -> bool;
}

/// Default test scheme: sig = SHA-256(tag || key || message). The
/// verify key equals the signing key, which is fine for an in-process
/// simulation where keys never leave the world state.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeyedDigest;

const SIG_TAG: &[u8] = b"v2g.sig.v1";

impl SignatureScheme for KeyedDigest {
    fn sign(&self, signing_key: &[u8], message: &[u8]) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(SIG_TAG);
        h.update((signing_key.len() as u64).to_be_bytes());
        h.update(signing_key);
        h.update(message);
        h.finalize().to_vec()
    }

    fn verify(&self, verify_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
        self.sign(verify_key, message) == signature
    }
}

pub fn sign(signing_key: &[u8], message: &[u8]) -> Vec<u8> {
    KeyedDigest.sign(signing_key, message)
}

pub fn verify(verify_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    KeyedDigest.verify(verify_key, message, signature)
}

/// Wallet identity: key material plus the replay-protection counter.
#[derive(Debug, Clone)]
pub struct WalletKey {
    pub wallet_id: String,
    pub signing_key: Vec<u8>,
    pub verify_key: Vec<u8>,
    pub next_nonce: u64,
}

impl WalletKey {
    /// Deterministic key derivation from a run seed and the wallet id.
    pub fn derive(wallet_id: &str, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"v2g.key.v1");
        h.update(seed.to_be_bytes());
        h.update(wallet_id.as_bytes());
        let key = h.finalize().to_vec();
        Self {
            wallet_id: wallet_id.to_string(),
            verify_key: key.clone(),
            signing_key: key,
            next_nonce: 0,
        }
    }
}
