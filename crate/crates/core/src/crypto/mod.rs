//! X3DH handshake, double-ratchet key schedule and the key-compromise oracle.

pub mod aead;
pub mod envelope;
pub mod kdf;
pub mod keys;
pub mod oracle;
pub mod session;
mod xeddsa;

use thiserror::Error;

pub use envelope::{associated_data, Envelope, InitialEnvelope, MessageHeader, PrekeyHeader};
pub use kdf::{ChainKey, Direction, MessageKey, RootKey};
pub use keys::{
    hash_key_id, sign_prekey, verify_prekey, DhKeyPair, EphemeralKeyPair, IdentityKeyPair, KeyId,
    OneTimePrekeyPair, PublicKey, RatchetKeyPair, Signature, SignedPrekeyPair, SignedPrekeyPublic,
};
pub use oracle::{compromise_oracle, OracleError, OracleFailure, OracleOutcome};
pub use session::{x3dh_initiate, x3dh_respond, BundleKeys, HandshakeKeys, SessionRole, SessionState};

use crate::wire::WireError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("public key must be 32 bytes, got {0}")]
    MalformedKey(usize),
    #[error("signature must be 64 bytes, got {0}")]
    MalformedSignature(usize),
    #[error("secret has been erased")]
    ErasedSecret,
    #[error("signed prekey signature does not verify under the bundle identity key")]
    HandshakeRejected,
    #[error("signed prekey {0} is no longer held (stale bundle)")]
    StaleBundle(KeyId),
    #[error("one-time prekey {0} is unknown or already used")]
    UnknownOneTimePrekey(KeyId),
    #[error("envelope does not carry a prekey header")]
    NotInitialEnvelope,
    #[error("message authentication failed")]
    AuthenticationFailed,
    #[error("session has no sending chain")]
    NoSendingChain,
    #[error("message key already used or expired")]
    DuplicateMessage,
    #[error("too many skipped messages ({0})")]
    TooManySkipped(u32),
    #[error("ratchet key changed before a local ratchet key exists")]
    UnexpectedRatchetKey,
    #[error(transparent)]
    Wire(#[from] WireError),
}
