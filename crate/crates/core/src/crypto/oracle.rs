//! Decryption attempt over recorded traffic with only `ik^B` and `prek^B`.
//!
//! The oracle never sees one-time prekey secrets or ratchet secrets. It can
//! therefore open an envelope exactly when the session was established
//! without a one-time prekey and the message was sent on the initiator's
//! first chain (`x = 0`), before the responder's asymmetric ratchet reply.

use thiserror::Error;

use super::aead;
use super::envelope::{associated_data, Envelope};
use super::kdf::{kdf_message, kdf_root_initial, kdf_root_step, Direction};
use super::keys::{IdentityKeyPair, KeyId, SignedPrekeyPair};
use super::session::MAX_SKIP;
use super::CryptoError;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("identity secret has been erased")]
    ErasedIdentity,
    #[error("signed prekey {0} secret has been erased")]
    ErasedSignedPrekey(KeyId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleFailure {
    /// Key material was recomputed but the message did not authenticate.
    AuthenticationFailed,
    /// The envelope does not carry the handshake fields the oracle needs, or
    /// names a signed prekey that was not supplied.
    MissingKeyMaterial,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OracleOutcome {
    Decrypted(Vec<u8>),
    Failed(OracleFailure),
}

impl OracleOutcome {
    pub fn is_decrypted(&self) -> bool {
        matches!(self, OracleOutcome::Decrypted(_))
    }
}

pub fn compromise_oracle(
    recorded: &[Envelope],
    identity: &IdentityKeyPair,
    signed_prekeys: &[SignedPrekeyPair],
) -> Result<Vec<OracleOutcome>, OracleError> {
    if identity.pair().is_erased() {
        return Err(OracleError::ErasedIdentity);
    }
    if let Some(spk) = signed_prekeys.iter().find(|s| s.is_erased()) {
        return Err(OracleError::ErasedSignedPrekey(spk.id()));
    }
    Ok(recorded
        .iter()
        .map(|env| attempt(env, identity, signed_prekeys))
        .collect())
}

fn attempt(env: &Envelope, identity: &IdentityKeyPair, spks: &[SignedPrekeyPair]) -> OracleOutcome {
    let Some(prekey) = env.prekey else {
        return OracleOutcome::Failed(OracleFailure::MissingKeyMaterial);
    };
    let Some(spk) = spks.iter().find(|s| s.id() == prekey.signed_prekey_id) else {
        return OracleOutcome::Failed(OracleFailure::MissingKeyMaterial);
    };
    match recompute(env, identity, spk) {
        Ok(pt) => OracleOutcome::Decrypted(pt),
        Err(_) => OracleOutcome::Failed(OracleFailure::AuthenticationFailed),
    }
}

fn recompute(
    env: &Envelope,
    identity: &IdentityKeyPair,
    spk: &SignedPrekeyPair,
) -> Result<Vec<u8>, CryptoError> {
    let prekey = env.prekey.ok_or(CryptoError::NotInitialEnvelope)?;
    if env.header.ratchet_index != 0 || env.header.counter > MAX_SKIP {
        return Err(CryptoError::AuthenticationFailed);
    }
    let mut concat = Vec::with_capacity(96);
    concat.extend_from_slice(&spk.pair().dh(&prekey.initiator_identity)?);
    concat.extend_from_slice(&identity.pair().dh(&prekey.base_key)?);
    concat.extend_from_slice(&spk.pair().dh(&prekey.base_key)?);
    let rk0 = kdf_root_initial(&concat);
    let ratchet_dh = spk.pair().dh(&env.header.ratchet_key)?;
    let (_, mut chain) = kdf_root_step(&rk0, &ratchet_dh, 0, Direction::InitiatorToResponder);
    let mk = loop {
        let (next, mk) = kdf_message(&chain);
        if mk.message_index() == env.header.counter {
            break mk;
        }
        chain = next;
    };
    let ad = associated_data(
        &env.header,
        Some(&prekey),
        &prekey.initiator_identity,
        &identity.public(),
    );
    aead::open(&mk, &env.sealed, &ad)
}
