use crate::wire::{Reader, WireError, Writer};

use super::aead::Sealed;
use super::keys::{KeyId, PublicKey};

pub const ENVELOPE_VERSION: u8 = 1;
const AD_PREFIX: &[u8] = b"prekeysim/v1/ad";

/// Handshake fields carried by every initiator message until the first reply
/// arrives: the keys the responder needs to run X3DH.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrekeyHeader {
    pub initiator_identity: PublicKey,
    /// `epk^A`
    pub base_key: PublicKey,
    pub signed_prekey_id: KeyId,
    pub one_time_prekey_id: Option<KeyId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MessageHeader {
    /// Sender's current ratchet public key (`rchpk_x`).
    pub ratchet_key: PublicKey,
    /// Ratchet number `x`.
    pub ratchet_index: u32,
    /// Message number `y` within the sending chain.
    pub counter: u32,
    /// Length of the sender's previous sending chain.
    pub previous_counter: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub prekey: Option<PrekeyHeader>,
    pub header: MessageHeader,
    pub sealed: Sealed,
}

/// An envelope that opens a session (carries a [`PrekeyHeader`]).
pub type InitialEnvelope = Envelope;

impl Envelope {
    pub fn is_initial(&self) -> bool {
        self.prekey.is_some()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&[ENVELOPE_VERSION]);
        match &self.prekey {
            Some(p) => {
                w.field(&[1]);
                w.field(p.initiator_identity.as_bytes())
                    .field(p.base_key.as_bytes())
                    .u32_field(p.signed_prekey_id.0);
                match p.one_time_prekey_id {
                    Some(id) => w.field(&id.0.to_be_bytes()),
                    None => w.field(&[]),
                };
            }
            None => {
                w.field(&[0]);
            }
        }
        w.field(self.header.ratchet_key.as_bytes())
            .u32_field(self.header.ratchet_index)
            .u32_field(self.header.counter)
            .u32_field(self.header.previous_counter)
            .field(&self.sealed.iv)
            .field(&self.sealed.ciphertext)
            .field(&self.sealed.tag);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let version = r.raw(1)?[0];
        if version != ENVELOPE_VERSION {
            return Err(WireError::Version(version));
        }
        let prekey = match r.fixed::<1>("prekey-flag")?[0] {
            0 => None,
            1 => {
                let initiator_identity = PublicKey::from_bytes(r.fixed("identity")?);
                let base_key = PublicKey::from_bytes(r.fixed("base-key")?);
                let signed_prekey_id = KeyId(r.u32_field("signed-prekey-id")?);
                let otpk = r.field()?;
                let one_time_prekey_id = match otpk.len() {
                    0 => None,
                    4 => Some(KeyId(u32::from_be_bytes(otpk.try_into().expect("4 bytes")))),
                    n => {
                        return Err(WireError::BadLength {
                            field: "one-time-prekey-id",
                            expected: 4,
                            actual: n,
                        })
                    }
                };
                Some(PrekeyHeader {
                    initiator_identity,
                    base_key,
                    signed_prekey_id,
                    one_time_prekey_id,
                })
            }
            _ => return Err(WireError::Invalid("prekey-flag")),
        };
        let header = MessageHeader {
            ratchet_key: PublicKey::from_bytes(r.fixed("ratchet-key")?),
            ratchet_index: r.u32_field("ratchet-index")?,
            counter: r.u32_field("counter")?,
            previous_counter: r.u32_field("previous-counter")?,
        };
        let iv = r.fixed("iv")?;
        let ciphertext = r.field()?.to_vec();
        let tag = r.fixed("tag")?;
        r.finish()?;
        Ok(Self {
            prekey,
            header,
            sealed: Sealed {
                iv,
                ciphertext,
                tag,
            },
        })
    }
}

/// Associated data authenticated with every message:
/// `(rchpk_x, x, y, pn, ipk_sender, ipk_receiver [, epk, id(prepk), id(eprepk)])`.
pub fn associated_data(
    header: &MessageHeader,
    prekey: Option<&PrekeyHeader>,
    sender_identity: &PublicKey,
    receiver_identity: &PublicKey,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(AD_PREFIX)
        .field(header.ratchet_key.as_bytes())
        .u32_field(header.ratchet_index)
        .u32_field(header.counter)
        .u32_field(header.previous_counter)
        .field(sender_identity.as_bytes())
        .field(receiver_identity.as_bytes());
    if let Some(p) = prekey {
        w.field(p.base_key.as_bytes())
            .u32_field(p.signed_prekey_id.0);
        match p.one_time_prekey_id {
            Some(id) => w.u32_field(id.0),
            None => w.field(&[]),
        };
    }
    w.finish()
}
