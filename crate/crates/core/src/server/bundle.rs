use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Jid;
use crate::crypto::{BundleKeys, CryptoError, KeyId, PublicKey, Signature, SignedPrekeyPublic};

/// Key type byte for Curve25519 ("djb") public keys.
pub const KEY_TYPE_DJB: u8 = 0x05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OneTimePrekeyPublic {
    pub id: KeyId,
    pub public: PublicKey,
}

/// What the server answers to a prekey-bundle infoquery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrekeyBundle {
    pub jid: Jid,
    /// Epoch seconds of the device's last prekey upload.
    pub t: u64,
    pub registration: u32,
    pub identity: PublicKey,
    pub signed_prekey: SignedPrekeyPublic,
    pub key: Option<OneTimePrekeyPublic>,
}

#[derive(Debug, Error)]
pub enum BundleParseError {
    #[error("bundle json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("field {field}: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("unsupported key type {0:?}")]
    KeyType(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SignedKeyRecord {
    id: String,
    value: String,
    signature: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyRecord {
    id: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ListingRecord {
    jid: String,
    t: String,
    registration: String,
    #[serde(rename = "type")]
    key_type: String,
    identity: String,
    skey: SignedKeyRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    key: Option<KeyRecord>,
}

fn hex_u32(field: &'static str, s: &str) -> Result<u32, BundleParseError> {
    u32::from_str_radix(s, 16).map_err(|e| BundleParseError::Field {
        field,
        reason: e.to_string(),
    })
}

fn hex_bytes(field: &'static str, s: &str) -> Result<Vec<u8>, BundleParseError> {
    hex::decode(s).map_err(|e| BundleParseError::Field {
        field,
        reason: e.to_string(),
    })
}

impl PrekeyBundle {
    pub fn has_one_time_prekey(&self) -> bool {
        self.key.is_some()
    }

    pub fn keys(&self) -> BundleKeys {
        BundleKeys {
            identity: self.identity,
            signed_prekey: self.signed_prekey,
            one_time_prekey: self.key.map(|k| (k.id, k.public)),
        }
    }

    /// Textual record with the field names and id widths of the observed
    /// infoquery response; byte arrays are lowercase hex.
    pub fn to_listing_json(&self) -> String {
        let record = ListingRecord {
            jid: self.jid.to_string(),
            t: self.t.to_string(),
            registration: format!("{:08X}", self.registration),
            key_type: format!("{KEY_TYPE_DJB:02x}"),
            identity: hex::encode(self.identity.as_bytes()),
            skey: SignedKeyRecord {
                id: format!("{:06X}", self.signed_prekey.id.0),
                value: hex::encode(self.signed_prekey.public.as_bytes()),
                signature: hex::encode(self.signed_prekey.signature.as_bytes()),
            },
            key: self.key.map(|k| KeyRecord {
                id: format!("{:05x}", k.id.0),
                value: hex::encode(k.public.as_bytes()),
            }),
        };
        serde_json::to_string_pretty(&record).expect("listing record always serializes")
    }

    pub fn from_listing_json(text: &str) -> Result<Self, BundleParseError> {
        let r: ListingRecord = serde_json::from_str(text)?;
        if hex_u32("type", &r.key_type)? != u32::from(KEY_TYPE_DJB) {
            return Err(BundleParseError::KeyType(r.key_type));
        }
        let jid = r.jid.parse().map_err(|e: super::jid::JidError| BundleParseError::Field {
            field: "jid",
            reason: e.to_string(),
        })?;
        let t = r.t.parse().map_err(|e: std::num::ParseIntError| BundleParseError::Field {
            field: "t",
            reason: e.to_string(),
        })?;
        let key = match r.key {
            Some(k) => Some(OneTimePrekeyPublic {
                id: KeyId(hex_u32("key.id", &k.id)?),
                public: PublicKey::from_slice(&hex_bytes("key.value", &k.value)?)?,
            }),
            None => None,
        };
        Ok(Self {
            jid,
            t,
            registration: hex_u32("registration", &r.registration)?,
            identity: PublicKey::from_slice(&hex_bytes("identity", &r.identity)?)?,
            signed_prekey: SignedPrekeyPublic {
                id: KeyId(hex_u32("skey.id", &r.skey.id)?),
                public: PublicKey::from_slice(&hex_bytes("skey.value", &r.skey.value)?)?,
                signature: Signature::from_slice(&hex_bytes("skey.signature", &r.skey.signature)?)?,
            },
            key,
        })
    }
}
