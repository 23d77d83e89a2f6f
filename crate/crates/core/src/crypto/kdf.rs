//! Root, chain and message key derivation.
//!
//! `kdf_root*` is HKDF-SHA256, `kdf_message` is the HMAC-SHA256 chain step.
//! Every derivation site has its own constant label so vectors are
//! reproducible across implementations.

use std::fmt;

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use zeroize::{Zeroize, ZeroizeOnDrop};

pub type HmacSha256 = Hmac<Sha256>;

/// HKDF info for the initial root key over the concatenated DH outputs.
pub const ROOT_INIT_LABEL: &[u8] = b"prekeysim/v1/root-init";
/// HKDF info for root ratchet steps producing (root, chain).
pub const ROOT_STEP_LABEL: &[u8] = b"prekeysim/v1/root-step";
/// HKDF info expanding a message-key seed into cipher and MAC keys.
pub const MESSAGE_KEYS_LABEL: &[u8] = b"prekeysim/v1/message-keys";
/// HMAC input bytes for the chain step.
pub const MESSAGE_KEY_SEED: u8 = 0x01;
pub const CHAIN_KEY_SEED: u8 = 0x02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "i->r")]
    InitiatorToResponder,
    #[serde(rename = "r->i")]
    ResponderToInitiator,
}

impl Direction {
    pub fn reverse(self) -> Self {
        match self {
            Direction::InitiatorToResponder => Direction::ResponderToInitiator,
            Direction::ResponderToInitiator => Direction::InitiatorToResponder,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::InitiatorToResponder => "i->r",
            Direction::ResponderToInitiator => "r->i",
        })
    }
}

#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct RootKey([u8; 32]);

impl RootKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for RootKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("RootKey(..)")
    }
}

/// Chain key `ck_{x,y}` for one direction.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct ChainKey {
    key: [u8; 32],
    #[zeroize(skip)]
    ratchet_index: u32,
    #[zeroize(skip)]
    message_index: u32,
    #[zeroize(skip)]
    direction: Direction,
}

impl ChainKey {
    pub fn new(key: [u8; 32], ratchet_index: u32, direction: Direction) -> Self {
        Self {
            key,
            ratchet_index,
            message_index: 0,
            direction,
        }
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.key
    }

    pub fn ratchet_index(&self) -> u32 {
        self.ratchet_index
    }

    pub fn message_index(&self) -> u32 {
        self.message_index
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }
}

impl fmt::Debug for ChainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ChainKey(x={}, y={}, {})",
            self.ratchet_index, self.message_index, self.direction
        )
    }
}

/// Message key `mk_{x,y}`, already expanded into AES and HMAC keys.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct MessageKey {
    seed: [u8; 32],
    cipher_key: [u8; 32],
    mac_key: [u8; 32],
    #[zeroize(skip)]
    ratchet_index: u32,
    #[zeroize(skip)]
    message_index: u32,
    #[zeroize(skip)]
    direction: Direction,
}

impl MessageKey {
    /// The HMAC output the AEAD keys are expanded from.
    pub fn seed(&self) -> &[u8; 32] {
        &self.seed
    }

    pub fn cipher_key(&self) -> &[u8; 32] {
        &self.cipher_key
    }

    pub fn mac_key(&self) -> &[u8; 32] {
        &self.mac_key
    }

    pub fn ratchet_index(&self) -> u32 {
        self.ratchet_index
    }

    pub fn message_index(&self) -> u32 {
        self.message_index
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }
}

impl fmt::Debug for MessageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "MessageKey(x={}, y={}, {})",
            self.ratchet_index, self.message_index, self.direction
        )
    }
}

/// `rk_0 <- KDF_r(dh1 || dh2 || dh3 [|| dh4])`.
pub fn kdf_root_initial(dh_concat: &[u8]) -> RootKey {
    let hk = Hkdf::<Sha256>::new(Some(&[0u8; 32]), dh_concat);
    let mut out = [0u8; 32];
    hk.expand(ROOT_INIT_LABEL, &mut out)
        .expect("32 bytes is a valid HKDF output length");
    RootKey(out)
}

/// `rk', ck <- KDF_r(rk, dh)`; the chain starts at message index 0.
pub fn kdf_root_step(
    root: &RootKey,
    dh_output: &[u8],
    ratchet_index: u32,
    direction: Direction,
) -> (RootKey, ChainKey) {
    let hk = Hkdf::<Sha256>::new(Some(root.as_bytes()), dh_output);
    let mut okm = [0u8; 64];
    hk.expand(ROOT_STEP_LABEL, &mut okm)
        .expect("64 bytes is a valid HKDF output length");
    let mut rk = [0u8; 32];
    let mut ck = [0u8; 32];
    rk.copy_from_slice(&okm[..32]);
    ck.copy_from_slice(&okm[32..]);
    okm.zeroize();
    (RootKey(rk), ChainKey::new(ck, ratchet_index, direction))
}

fn hmac_byte(key: &[u8; 32], byte: u8) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(&[byte]);
    mac.finalize().into_bytes().into()
}

/// `ck_{x,y+1}, mk_{x,y} <- KDF_m(ck_{x,y})`.
pub fn kdf_message(chain: &ChainKey) -> (ChainKey, MessageKey) {
    let seed = hmac_byte(&chain.key, MESSAGE_KEY_SEED);
    let next = hmac_byte(&chain.key, CHAIN_KEY_SEED);

    let hk = Hkdf::<Sha256>::new(Some(&[0u8; 32]), &seed);
    let mut okm = [0u8; 64];
    hk.expand(MESSAGE_KEYS_LABEL, &mut okm)
        .expect("64 bytes is a valid HKDF output length");
    let mut cipher_key = [0u8; 32];
    let mut mac_key = [0u8; 32];
    cipher_key.copy_from_slice(&okm[..32]);
    mac_key.copy_from_slice(&okm[32..]);
    okm.zeroize();

    let mk = MessageKey {
        seed,
        cipher_key,
        mac_key,
        ratchet_index: chain.ratchet_index,
        message_index: chain.message_index,
        direction: chain.direction,
    };
    let next_chain = ChainKey {
        key: next,
        ratchet_index: chain.ratchet_index,
        message_index: chain.message_index + 1,
        direction: chain.direction,
    };
    (next_chain, mk)
}

#[cfg(test)]
mod tests {
    use super::*;

    // RFC 5869 A.1
    #[test]
    fn hkdf_sha256_rfc5869_case1() {
        let ikm = [0x0bu8; 22];
        let salt = hex::decode("000102030405060708090a0b0c").unwrap();
        let info = hex::decode("f0f1f2f3f4f5f6f7f8f9").unwrap();
        let hk = Hkdf::<Sha256>::new(Some(&salt), &ikm);
        let mut okm = [0u8; 42];
        hk.expand(&info, &mut okm).unwrap();
        assert_eq!(
            hex::encode(okm),
            "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"
        );
    }

    // RFC 4231 test case 2
    #[test]
    fn hmac_sha256_rfc4231_case2() {
        let mut mac = HmacSha256::new_from_slice(b"Jefe").unwrap();
        mac.update(b"what do ya want for nothing?");
        assert_eq!(
            hex::encode(mac.finalize().into_bytes()),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn chain_step_matches_hmac_definition() {
        let ck = ChainKey::new([7u8; 32], 0, Direction::InitiatorToResponder);
        let (next, mk) = kdf_message(&ck);
        let mut m1 = HmacSha256::new_from_slice(&[7u8; 32]).unwrap();
        m1.update(&[0x01]);
        let mut m2 = HmacSha256::new_from_slice(&[7u8; 32]).unwrap();
        m2.update(&[0x02]);
        assert_eq!(mk.seed().as_slice(), m1.finalize().into_bytes().as_slice());
        assert_eq!(next.as_bytes().as_slice(), m2.finalize().into_bytes().as_slice());
        assert_eq!(next.message_index(), 1);
        assert_eq!(mk.message_index(), 0);
    }

    #[test]
    fn message_keys_distinct_along_chain() {
        let mut ck = ChainKey::new([1u8; 32], 0, Direction::InitiatorToResponder);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100 {
            let (next, mk) = kdf_message(&ck);
            assert!(seen.insert(*mk.cipher_key()));
            ck = next;
        }
    }
}
