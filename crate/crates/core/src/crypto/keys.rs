//! Curve25519 key material and the role-typed wrappers used by the handshake.

use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey as X25519Public, StaticSecret};

use super::xeddsa;
use super::CryptoError;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

/// Identifier attached to signed and one-time prekeys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyId(pub u32);

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// 32-byte Montgomery u-coordinate.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub const fn from_bytes(bytes: [u8; PUBLIC_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::MalformedKey(bytes.len()))?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", hex::encode(&self.0[..4]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature([u8; SIGNATURE_LEN]);

impl Signature {
    pub const fn from_bytes(bytes: [u8; SIGNATURE_LEN]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SIGNATURE_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::MalformedSignature(bytes.len()))?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..4]))
    }
}

macro_rules! hex_serde {
    ($ty:ident) => {
        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(self.0))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let text = String::deserialize(d)?;
                let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
                Self::from_slice(&bytes).map_err(serde::de::Error::custom)
            }
        }
    };
}

hex_serde!(PublicKey);
hex_serde!(Signature);

/// Key id derived from the public key: first four bytes of its SHA-256.
pub fn hash_key_id(public: &PublicKey) -> KeyId {
    let digest = Sha256::digest(public.as_bytes());
    KeyId(u32::from_be_bytes([digest[0], digest[1], digest[2], digest[3]]))
}

/// Raw output of one X25519 invocation.
pub type SharedSecret = [u8; 32];

/// A Curve25519 key pair whose secret half can be erased in place.
///
/// Once erased the pair keeps its public key but refuses every operation that
/// needs the secret.
#[derive(Clone)]
pub struct DhKeyPair {
    secret: Option<StaticSecret>,
    public: PublicKey,
}

impl DhKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_secret_bytes(bytes)
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = PublicKey(X25519Public::from(&secret).to_bytes());
        Self {
            secret: Some(secret),
            public,
        }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn is_erased(&self) -> bool {
        self.secret.is_none()
    }

    /// Overwrites the secret (zeroized on drop) and flags the pair as erased.
    pub fn erase(&mut self) {
        self.secret = None;
    }

    pub fn secret_bytes(&self) -> Result<[u8; 32], CryptoError> {
        self.secret
            .as_ref()
            .map(|s| s.to_bytes())
            .ok_or(CryptoError::ErasedSecret)
    }

    pub fn dh(&self, their_public: &PublicKey) -> Result<SharedSecret, CryptoError> {
        let secret = self.secret.as_ref().ok_or(CryptoError::ErasedSecret)?;
        Ok(secret
            .diffie_hellman(&X25519Public::from(their_public.0))
            .to_bytes())
    }
}

impl fmt::Debug for DhKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DhKeyPair")
            .field("public", &self.public)
            .field("erased", &self.is_erased())
            .finish()
    }
}

/// Long-term identity key pair. Also the signing key for signed prekeys.
#[derive(Clone, Debug)]
pub struct IdentityKeyPair(DhKeyPair);

impl IdentityKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self(DhKeyPair::generate(rng))
    }

    pub fn from_pair(pair: DhKeyPair) -> Self {
        Self(pair)
    }

    pub fn public(&self) -> PublicKey {
        self.0.public()
    }

    pub fn pair(&self) -> &DhKeyPair {
        &self.0
    }

    pub fn erase(&mut self) {
        self.0.erase()
    }

    pub fn sign<R: RngCore + CryptoRng>(
        &self,
        message: &[u8],
        rng: &mut R,
    ) -> Result<Signature, CryptoError> {
        let secret = self.0.secret_bytes()?;
        Ok(Signature(xeddsa::sign(&secret, message, rng)))
    }
}

/// Public half of a signed prekey as stored by the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPrekeyPublic {
    pub id: KeyId,
    pub public: PublicKey,
    pub signature: Signature,
}

/// Medium-term prekey, signed by the owner's identity key.
#[derive(Clone, Debug)]
pub struct SignedPrekeyPair {
    pair: DhKeyPair,
    id: KeyId,
    signature: Signature,
}

impl SignedPrekeyPair {
    pub fn generate<R: RngCore + CryptoRng>(
        id: KeyId,
        identity: &IdentityKeyPair,
        rng: &mut R,
    ) -> Result<Self, CryptoError> {
        let pair = DhKeyPair::generate(rng);
        Self::from_pair(pair, id, identity, rng)
    }

    pub fn from_pair<R: RngCore + CryptoRng>(
        pair: DhKeyPair,
        id: KeyId,
        identity: &IdentityKeyPair,
        rng: &mut R,
    ) -> Result<Self, CryptoError> {
        let signature = sign_prekey(identity, &pair.public(), rng)?;
        Ok(Self {
            pair,
            id,
            signature,
        })
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    pub fn public(&self) -> PublicKey {
        self.pair.public()
    }

    pub fn signature(&self) -> Signature {
        self.signature
    }

    pub fn pair(&self) -> &DhKeyPair {
        &self.pair
    }

    pub fn is_erased(&self) -> bool {
        self.pair.is_erased()
    }

    pub fn erase(&mut self) {
        self.pair.erase()
    }

    pub fn to_public(&self) -> SignedPrekeyPublic {
        SignedPrekeyPublic {
            id: self.id,
            public: self.public(),
            signature: self.signature,
        }
    }
}

/// Short-term prekey handed out at most once by the server.
#[derive(Clone, Debug)]
pub struct OneTimePrekeyPair {
    pair: DhKeyPair,
    id: KeyId,
}

impl OneTimePrekeyPair {
    pub fn generate<R: RngCore + CryptoRng>(id: KeyId, rng: &mut R) -> Self {
        Self {
            pair: DhKeyPair::generate(rng),
            id,
        }
    }

    pub fn from_pair(pair: DhKeyPair, id: KeyId) -> Self {
        Self { pair, id }
    }

    pub fn id(&self) -> KeyId {
        self.id
    }

    pub fn public(&self) -> PublicKey {
        self.pair.public()
    }

    pub fn pair(&self) -> &DhKeyPair {
        &self.pair
    }
}

/// Initiator's handshake key (`ek`/`epk`), used only for the X3DH computation.
#[derive(Clone, Debug)]
pub struct EphemeralKeyPair(DhKeyPair);

impl EphemeralKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self(DhKeyPair::generate(rng))
    }

    pub fn public(&self) -> PublicKey {
        self.0.public()
    }

    pub fn pair(&self) -> &DhKeyPair {
        &self.0
    }
}

/// Key pair driving the asymmetric ratchet.
#[derive(Clone, Debug)]
pub struct RatchetKeyPair(DhKeyPair);

impl RatchetKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self(DhKeyPair::generate(rng))
    }

    pub fn public(&self) -> PublicKey {
        self.0.public()
    }

    pub fn pair(&self) -> &DhKeyPair {
        &self.0
    }

    pub fn erase(&mut self) {
        self.0.erase()
    }

    pub fn is_erased(&self) -> bool {
        self.0.is_erased()
    }
}

pub fn sign_prekey<R: RngCore + CryptoRng>(
    identity: &IdentityKeyPair,
    prekey: &PublicKey,
    rng: &mut R,
) -> Result<Signature, CryptoError> {
    identity.sign(prekey.as_bytes(), rng)
}

/// Verification never panics: malformed keys or signatures simply fail.
pub fn verify_prekey(identity: &PublicKey, prekey: &PublicKey, signature: &Signature) -> bool {
    xeddsa::verify(identity.as_bytes(), prekey.as_bytes(), signature.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn identity_public_is_32_bytes_and_rederivable() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ik = IdentityKeyPair::generate(&mut rng);
        let secret = ik.pair().secret_bytes().unwrap();
        let again = DhKeyPair::from_secret_bytes(secret);
        assert_eq!(again.public(), ik.public());
        assert_eq!(ik.public().as_bytes().len(), PUBLIC_KEY_LEN);
    }

    #[test]
    fn same_seed_same_pair() {
        let a = DhKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(7));
        let b = DhKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(7));
        assert_eq!(a.public(), b.public());
        assert_eq!(a.secret_bytes().unwrap(), b.secret_bytes().unwrap());
    }

    #[test]
    fn erased_pair_refuses_dh() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut a = DhKeyPair::generate(&mut rng);
        let b = DhKeyPair::generate(&mut rng);
        assert!(a.dh(&b.public()).is_ok());
        a.erase();
        assert!(a.is_erased());
        assert!(matches!(a.dh(&b.public()), Err(CryptoError::ErasedSecret)));
        assert!(a.secret_bytes().is_err());
    }

    #[test]
    fn prekey_signature_round_trip_and_binding() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ik_b = IdentityKeyPair::generate(&mut rng);
        let ik_a = IdentityKeyPair::generate(&mut rng);
        let spk = SignedPrekeyPair::generate(KeyId(1), &ik_b, &mut rng).unwrap();
        assert!(verify_prekey(&ik_b.public(), &spk.public(), &spk.signature()));
        assert!(!verify_prekey(&ik_a.public(), &spk.public(), &spk.signature()));

        for bit in [0usize, 100, 255, 300, 511] {
            let mut bytes = *spk.signature().as_bytes();
            bytes[bit / 8] ^= 1 << (bit % 8);
            assert!(
                !verify_prekey(&ik_b.public(), &spk.public(), &Signature::from_bytes(bytes)),
                "flipped bit {bit} still verified"
            );
        }
    }

    #[test]
    fn malformed_encodings_fail_verification() {
        assert!(Signature::from_slice(&[0u8; 63]).is_err());
        assert!(PublicKey::from_slice(&[0u8; 31]).is_err());
        let junk = Signature::from_bytes([0xff; 64]);
        assert!(!verify_prekey(
            &PublicKey::from_bytes([0xff; 32]),
            &PublicKey::from_bytes([9; 32]),
            &junk
        ));
    }
}
