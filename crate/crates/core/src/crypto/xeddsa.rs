//! XEdDSA: Ed25519-style signatures produced with an X25519 private key.
//!
//! The identity key is a Montgomery key pair, so signatures are computed on
//! the birationally equivalent Edwards point with the sign bit forced to 0.

use curve25519_dalek::constants::ED25519_BASEPOINT_TABLE;
use curve25519_dalek::edwards::{CompressedEdwardsY, EdwardsPoint};
use curve25519_dalek::montgomery::MontgomeryPoint;
use curve25519_dalek::scalar::{clamp_integer, Scalar};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha512};

/// `hash_1` domain separator: 2^256 - 1 - 1 encoded little-endian.
const HASH1_PREFIX: [u8; 32] = {
    let mut p = [0xffu8; 32];
    p[0] = 0xfe;
    p
};

fn calculate_key_pair(montgomery_secret: &[u8; 32]) -> (Scalar, [u8; 32]) {
    let k = Scalar::from_bytes_mod_order(clamp_integer(*montgomery_secret));
    let e = &k * ED25519_BASEPOINT_TABLE;
    let mut a_bytes = e.compress().to_bytes();
    let sign = a_bytes[31] >> 7;
    a_bytes[31] &= 0x7f;
    let a = if sign == 1 { -k } else { k };
    (a, a_bytes)
}

fn reduce(hash: Sha512) -> Scalar {
    let out: [u8; 64] = hash.finalize().into();
    Scalar::from_bytes_mod_order_wide(&out)
}

pub fn sign<R: RngCore + CryptoRng>(
    montgomery_secret: &[u8; 32],
    message: &[u8],
    rng: &mut R,
) -> [u8; 64] {
    let (a, a_bytes) = calculate_key_pair(montgomery_secret);
    let mut z = [0u8; 64];
    rng.fill_bytes(&mut z);

    let r = reduce(
        Sha512::new()
            .chain_update(HASH1_PREFIX)
            .chain_update(a.as_bytes())
            .chain_update(message)
            .chain_update(z),
    );
    let r_point = (&r * ED25519_BASEPOINT_TABLE).compress();
    let h = reduce(
        Sha512::new()
            .chain_update(r_point.as_bytes())
            .chain_update(a_bytes)
            .chain_update(message),
    );
    let s = r + h * a;

    let mut sig = [0u8; 64];
    sig[..32].copy_from_slice(r_point.as_bytes());
    sig[32..].copy_from_slice(s.as_bytes());
    sig
}

pub fn verify(montgomery_public: &[u8; 32], message: &[u8], signature: &[u8; 64]) -> bool {
    // u must be a canonical field element
    let mut u_top = *montgomery_public;
    u_top[31] &= 0x7f;
    if u_top != *montgomery_public || !is_canonical_field_element(montgomery_public) {
        return false;
    }
    let Some(a_point) = MontgomeryPoint(*montgomery_public).to_edwards(0) else {
        return false;
    };
    let mut r_bytes = [0u8; 32];
    r_bytes.copy_from_slice(&signature[..32]);
    let mut s_bytes = [0u8; 32];
    s_bytes.copy_from_slice(&signature[32..]);

    let Some(s) = Option::<Scalar>::from(Scalar::from_canonical_bytes(s_bytes)) else {
        return false;
    };
    if CompressedEdwardsY(r_bytes).decompress().is_none() {
        return false;
    }

    let a_bytes = a_point.compress().to_bytes();
    let h = reduce(
        Sha512::new()
            .chain_update(r_bytes)
            .chain_update(a_bytes)
            .chain_update(message),
    );
    let r_check = EdwardsPoint::vartime_double_scalar_mul_basepoint(&(-h), &a_point, &s);
    r_check.compress().to_bytes() == r_bytes
}

fn is_canonical_field_element(bytes: &[u8; 32]) -> bool {
    // p = 2^255 - 19; reject values in [p, 2^255)
    const P: [u8; 32] = {
        let mut p = [0xffu8; 32];
        p[0] = 0xed;
        p[31] = 0x7f;
        p
    };
    for i in (0..32).rev() {
        if bytes[i] < P[i] {
            return true;
        }
        if bytes[i] > P[i] {
            return false;
        }
    }
    false
}
