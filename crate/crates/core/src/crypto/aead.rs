//! AES-256-CBC with PKCS#7 padding, authenticated by HMAC-SHA256 over the
//! associated data, IV and ciphertext (encrypt-then-MAC).

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::Mac;

use super::kdf::{HmacSha256, MessageKey};
use super::CryptoError;

type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;

pub const IV_LEN: usize = 16;
pub const TAG_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sealed {
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

fn tag(mac_key: &[u8; 32], ad: &[u8], iv: &[u8; IV_LEN], ciphertext: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(mac_key).expect("HMAC accepts any key length");
    mac.update(&(ad.len() as u32).to_be_bytes());
    mac.update(ad);
    mac.update(iv);
    mac.update(ciphertext);
    mac
}

pub fn seal_with_keys(
    cipher_key: &[u8; 32],
    mac_key: &[u8; 32],
    iv: [u8; IV_LEN],
    plaintext: &[u8],
    ad: &[u8],
) -> Sealed {
    let ciphertext =
        Aes256CbcEnc::new(cipher_key.into(), &iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let t = tag(mac_key, ad, &iv, &ciphertext).finalize().into_bytes();
    Sealed {
        iv,
        ciphertext,
        tag: t.into(),
    }
}

pub fn open_with_keys(
    cipher_key: &[u8; 32],
    mac_key: &[u8; 32],
    sealed: &Sealed,
    ad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    tag(mac_key, ad, &sealed.iv, &sealed.ciphertext)
        .verify_slice(&sealed.tag)
        .map_err(|_| CryptoError::AuthenticationFailed)?;
    Aes256CbcDec::new(cipher_key.into(), &sealed.iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(&sealed.ciphertext)
        .map_err(|_| CryptoError::AuthenticationFailed)
}

pub fn seal(mk: &MessageKey, iv: [u8; IV_LEN], plaintext: &[u8], ad: &[u8]) -> Sealed {
    seal_with_keys(mk.cipher_key(), mk.mac_key(), iv, plaintext, ad)
}

pub fn open(mk: &MessageKey, sealed: &Sealed, ad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    open_with_keys(mk.cipher_key(), mk.mac_key(), sealed, ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use aes::cipher::block_padding::NoPadding;

    // NIST SP 800-38A F.2.5, first block
    #[test]
    fn aes256_cbc_sp800_38a_vector() {
        let key: [u8; 32] =
            hex::decode("603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4")
                .unwrap()
                .try_into()
                .unwrap();
        let iv: [u8; 16] = hex::decode("000102030405060708090a0b0c0d0e0f")
            .unwrap()
            .try_into()
            .unwrap();
        let pt = hex::decode("6bc1bee22e409f96e93d7e117393172a").unwrap();
        let ct = Aes256CbcEnc::new(&key.into(), &iv.into()).encrypt_padded_vec_mut::<NoPadding>(&pt);
        assert_eq!(hex::encode(ct), "f58c4c04d6e5f1ba779eabfb5f7bfbd6");
    }

    #[test]
    fn round_trip_and_tamper_detection() {
        let ck = [3u8; 32];
        let mk = [4u8; 32];
        let sealed = seal_with_keys(&ck, &mk, [9u8; 16], b"hello bob", b"ad");
        assert_eq!(open_with_keys(&ck, &mk, &sealed, b"ad").unwrap(), b"hello bob");
        assert!(open_with_keys(&ck, &mk, &sealed, b"ae").is_err());

        let mut bad = sealed.clone();
        bad.ciphertext[0] ^= 1;
        assert!(open_with_keys(&ck, &mk, &bad, b"ad").is_err());
        let mut bad_iv = sealed.clone();
        bad_iv.iv[3] ^= 1;
        assert!(open_with_keys(&ck, &mk, &bad_iv, b"ad").is_err());
        assert!(open_with_keys(&ck, &[5u8; 32], &sealed, b"ad").is_err());
    }
}
