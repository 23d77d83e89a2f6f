//! Handshake key schedule against values computed outside this crate
//! (Python `cryptography`: X25519 + HKDF/HMAC-SHA256 with the same labels),
//! and against a straight-line recomputation from the responder's secrets.

use hkdf::Hkdf;
use prekeysim_core::crypto::kdf::{kdf_message, kdf_root_initial, kdf_root_step};
use prekeysim_core::crypto::{
    x3dh_initiate, BundleKeys, DhKeyPair, Direction, IdentityKeyPair, KeyId, OneTimePrekeyPair,
    SignedPrekeyPair,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::Sha256;
use x25519_dalek::{PublicKey as XPublic, StaticSecret};

fn pair(byte: u8) -> DhKeyPair {
    DhKeyPair::from_secret_bytes([byte; 32])
}

struct Vector {
    rk0: &'static str,
    rk1: &'static str,
    ck00: &'static str,
    mk00_cipher: &'static str,
    ck01: &'static str,
}

const WITH_OTPK: Vector = Vector {
    rk0: "87d0592b9a24de69338388627a62f22ed5e3f8befb27a3e673be7967f329b1c0",
    rk1: "55c4902f5ec9f8b8c85446f74b76138af34970c5ec592ae48148aad66974df74",
    ck00: "3cc740b90b5b83252e75787d0d4627c212d8eecdd09f9f78a9002dd9b8b70043",
    mk00_cipher: "ab701d61aaf306e2a4c76e380afe9d56ae11eabfd1b8c12940f2d49ad3fbc402",
    ck01: "08cdda6fb6799a92cdf25fff10870816e90914ebd3942883b52134a646fdddb9",
};

const WITHOUT_OTPK: Vector = Vector {
    rk0: "3805cad5936b8eb853a52dd91307d68116694d2e37e57d983df25f365bb6560e",
    rk1: "6f63b22b1661c051435561306c4f8af3913560ced42ffcbdb0fe36ddd07ed0fb",
    ck00: "7d2f962fb8e5620390f4fda02cb268481b2b0c2fe256021fab18e0c48a0c7e98",
    mk00_cipher: "3a806e5b31d36046672dac7697b8c68a0a83620384b29be68b8fe72932f46d63",
    ck01: "c6fd5e8c7e42f1c96bdbecbe9485c4990e55b69e85fb379fc8de56ae7d1c77da",
};

fn check(v: &Vector, with_otpk: bool) {
    let (ik_a, ek, ik_b, spk, otpk, rch) = (pair(0x11), pair(0x22), pair(0x33), pair(0x44), pair(0x55), pair(0x66));
    let mut concat = Vec::new();
    concat.extend_from_slice(&ik_a.dh(&spk.public()).unwrap());
    concat.extend_from_slice(&ek.dh(&ik_b.public()).unwrap());
    concat.extend_from_slice(&ek.dh(&spk.public()).unwrap());
    if with_otpk {
        concat.extend_from_slice(&ek.dh(&otpk.public()).unwrap());
    }
    let rk0 = kdf_root_initial(&concat);
    assert_eq!(hex::encode(rk0.as_bytes()), v.rk0);
    let (rk1, ck00) = kdf_root_step(
        &rk0,
        &rch.dh(&spk.public()).unwrap(),
        0,
        Direction::InitiatorToResponder,
    );
    assert_eq!(hex::encode(rk1.as_bytes()), v.rk1);
    assert_eq!(hex::encode(ck00.as_bytes()), v.ck00);
    let (ck01, mk00) = kdf_message(&ck00);
    assert_eq!(hex::encode(mk00.cipher_key()), v.mk00_cipher);
    assert_eq!(hex::encode(ck01.as_bytes()), v.ck01);
    assert_eq!((mk00.ratchet_index(), mk00.message_index()), (0, 0));
    assert_eq!(ck01.message_index(), 1);
}

#[test]
fn external_vector_with_one_time_prekey() {
    check(&WITH_OTPK, true);
}

#[test]
fn external_vector_without_one_time_prekey() {
    check(&WITHOUT_OTPK, false);
}

fn straight_line_rk0(ik_b: &[u8; 32], spk: &[u8; 32], otpk: Option<&[u8; 32]>, ipk_a: &[u8; 32], epk: &[u8; 32]) -> [u8; 32] {
    let dh = |s: &[u8; 32], p: &[u8; 32]| {
        StaticSecret::from(*s)
            .diffie_hellman(&XPublic::from(*p))
            .to_bytes()
    };
    let mut ikm = Vec::new();
    ikm.extend_from_slice(&dh(spk, ipk_a));
    ikm.extend_from_slice(&dh(ik_b, epk));
    ikm.extend_from_slice(&dh(spk, epk));
    if let Some(o) = otpk {
        ikm.extend_from_slice(&dh(o, epk));
    }
    let mut out = [0u8; 32];
    Hkdf::<Sha256>::new(Some(&[0u8; 32]), &ikm)
        .expand(b"prekeysim/v1/root-init", &mut out)
        .unwrap();
    out
}

#[test]
fn initiator_root_key_matches_straight_line_recomputation() {
    for seed in 0..20u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let alice = IdentityKeyPair::generate(&mut rng);
        let bob = IdentityKeyPair::generate(&mut rng);
        let spk = SignedPrekeyPair::generate(KeyId(7), &bob, &mut rng).unwrap();
        let otpk = OneTimePrekeyPair::generate(KeyId(100), &mut rng);
        let with = seed % 2 == 0;
        let bundle = BundleKeys {
            identity: bob.public(),
            signed_prekey: spk.to_public(),
            one_time_prekey: with.then(|| (otpk.id(), otpk.public())),
        };
        let (mut session, keys) = x3dh_initiate(&alice, &bundle, &mut rng).unwrap();
        let env = session.encrypt(b"m", &mut rng).unwrap();
        let header = env.prekey.unwrap();
        let expected = straight_line_rk0(
            &bob.pair().secret_bytes().unwrap(),
            &spk.pair().secret_bytes().unwrap(),
            with.then(|| otpk.pair().secret_bytes().unwrap()).as_ref(),
            alice.public().as_bytes(),
            header.base_key.as_bytes(),
        );
        assert_eq!(keys.root_key_0.as_bytes(), &expected, "seed {seed}");
        assert_eq!(keys.dh_invocations, if with { 4 } else { 3 });
    }
}
