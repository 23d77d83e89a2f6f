use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::crypto::{hash_key_id, IdentityKeyPair, KeyId, PublicKey, SignedPrekeyPair};
use crate::time::{MINUTE, SECOND};

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn otpks(first: u32, n: u32) -> Vec<OneTimePrekeyPublic> {
    (first..first + n)
        .map(|i| {
            let mut b = [0u8; 32];
            b[..4].copy_from_slice(&i.to_be_bytes());
            OneTimePrekeyPublic {
                id: KeyId(i),
                public: PublicKey::from_bytes(b),
            }
        })
        .collect()
}

struct Keys {
    identity: IdentityKeyPair,
    signed: SignedPrekeyPair,
}

fn keys(seed: u64) -> Keys {
    let mut r = rng(seed);
    let identity = IdentityKeyPair::generate(&mut r);
    let signed = SignedPrekeyPair::generate(KeyId(1), &identity, &mut r).unwrap();
    Keys { identity, signed }
}

fn upload(k: &Keys, first: u32, n: u32) -> DeviceUpload {
    DeviceUpload {
        registration_id: 0x5DB,
        identity: k.identity.public(),
        signed_prekey: k.signed.to_public(),
        one_time_prekeys: otpks(first, n),
        profile: None,
    }
}

fn server_with(config: ServerConfig, n: u32) -> (PrekeyServer, Jid, Keys) {
    let k = keys(99);
    let s = PrekeyServer::new(config);
    let jid = s
        .register_device("123456789", DeviceRole::Main, upload(&k, 1, n), 0)
        .unwrap();
    (s, jid, k)
}

#[test]
fn device_ids_are_never_reused() {
    let k = keys(1);
    let s = PrekeyServer::new(ServerConfig::default());
    let phone = "123456789";
    assert_eq!(s.register_device(phone, DeviceRole::Main, upload(&k, 1, 5), 0).unwrap().device, 0);
    assert_eq!(s.register_device(phone, DeviceRole::Companion, upload(&k, 1, 5), 0).unwrap().device, 1);
    let second = s.register_device(phone, DeviceRole::Companion, upload(&k, 1, 5), 0).unwrap();
    assert_eq!(second.device, 2);
    s.unlink(&second).unwrap();
    assert_eq!(s.register_device(phone, DeviceRole::Companion, upload(&k, 1, 5), 0).unwrap().device, 3);
    assert_eq!(s.query_devices("555", phone), vec![0, 1, 3]);
    assert_eq!(
        s.register_device(phone, DeviceRole::Main, upload(&k, 1, 5), 0).unwrap_err(),
        ServerError::DuplicateMain(phone.into())
    );
}

#[test]
fn companion_needs_main_and_unknown_number_is_empty() {
    let k = keys(2);
    let s = PrekeyServer::new(ServerConfig::default());
    assert!(matches!(
        s.register_device("1", DeviceRole::Companion, upload(&k, 1, 1), 0),
        Err(ServerError::NoMainDevice(_))
    ));
    assert!(s.query_devices("555", "404").is_empty());
    s.register_device("2", DeviceRole::Main, upload(&k, 1, 1), 0).unwrap();
    assert_eq!(s.query_devices("555", "2"), vec![0]);
}

#[test]
fn resetup_keeps_main_id_and_drops_companions() {
    let k = keys(3);
    let s = PrekeyServer::new(ServerConfig::default());
    s.register_device("7", DeviceRole::Main, upload(&k, 1, 3), 0).unwrap();
    s.register_device("7", DeviceRole::Companion, upload(&k, 1, 3), 0).unwrap();
    let k2 = keys(4);
    let jid = s.resetup_main("7", upload(&k2, 1, 9), 5 * SECOND).unwrap();
    assert_eq!(jid.device, 0);
    assert_eq!(s.query_devices("x", "7"), vec![0]);
    assert_eq!(s.record(&jid).unwrap().identity, k2.identity.public());
    assert_eq!(s.register_device("7", DeviceRole::Companion, upload(&k, 1, 3), 0).unwrap().device, 1);
}

#[test]
fn block_list_has_no_effect_by_default() {
    let (s, jid, _) = server_with(ServerConfig::default(), 20);
    s.block("123456789", "666");
    assert_eq!(s.query_devices("666", "123456789"), vec![0]);
    assert!(s.fetch_bundle("666", &jid, 0, &mut rng(0)).is_ok());

    let (s, jid, _) = server_with(
        ServerConfig {
            block_list_effect: true,
            ..ServerConfig::default()
        },
        20,
    );
    s.block("123456789", "666");
    assert!(s.query_devices("666", "123456789").is_empty());
    assert_eq!(s.fetch_bundle("666", &jid, 0, &mut rng(0)).unwrap_err(), ServerError::Blocked);
}

#[test]
fn fetch_pops_one_key_from_the_uploaded_set() {
    let (s, jid, _) = server_with(ServerConfig::default(), 812);
    let b = s.fetch_bundle("555", &jid, 0, &mut rng(1)).unwrap();
    let id = b.key.unwrap().id;
    assert!((1..=812).contains(&id.0));
    assert_eq!(s.store_size(&jid), Some(811));
    assert!(!s.store_ids(&jid).contains(&id));
}

#[test]
fn sequential_drain_hands_out_each_id_once_then_empty_bundles() {
    let (s, jid, _) = server_with(ServerConfig::default(), 812);
    let mut r = rng(2);
    let mut seen = HashSet::new();
    for i in 0..812u64 {
        let b = s.fetch_bundle("555", &jid, i * 100, &mut r).unwrap();
        assert!(seen.insert(b.key.unwrap().id));
    }
    assert_eq!(seen.len(), 812);
    for i in 0..3u64 {
        assert!(s.fetch_bundle("555", &jid, 100_000 + i * 100, &mut r).unwrap().key.is_none());
    }
}

#[test]
fn unknown_target_is_not_found() {
    let (s, _, _) = server_with(ServerConfig::default(), 1);
    assert!(matches!(
        s.fetch_bundle("1", &Jid::new("123456789", 5), 0, &mut rng(0)),
        Err(ServerError::NotFound(_))
    ));
}

#[test]
fn watermark_fires_at_ten_once_and_redelivers_on_reconnect() {
    let (s, jid, _) = server_with(ServerConfig::default(), 15);
    let mut r = rng(3);
    for i in 0..4u64 {
        s.fetch_bundle("555", &jid, i * 100, &mut r).unwrap();
        assert!(s.drain_notifications().is_empty(), "size {}", s.store_size(&jid).unwrap());
    }
    s.fetch_bundle("555", &jid, 500, &mut r).unwrap();
    assert_eq!(s.store_size(&jid), Some(10));
    let n = s.drain_notifications();
    assert_eq!(n.len(), 1);
    assert_eq!(n[0].device, jid);
    for i in 0..10u64 {
        s.fetch_bundle("555", &jid, 600 + i * 100, &mut r).unwrap();
    }
    assert!(s.drain_notifications().is_empty());
    assert!(s.reconnect(&jid, 5000).unwrap());
    assert!(s.drain_notifications()[0].redelivery);
    s.upload_prekeys(&jid, &otpks(16, 812), 6000, &mut r).unwrap();
    assert!(!s.reconnect(&jid, 7000).unwrap());
    assert!(s.drain_notifications().is_empty());
}

#[test]
fn upload_invalidates_leftovers_and_updates_timestamp() {
    let (s, jid, _) = server_with(ServerConfig::default(), 5);
    let t0 = s.record(&jid).unwrap().last_update_epoch;
    let ack = s.upload_prekeys(&jid, &otpks(6, 812), 90 * SECOND, &mut rng(0)).unwrap();
    assert_eq!((ack.stored, ack.discarded), (812, 5));
    assert_eq!(s.store_size(&jid), Some(812));
    assert_eq!(s.record(&jid).unwrap().last_update_epoch, t0 + 90);
    let b = s.fetch_bundle("1", &jid, 91 * SECOND, &mut rng(1)).unwrap();
    assert_eq!(b.t, t0 + 90);
    assert!(b.key.unwrap().id.0 >= 6);
}

#[test]
fn non_monotone_upload_is_a_protocol_error() {
    let (s, jid, _) = server_with(ServerConfig::default(), 5);
    assert_eq!(
        s.upload_prekeys(&jid, &otpks(5, 10), 0, &mut rng(0)).unwrap_err(),
        ServerError::NonMonotoneIds { last: 5, got: 5 }
    );
    assert_eq!(s.store_size(&jid), Some(5));
}

#[test]
fn rejected_refill_leaves_store_unchanged() {
    let cfg = ServerConfig {
        faults: FaultModes {
            refill_reject_probability: 1.0,
            ..FaultModes::default()
        },
        ..ServerConfig::default()
    };
    let (s, jid, _) = server_with(cfg, 5);
    let before = s.record(&jid).unwrap();
    assert_eq!(
        s.upload_prekeys(&jid, &otpks(6, 812), SECOND, &mut rng(0)).unwrap_err(),
        ServerError::ServiceUnavailable
    );
    assert_eq!(s.record(&jid).unwrap(), before);
}

#[test]
fn rate_limited_fetch_does_not_consume() {
    let cfg = ServerConfig {
        rate_limit: Some(RateLimit {
            bundles_per_window: 1,
            window_ms: MINUTE,
        }),
        ..ServerConfig::default()
    };
    let (s, jid, _) = server_with(cfg, 30);
    let mut r = rng(4);
    s.fetch_bundle("666", &jid, 0, &mut r).unwrap();
    for i in 1..20u64 {
        assert_eq!(s.fetch_bundle("666", &jid, i * SECOND, &mut r).unwrap_err(), ServerError::RateLimited);
    }
    assert_eq!(s.store_size(&jid), Some(29));
    assert!(s.fetch_bundle("777", &jid, 20 * SECOND, &mut r).is_ok());
    assert!(s.fetch_bundle("666", &jid, MINUTE, &mut r).is_ok());
}

#[test]
fn hard_overload_blocks_every_requester() {
    let (s, jid, _) = server_with(ServerConfig::default(), 812);
    let mut r = rng(5);
    for ms in 0..3000u64 {
        for _ in 0..2 {
            let _ = s.fetch_bundle("666", &jid, ms, &mut r);
        }
        if ms >= 1000 && ms % 250 == 0 {
            for who in ["111", "222"] {
                assert_eq!(s.fetch_bundle(who, &jid, ms, &mut r).unwrap_err(), ServerError::ServiceUnavailable);
            }
        }
    }
}

#[test]
fn below_soft_threshold_nothing_is_refused() {
    let (s, jid, _) = server_with(ServerConfig::default(), 812);
    let mut r = rng(6);
    for i in 0..600u64 {
        assert!(s.fetch_bundle("666", &jid, i * 25, &mut r).is_ok());
    }
}

#[test]
fn double_handout_fault_repeats_previous_key() {
    let cfg = ServerConfig {
        faults: FaultModes {
            double_handout_probability: 1.0,
            ..FaultModes::default()
        },
        ..ServerConfig::default()
    };
    let (s, jid, _) = server_with(cfg, 50);
    let mut r = rng(7);
    let a = s.fetch_bundle("1", &jid, 0, &mut r).unwrap().key.unwrap();
    let b = s.fetch_bundle("2", &jid, 100, &mut r).unwrap().key.unwrap();
    assert_eq!(a, b);
    assert_eq!(s.stats(&jid).unwrap().duplicate_handouts, 1);
}

#[test]
fn signed_prekey_rotation_rules() {
    let (s, jid, k) = server_with(ServerConfig::default(), 5);
    let mut r = rng(8);
    let next = SignedPrekeyPair::generate(KeyId(2), &k.identity, &mut r).unwrap();
    s.rotate_signed_prekey(&jid, next.to_public(), 30 * SECOND).unwrap();
    assert_eq!(s.record(&jid).unwrap().signed_prekey.id, KeyId(2));
    let stale = SignedPrekeyPair::generate(KeyId(2), &k.identity, &mut r).unwrap();
    assert!(matches!(
        s.rotate_signed_prekey(&jid, stale.to_public(), 31 * SECOND),
        Err(ServerError::NonMonotoneSignedId { .. })
    ));
    let other = IdentityKeyPair::generate(&mut r);
    let forged = SignedPrekeyPair::generate(KeyId(3), &other, &mut r).unwrap();
    assert_eq!(
        s.rotate_signed_prekey(&jid, forged.to_public(), 32 * SECOND).unwrap_err(),
        ServerError::InvalidSignature
    );
}

#[test]
fn hash_id_mode_checks_ids_against_keys() {
    let cfg = ServerConfig {
        hash_key_ids: true,
        ..ServerConfig::default()
    };
    let k = keys(9);
    let s = PrekeyServer::new(cfg);
    let hashed: Vec<_> = otpks(1, 20)
        .into_iter()
        .map(|o| OneTimePrekeyPublic {
            id: hash_key_id(&o.public),
            public: o.public,
        })
        .collect();
    let mut up = upload(&k, 1, 0);
    up.one_time_prekeys = hashed.clone();
    let jid = s.register_device("9", DeviceRole::Main, up, 0).unwrap();
    assert_eq!(s.store_size(&jid), Some(20));
    assert!(matches!(
        s.upload_prekeys(&jid, &otpks(100, 3), 0, &mut rng(0)),
        Err(ServerError::HashIdMismatch(100))
    ));
}

#[test]
fn empty_time_accumulates_only_while_empty() {
    let (s, jid, _) = server_with(ServerConfig::default(), 2);
    let mut r = rng(10);
    s.fetch_bundle("1", &jid, 0, &mut r).unwrap();
    s.fetch_bundle("1", &jid, 1000, &mut r).unwrap();
    assert_eq!(s.empty_time(&jid, 4000), Some(3000));
    s.upload_prekeys(&jid, &otpks(3, 812), 5000, &mut r).unwrap();
    assert_eq!(s.empty_time(&jid, 9000), Some(4000));
}

#[test]
fn snapshot_round_trips_through_json() {
    let (s, jid, _) = server_with(ServerConfig::default(), 12);
    s.fetch_bundle("1", &jid, 0, &mut rng(11)).unwrap();
    let snap = s.snapshot();
    let text = serde_json::to_string(&snap).unwrap();
    let back: ServerSnapshot = serde_json::from_str(&text).unwrap();
    let restored = PrekeyServer::restore(back, 0);
    assert_eq!(restored.record(&jid), s.record(&jid));
    assert_eq!(restored.snapshot().devices, snap.devices);
}

#[derive(Clone, Debug)]
enum Op {
    Fetch(u8),
    Upload(u16),
    Advance(u16),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (0u8..4).prop_map(Op::Fetch),
        1 => (0u16..900).prop_map(Op::Upload),
        2 => (0u16..3000).prop_map(Op::Advance),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_invariants_hold_under_any_op_sequence(ops in prop::collection::vec(op(), 1..400), seed in any::<u64>()) {
        let cfg = ServerConfig {
            rate_limit: Some(RateLimit { bundles_per_window: 50, window_ms: 10 * SECOND }),
            ..ServerConfig::default()
        };
        let (s, jid, _) = server_with(cfg, 40);
        let mut r = rng(seed);
        let mut now = 0u64;
        let mut next_id = 41u32;
        let mut handed: HashSet<KeyId> = HashSet::new();
        let mut last_t = s.record(&jid).unwrap().last_update_epoch;
        let mut pending = false;
        for op in ops {
            match op {
                Op::Fetch(who) => {
                    let before = s.record(&jid).unwrap();
                    match s.fetch_bundle(&format!("{who}"), &jid, now, &mut r) {
                        Ok(b) => {
                            if let Some(k) = b.key {
                                prop_assert!(handed.insert(k.id), "key {} handed out twice", k.id);
                            }
                            let after = s.store_size(&jid).unwrap();
                            let fired = !s.drain_notifications().is_empty();
                            let crossing = before.one_time.len() >= 11 && after < 11 && !pending;
                            prop_assert_eq!(fired, crossing);
                            pending |= fired;
                        }
                        Err(ServerError::RateLimited) | Err(ServerError::ServiceUnavailable) => {
                            prop_assert_eq!(s.record(&jid).unwrap().one_time, before.one_time);
                        }
                        Err(e) => prop_assert!(false, "unexpected {e}"),
                    }
                }
                Op::Upload(n) => {
                    s.upload_prekeys(&jid, &otpks(next_id, u32::from(n)), now, &mut r).unwrap();
                    next_id += u32::from(n);
                    pending = false;
                }
                Op::Advance(ms) => now += u64::from(ms),
            }
            let t = s.record(&jid).unwrap().last_update_epoch;
            prop_assert!(t >= last_t);
            last_t = t;
        }
    }
}
