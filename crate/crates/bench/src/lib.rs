//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use prekeysim_core::crypto::{BundleKeys, IdentityKeyPair, KeyId, OneTimePrekeyPair, SignedPrekeyPair};
use prekeysim_core::device::{Device, DeviceCondition, DeviceOptions, DeviceProfile, Link, PowerState};
use prekeysim_core::server::{DeviceRole, Jid, PrekeyServer, ServerConfig};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Long-term and medium-term keys of a responder plus one one-time prekey.
pub struct Responder {
    pub identity: IdentityKeyPair,
    pub signed: SignedPrekeyPair,
    pub one_time: OneTimePrekeyPair,
}

impl Responder {
    pub fn generate(rng: &mut ChaCha20Rng) -> Self {
        let identity = IdentityKeyPair::generate(rng);
        let signed = SignedPrekeyPair::generate(KeyId(1), &identity, rng).expect("fresh identity signs");
        let one_time = OneTimePrekeyPair::generate(KeyId(2), rng);
        Self {
            identity,
            signed,
            one_time,
        }
    }

    pub fn bundle(&self, with_one_time: bool) -> BundleKeys {
        BundleKeys {
            identity: self.identity.public(),
            signed_prekey: self.signed.to_public(),
            one_time_prekey: with_one_time.then(|| (self.one_time.id(), self.one_time.public())),
        }
    }
}

/// A server holding one freshly registered Android phone.
pub fn loaded_server(rng: &mut ChaCha20Rng) -> (PrekeyServer, Jid) {
    let device = Device::new(
        "4915100000009",
        DeviceRole::Main,
        DeviceProfile::android(),
        None,
        DeviceOptions::default(),
        DeviceCondition::new(PowerState::Offline, Link::Wifi),
        0,
        rng,
    );
    let server = PrekeyServer::new(ServerConfig::default());
    let jid = server
        .register_device("4915100000009", DeviceRole::Main, device.initial_upload(), 0)
        .expect("registration");
    (server, jid)
}
