use std::collections::{HashMap, HashSet, VecDeque};

use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::calibration::PhoneModel;
use super::latency::{DeviceCondition, Link, PowerState};
use super::profile::{DeviceProfile, IdInit, RegistrationInit, RANDOM_ID_LIMIT, WEB_REGISTRATION_MASK};
use crate::crypto::{
    hash_key_id, x3dh_respond, CryptoError, Envelope, IdentityKeyPair, KeyId, OneTimePrekeyPair,
    PublicKey, SessionState, SignedPrekeyPair, SignedPrekeyPublic,
};
use crate::server::{DeviceRole, DeviceUpload, Jid, OneTimePrekeyPublic};
use crate::time::{SimTime, SECOND};

/// Wait before re-sending a refill the server answered with 503.
pub const REFILL_RETRY_DELAY: SimTime = 5 * SECOND;
/// Upload size of one one-time prekey (id, type byte, 32-byte key, framing).
pub const ONE_TIME_PREKEY_WIRE_BYTES: u64 = 41;
pub const REFILL_UPLOAD_BYTES: u64 = 812 * ONE_TIME_PREKEY_WIRE_BYTES;
/// Battery cost of one forced refill, in percent of capacity: the observed
/// 2 %/hour at one refill every 15 s. A conversion constant, not a model.
pub const BATTERY_PERCENT_PER_REFILL: f64 = 2.0 / 240.0;
const RETAINED_BATCHES: usize = 3;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceOptions {
    pub hash_key_ids: bool,
    /// Overrides the profile's initial batch for every device.
    pub uniform_initial_batch: Option<u32>,
    /// Rotate the signed prekey at the next upload after a session was
    /// opened without a one-time prekey, once the key is at least this old.
    pub on_demand_min_validity: Option<SimTime>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub refill_events: u64,
    pub uploads: u64,
    pub rejected_uploads: u64,
    pub bytes: u64,
    pub keys_generated: u64,
    pub signed_rotations: u64,
}

impl CostCounters {
    pub fn battery_percent(&self) -> f64 {
        self.refill_events as f64 * BATTERY_PERCENT_PER_REFILL
    }
}

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("no session with {0}")]
    NoSession(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceiveOutcome {
    pub plaintext: Vec<u8>,
    pub new_session: bool,
    pub signed_prekey: Option<KeyId>,
    pub one_time_prekey: Option<KeyId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationKind {
    Periodic,
    OnDemand,
}

struct PendingRotation {
    pair: SignedPrekeyPair,
    kind: RotationKind,
}

/// A client installation: key material, id counters, refill and rotation
/// behaviour, and the pairwise sessions it answers.
pub struct Device {
    phone: String,
    role: DeviceRole,
    jid: Option<Jid>,
    profile: DeviceProfile,
    model: Option<PhoneModel>,
    options: DeviceOptions,
    power: PowerState,
    link: Link,
    identity: IdentityKeyPair,
    registration_id: u32,
    signed: SignedPrekeyPair,
    signed_since: SimTime,
    retired: Vec<(SignedPrekeyPair, SimTime)>,
    pending_rotation: Option<PendingRotation>,
    rotation_requested: bool,
    one_time: HashMap<KeyId, OneTimePrekeyPair>,
    batches: VecDeque<Vec<KeyId>>,
    initial_keys: Vec<OneTimePrekeyPublic>,
    first_one_time_id: u32,
    next_one_time_id: u32,
    refills_built: u32,
    pending_refill: Option<Vec<OneTimePrekeyPublic>>,
    refill_in_flight: bool,
    sessions: HashMap<String, SessionState>,
    counters: CostCounters,
    no_otpk_sessions: u64,
}

impl Device {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: RngCore + CryptoRng>(
        phone: impl Into<String>,
        role: DeviceRole,
        profile: DeviceProfile,
        model: Option<PhoneModel>,
        options: DeviceOptions,
        condition: DeviceCondition,
        now: SimTime,
        rng: &mut R,
    ) -> Self {
        let identity = IdentityKeyPair::generate(rng);
        let raw: u32 = rng.gen_range(1..=0x7FFF_FFFF);
        let registration_id = match profile.registration_init {
            RegistrationInit::Random => raw,
            RegistrationInit::RandomMasked => raw & WEB_REGISTRATION_MASK,
        };
        let spk_pair = crate::crypto::DhKeyPair::generate(rng);
        let signed_id = if options.hash_key_ids {
            hash_key_id(&spk_pair.public())
        } else {
            KeyId(initial_id(profile.signed_id_init, rng))
        };
        let signed = SignedPrekeyPair::from_pair(spk_pair, signed_id, &identity, rng)
            .expect("fresh identity key is not erased");
        let first = initial_id(profile.one_time_id_init, rng).max(1);
        let mut device = Self {
            phone: phone.into(),
            role,
            jid: None,
            profile,
            model,
            options,
            power: condition.power,
            link: condition.link,
            identity,
            registration_id,
            signed,
            signed_since: now,
            retired: Vec::new(),
            pending_rotation: None,
            rotation_requested: false,
            one_time: HashMap::new(),
            batches: VecDeque::new(),
            initial_keys: Vec::new(),
            first_one_time_id: first,
            next_one_time_id: first,
            refills_built: 0,
            pending_refill: None,
            refill_in_flight: false,
            sessions: HashMap::new(),
            counters: CostCounters::default(),
            no_otpk_sessions: 0,
        };
        let n = device
            .options
            .uniform_initial_batch
            .unwrap_or(device.profile.initial_batch);
        device.initial_keys = device.generate_batch(n, 0, rng);
        device
    }

    fn generate_batch<R: RngCore + CryptoRng>(&mut self, n: u32, skip: u32, rng: &mut R) -> Vec<OneTimePrekeyPublic> {
        let mut out = Vec::with_capacity(n as usize);
        let mut ids = Vec::with_capacity(n as usize);
        let mut seen = HashSet::new();
        while out.len() < n as usize {
            let pair = crate::crypto::DhKeyPair::generate(rng);
            self.counters.keys_generated += 1;
            let id = if self.options.hash_key_ids {
                let id = hash_key_id(&pair.public());
                if self.one_time.contains_key(&id) || !seen.insert(id) {
                    continue;
                }
                id
            } else {
                // Android leaves two ids unused right after the batch's first id.
                if out.len() == 1 && skip > 0 {
                    self.next_one_time_id += skip;
                }
                let id = KeyId(self.next_one_time_id);
                self.next_one_time_id += 1;
                id
            };
            let key = OneTimePrekeyPair::from_pair(pair, id);
            out.push(OneTimePrekeyPublic {
                id,
                public: key.public(),
            });
            ids.push(id);
            self.one_time.insert(id, key);
        }
        self.batches.push_back(ids);
        while self.batches.len() > RETAINED_BATCHES {
            for id in self.batches.pop_front().unwrap_or_default() {
                self.one_time.remove(&id);
            }
        }
        out
    }

    pub fn initial_upload(&self) -> DeviceUpload {
        DeviceUpload {
            registration_id: self.registration_id,
            identity: self.identity.public(),
            signed_prekey: self.signed.to_public(),
            one_time_prekeys: self.initial_keys.clone(),
            profile: Some(self.profile.os.name().to_string()),
        }
    }

    pub fn set_jid(&mut self, jid: Jid) {
        self.jid = Some(jid);
    }

    pub fn jid(&self) -> Option<&Jid> {
        self.jid.as_ref()
    }

    pub fn phone(&self) -> &str {
        &self.phone
    }

    pub fn role(&self) -> DeviceRole {
        self.role
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn model(&self) -> Option<PhoneModel> {
        self.model
    }

    pub fn identity(&self) -> &IdentityKeyPair {
        &self.identity
    }

    pub fn registration_id(&self) -> u32 {
        self.registration_id
    }

    pub fn signed_prekey(&self) -> SignedPrekeyPublic {
        self.signed.to_public()
    }

    pub fn first_one_time_id(&self) -> u32 {
        self.first_one_time_id
    }

    pub fn next_one_time_id(&self) -> u32 {
        self.next_one_time_id
    }

    pub fn refills_built(&self) -> u32 {
        self.refills_built
    }

    pub fn counters(&self) -> CostCounters {
        self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = CostCounters::default();
    }

    pub fn no_otpk_sessions(&self) -> u64 {
        self.no_otpk_sessions
    }

    pub fn condition(&self) -> DeviceCondition {
        DeviceCondition::new(self.power, self.link)
    }

    pub fn is_online(&self) -> bool {
        self.power != PowerState::Offline
    }

    pub fn set_power(&mut self, power: PowerState) {
        self.power = power;
        if power == PowerState::Offline {
            self.refill_in_flight = false;
        }
    }

    pub fn set_link(&mut self, link: Link) {
        self.link = link;
    }

    pub fn refill_in_flight(&self) -> bool {
        self.refill_in_flight
    }

    /// Reacts to a low-watermark notification: returns the delay after which
    /// the refill reaches the server, or `None` if nothing is sent now.
    pub fn on_notification<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<SimTime> {
        if !self.is_online() || self.refill_in_flight {
            return None;
        }
        let delay = self.profile.latency.sample(self.condition(), rng)?;
        self.refill_in_flight = true;
        Some(delay)
    }

    /// The next refill batch. A batch the server rejected is sent again
    /// unchanged, so ids stay contiguous.
    pub fn build_refill<R: RngCore + CryptoRng>(&mut self, rng: &mut R) -> Vec<OneTimePrekeyPublic> {
        if let Some(batch) = &self.pending_refill {
            return batch.clone();
        }
        let batch = self.generate_batch(self.profile.refill_batch, self.profile.id_skip_per_refill, rng);
        self.refills_built += 1;
        self.pending_refill = Some(batch.clone());
        batch
    }

    pub fn refill_accepted(&mut self) {
        let n = self.pending_refill.take().map_or(0, |b| b.len() as u64);
        self.refill_in_flight = false;
        self.counters.refill_events += 1;
        self.counters.uploads += 1;
        self.counters.bytes += n * ONE_TIME_PREKEY_WIRE_BYTES;
    }

    /// Returns the retry delay.
    pub fn refill_rejected(&mut self) -> SimTime {
        self.counters.rejected_uploads += 1;
        self.counters.bytes += self
            .pending_refill
            .as_ref()
            .map_or(0, |b| b.len() as u64 * ONE_TIME_PREKEY_WIRE_BYTES);
        REFILL_RETRY_DELAY
    }

    /// Abandons an in-flight refill (device went offline before it landed).
    pub fn refill_abandoned(&mut self) {
        self.refill_in_flight = false;
    }

    pub fn next_periodic_rotation(&self) -> Option<SimTime> {
        self.profile
            .signed_rotation_interval
            .map(|i| self.signed_since + i)
    }

    /// An on-demand rotation due with the next upload, if any.
    pub fn on_demand_rotation_due(&self, now: SimTime) -> bool {
        match self.options.on_demand_min_validity {
            Some(min) => self.rotation_requested && now >= self.signed_since + min,
            None => false,
        }
    }

    pub fn prepare_rotation<R: RngCore + CryptoRng>(&mut self, kind: RotationKind, rng: &mut R) -> SignedPrekeyPublic {
        let pair = crate::crypto::DhKeyPair::generate(rng);
        let id = if self.options.hash_key_ids {
            let mut id = hash_key_id(&pair.public());
            if id == self.signed.id() {
                id = KeyId(id.0.wrapping_add(1));
            }
            id
        } else {
            KeyId(self.signed.id().0 + 1)
        };
        let signed = SignedPrekeyPair::from_pair(pair, id, &self.identity, rng)
            .expect("identity key is never erased while the device runs");
        let public = signed.to_public();
        self.pending_rotation = Some(PendingRotation { pair: signed, kind });
        public
    }

    /// Makes the prepared signed prekey current. The superseded secret is
    /// kept for one retention period; returns when it is due for erasure.
    pub fn commit_rotation(&mut self, now: SimTime) -> Option<SimTime> {
        let pending = self.pending_rotation.take()?;
        let retention = match pending.kind {
            RotationKind::Periodic => self.profile.signed_rotation_interval.unwrap_or(0),
            RotationKind::OnDemand => self.options.on_demand_min_validity.unwrap_or(0),
        };
        if pending.kind == RotationKind::OnDemand {
            self.rotation_requested = false;
        }
        let old = std::mem::replace(&mut self.signed, pending.pair);
        self.signed_since = now;
        self.counters.signed_rotations += 1;
        let erase_at = now + retention;
        self.retired.push((old, erase_at));
        Some(erase_at)
    }

    /// Erases superseded signed prekeys whose retention ended; returns their ids.
    pub fn erase_expired(&mut self, now: SimTime) -> Vec<KeyId> {
        let mut erased = Vec::new();
        for (pair, at) in &mut self.retired {
            if *at <= now && !pair.is_erased() {
                pair.erase();
                erased.push(pair.id());
            }
        }
        erased
    }

    /// Signed prekey secrets the device still holds (what a device
    /// compromise at this moment would reveal).
    pub fn held_signed_prekeys(&self) -> Vec<SignedPrekeyPair> {
        std::iter::once(&self.signed)
            .chain(self.retired.iter().map(|(p, _)| p))
            .filter(|p| !p.is_erased())
            .cloned()
            .collect()
    }

    fn find_signed(&self, id: KeyId) -> Option<&SignedPrekeyPair> {
        std::iter::once(&self.signed)
            .chain(self.retired.iter().map(|(p, _)| p))
            .find(|p| p.id() == id && !p.is_erased())
    }

    pub fn receive<R: RngCore + CryptoRng>(
        &mut self,
        from: &str,
        envelope: &Envelope,
        rng: &mut R,
    ) -> Result<ReceiveOutcome, DeviceError> {
        let Some(header) = envelope.prekey else {
            let session = self
                .sessions
                .get_mut(from)
                .ok_or_else(|| DeviceError::NoSession(from.to_string()))?;
            let plaintext = session.decrypt(envelope, rng)?;
            return Ok(ReceiveOutcome {
                plaintext,
                new_session: false,
                signed_prekey: None,
                one_time_prekey: None,
            });
        };
        if let Some(session) = self.sessions.get_mut(from) {
            if session.base_key() == header.base_key {
                let plaintext = session.decrypt(envelope, rng)?;
                return Ok(ReceiveOutcome {
                    plaintext,
                    new_session: false,
                    signed_prekey: Some(header.signed_prekey_id),
                    one_time_prekey: header.one_time_prekey_id,
                });
            }
        }
        let signed = self
            .find_signed(header.signed_prekey_id)
            .ok_or(CryptoError::StaleBundle(header.signed_prekey_id))?;
        let one_time = match header.one_time_prekey_id {
            Some(id) => Some(
                self.one_time
                    .get(&id)
                    .ok_or(CryptoError::UnknownOneTimePrekey(id))?,
            ),
            None => None,
        };
        let (state, plaintext, _) = x3dh_respond(&self.identity, signed, one_time, envelope, rng)?;
        match header.one_time_prekey_id {
            Some(id) => {
                self.one_time.remove(&id);
            }
            None => {
                self.no_otpk_sessions += 1;
                if self.options.on_demand_min_validity.is_some() {
                    self.rotation_requested = true;
                }
            }
        }
        self.sessions.insert(from.to_string(), state);
        Ok(ReceiveOutcome {
            plaintext,
            new_session: true,
            signed_prekey: Some(header.signed_prekey_id),
            one_time_prekey: header.one_time_prekey_id,
        })
    }

    pub fn encrypt_to<R: RngCore + CryptoRng>(
        &mut self,
        peer: &str,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Result<Envelope, DeviceError> {
        let session = self
            .sessions
            .get_mut(peer)
            .ok_or_else(|| DeviceError::NoSession(peer.to_string()))?;
        Ok(session.encrypt(plaintext, rng)?)
    }

    pub fn session(&self, peer: &str) -> Option<&SessionState> {
        self.sessions.get(peer)
    }

    pub fn holds_one_time_secret(&self, id: KeyId) -> bool {
        self.one_time.contains_key(&id)
    }

    pub fn identity_public(&self) -> PublicKey {
        self.identity.public()
    }
}

fn initial_id<R: Rng + ?Sized>(init: IdInit, rng: &mut R) -> u32 {
    match init {
        IdInit::Zero => 0,
        IdInit::One => 1,
        IdInit::Random => rng.gen_range(1..RANDOM_ID_LIMIT),
    }
}
