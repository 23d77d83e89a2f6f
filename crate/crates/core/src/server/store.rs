use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::bundle::{OneTimePrekeyPublic, PrekeyBundle};
use super::config::ServerConfig;
use super::Jid;
use crate::crypto::{hash_key_id, verify_prekey, KeyId, PublicKey, SignedPrekeyPublic};
use crate::time::{SimTime, SECOND};

const LOAD_WINDOW: SimTime = SECOND;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceRole {
    Main,
    Companion,
}

/// Key material a device pushes when it registers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceUpload {
    pub registration_id: u32,
    pub identity: PublicKey,
    pub signed_prekey: SignedPrekeyPublic,
    pub one_time_prekeys: Vec<OneTimePrekeyPublic>,
    pub profile: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("unknown device {0}")]
    NotFound(String),
    #[error("503 service unavailable")]
    ServiceUnavailable,
    #[error("rate limited")]
    RateLimited,
    #[error("requester is blocked by the target")]
    Blocked,
    #[error("{0} already has a main device")]
    DuplicateMain(String),
    #[error("{0} has no main device")]
    NoMainDevice(String),
    #[error("one-time prekey id {got} does not exceed previous maximum {last}")]
    NonMonotoneIds { last: u32, got: u32 },
    #[error("duplicate one-time prekey id {0} in batch")]
    DuplicateId(u32),
    #[error("key id {0} is not the hash of its public key")]
    HashIdMismatch(u32),
    #[error("signed prekey signature does not verify")]
    InvalidSignature,
    #[error("signed prekey id {got} does not advance on {current}")]
    NonMonotoneSignedId { current: u32, got: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub jid: Jid,
    pub registration_id: u32,
    pub identity: PublicKey,
    pub signed_prekey: SignedPrekeyPublic,
    pub one_time: Vec<(KeyId, PublicKey)>,
    pub last_update_epoch: u64,
    pub max_one_time_id: Option<u32>,
    pub pending_notification: bool,
    pub profile: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub fetches: u64,
    pub keys_served: u64,
    pub empty_bundles: u64,
    pub unavailable: u64,
    pub rate_limited: u64,
    pub duplicate_handouts: u64,
    pub uploads: u64,
    pub rejected_uploads: u64,
    pub notifications: u64,
    pub dropped_notifications: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Notification {
    pub device: Jid,
    pub at: SimTime,
    pub redelivery: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UploadAck {
    pub stored: usize,
    pub discarded: usize,
    pub epoch: u64,
}

struct Slot {
    record: DeviceRecord,
    load: VecDeque<SimTime>,
    requests: HashMap<String, VecDeque<SimTime>>,
    last_handout: Option<(KeyId, PublicKey)>,
    empty_since: Option<SimTime>,
    empty_total: SimTime,
    stats: DeviceStats,
}

impl Slot {
    fn new(record: DeviceRecord, now: SimTime) -> Self {
        let empty_since = record.one_time.is_empty().then_some(now);
        Self {
            record,
            load: VecDeque::new(),
            requests: HashMap::new(),
            last_handout: None,
            empty_since,
            empty_total: 0,
            stats: DeviceStats::default(),
        }
    }

    fn note_store_change(&mut self, now: SimTime) {
        match (self.record.one_time.is_empty(), self.empty_since) {
            (true, None) => self.empty_since = Some(now),
            (false, Some(since)) => {
                self.empty_total += now.saturating_sub(since);
                self.empty_since = None;
            }
            _ => {}
        }
    }
}

#[derive(Default)]
struct Account {
    next_companion_id: u32,
    devices: BTreeMap<u32, Arc<Mutex<Slot>>>,
    blocked: HashSet<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServerSnapshot {
    pub config: ServerConfig,
    pub devices: Vec<DeviceRecord>,
    pub next_companion_ids: BTreeMap<String, u32>,
}

/// The key-distribution server. Each device record sits behind its own lock,
/// so concurrent requests for one device serialize while different devices
/// proceed independently.
pub struct PrekeyServer {
    config: ServerConfig,
    accounts: RwLock<HashMap<String, Account>>,
    outbox: Mutex<Vec<Notification>>,
}

fn chance<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.gen_bool(p)
    }
}

impl PrekeyServer {
    pub fn new(config: ServerConfig) -> Self {
        Self {
            config,
            accounts: RwLock::new(HashMap::new()),
            outbox: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn epoch(&self, now: SimTime) -> u64 {
        self.config.epoch_offset_secs + now / SECOND
    }

    fn slot(&self, jid: &Jid) -> Result<Arc<Mutex<Slot>>, ServerError> {
        self.accounts
            .read()
            .get(&jid.phone)
            .and_then(|a| a.devices.get(&jid.device))
            .cloned()
            .ok_or_else(|| ServerError::NotFound(jid.to_string()))
    }

    fn check_batch(
        &self,
        keys: &[OneTimePrekeyPublic],
        previous_max: Option<u32>,
    ) -> Result<Option<u32>, ServerError> {
        if self.config.hash_key_ids {
            let mut seen = HashSet::with_capacity(keys.len());
            for k in keys {
                if hash_key_id(&k.public) != k.id {
                    return Err(ServerError::HashIdMismatch(k.id.0));
                }
                if !seen.insert(k.id) {
                    return Err(ServerError::DuplicateId(k.id.0));
                }
            }
            return Ok(previous_max);
        }
        let mut last = previous_max;
        for k in keys {
            if let Some(l) = last {
                if k.id.0 <= l {
                    return Err(ServerError::NonMonotoneIds { last: l, got: k.id.0 });
                }
            }
            last = Some(k.id.0);
        }
        Ok(last)
    }

    fn new_record(&self, jid: Jid, upload: DeviceUpload, now: SimTime) -> Result<DeviceRecord, ServerError> {
        if !verify_prekey(&upload.identity, &upload.signed_prekey.public, &upload.signed_prekey.signature) {
            return Err(ServerError::InvalidSignature);
        }
        let max = self.check_batch(&upload.one_time_prekeys, None)?;
        Ok(DeviceRecord {
            jid,
            registration_id: upload.registration_id,
            identity: upload.identity,
            signed_prekey: upload.signed_prekey,
            one_time: upload.one_time_prekeys.iter().map(|k| (k.id, k.public)).collect(),
            last_update_epoch: self.epoch(now),
            max_one_time_id: max,
            pending_notification: false,
            profile: upload.profile,
        })
    }

    /// Registers a device. Companion ids come from a per-number counter that
    /// never hands out an id twice, even after an unlink.
    pub fn register_device(
        &self,
        phone: &str,
        role: DeviceRole,
        upload: DeviceUpload,
        now: SimTime,
    ) -> Result<Jid, ServerError> {
        let mut accounts = self.accounts.write();
        let account = accounts.entry(phone.to_string()).or_default();
        let device = match role {
            DeviceRole::Main => {
                if account.devices.contains_key(&0) {
                    return Err(ServerError::DuplicateMain(phone.to_string()));
                }
                0
            }
            DeviceRole::Companion => {
                if !account.devices.contains_key(&0) {
                    return Err(ServerError::NoMainDevice(phone.to_string()));
                }
                account.next_companion_id + 1
            }
        };
        let jid = Jid {
            phone: phone.to_string(),
            device,
            server: self.config.server_name.clone(),
        };
        let record = self.new_record(jid.clone(), upload, now)?;
        if role == DeviceRole::Companion {
            account.next_companion_id = device;
        }
        account
            .devices
            .insert(device, Arc::new(Mutex::new(Slot::new(record, now))));
        Ok(jid)
    }

    /// Fresh setup of the main device: new key material under device id 0,
    /// all companions dropped and the companion counter reset.
    pub fn resetup_main(&self, phone: &str, upload: DeviceUpload, now: SimTime) -> Result<Jid, ServerError> {
        let jid = Jid {
            phone: phone.to_string(),
            device: 0,
            server: self.config.server_name.clone(),
        };
        let record = self.new_record(jid.clone(), upload, now)?;
        let mut accounts = self.accounts.write();
        let account = accounts.entry(phone.to_string()).or_default();
        account.devices.clear();
        account.next_companion_id = 0;
        account
            .devices
            .insert(0, Arc::new(Mutex::new(Slot::new(record, now))));
        Ok(jid)
    }

    pub fn unlink(&self, jid: &Jid) -> Result<(), ServerError> {
        let mut accounts = self.accounts.write();
        accounts
            .get_mut(&jid.phone)
            .and_then(|a| a.devices.remove(&jid.device))
            .map(|_| ())
            .ok_or_else(|| ServerError::NotFound(jid.to_string()))
    }

    pub fn block(&self, owner: &str, blocked: &str) {
        self.accounts
            .write()
            .entry(owner.to_string())
            .or_default()
            .blocked
            .insert(blocked.to_string());
    }

    fn is_blocked(&self, owner: &str, requester: &str) -> bool {
        self.config.block_list_effect
            && self
                .accounts
                .read()
                .get(owner)
                .is_some_and(|a| a.blocked.contains(requester))
    }

    /// Device ids registered for a number, ascending; empty if unknown.
    pub fn query_devices(&self, requester: &str, phone: &str) -> Vec<u32> {
        if self.is_blocked(phone, requester) {
            return Vec::new();
        }
        self.accounts
            .read()
            .get(phone)
            .map(|a| a.devices.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn fetch_bundle<R: Rng + ?Sized>(
        &self,
        requester: &str,
        target: &Jid,
        now: SimTime,
        rng: &mut R,
    ) -> Result<PrekeyBundle, ServerError> {
        let slot = self.slot(target)?;
        if self.is_blocked(&target.phone, requester) {
            return Err(ServerError::Blocked);
        }
        let mut s = slot.lock();
        s.stats.fetches += 1;

        while s.load.front().is_some_and(|&t| t + LOAD_WINDOW <= now) {
            s.load.pop_front();
        }
        s.load.push_back(now);
        let rps = s.load.len() as u32;
        if rps >= self.config.overload_hard_rps {
            s.stats.unavailable += 1;
            return Err(ServerError::ServiceUnavailable);
        }

        if let Some(rl) = self.config.rate_limit {
            let log = s.requests.entry(requester.to_string()).or_default();
            while log.front().is_some_and(|&t| t + rl.window_ms <= now) {
                log.pop_front();
            }
            if log.len() as u32 >= rl.bundles_per_window {
                s.stats.rate_limited += 1;
                return Err(ServerError::RateLimited);
            }
            log.push_back(now);
        }

        if chance(rng, self.config.overload_probability(rps)) {
            s.stats.unavailable += 1;
            return Err(ServerError::ServiceUnavailable);
        }

        let before = s.record.one_time.len();
        let key = if before == 0 {
            None
        } else if s.last_handout.is_some()
            && chance(rng, self.config.faults.double_handout_probability)
        {
            s.stats.duplicate_handouts += 1;
            s.last_handout
        } else {
            let idx = rng.gen_range(0..before);
            let k = s.record.one_time.swap_remove(idx);
            s.last_handout = Some(k);
            Some(k)
        };
        match key {
            Some(_) => s.stats.keys_served += 1,
            None => s.stats.empty_bundles += 1,
        }
        let after = s.record.one_time.len();
        let threshold = self.config.watermark_threshold;
        if before >= threshold && after < threshold && !s.record.pending_notification {
            s.record.pending_notification = true;
            s.stats.notifications += 1;
            if chance(rng, self.config.faults.notification_drop_probability) {
                s.stats.dropped_notifications += 1;
            } else {
                self.outbox.lock().push(Notification {
                    device: target.clone(),
                    at: now,
                    redelivery: false,
                });
            }
        }
        s.note_store_change(now);

        let r = &s.record;
        Ok(PrekeyBundle {
            jid: r.jid.clone(),
            t: r.last_update_epoch,
            registration: r.registration_id,
            identity: r.identity,
            signed_prekey: r.signed_prekey,
            key: key.map(|(id, public)| OneTimePrekeyPublic { id, public }),
        })
    }

    /// Replaces the device's one-time store with `batch`; leftovers are discarded.
    pub fn upload_prekeys<R: Rng + ?Sized>(
        &self,
        device: &Jid,
        batch: &[OneTimePrekeyPublic],
        now: SimTime,
        rng: &mut R,
    ) -> Result<UploadAck, ServerError> {
        let slot = self.slot(device)?;
        let mut s = slot.lock();
        let max = self.check_batch(batch, s.record.max_one_time_id)?;
        if chance(rng, self.config.faults.refill_reject_probability) {
            s.stats.rejected_uploads += 1;
            return Err(ServerError::ServiceUnavailable);
        }
        let discarded = s.record.one_time.len();
        s.record.one_time = batch.iter().map(|k| (k.id, k.public)).collect();
        s.record.max_one_time_id = max;
        s.record.last_update_epoch = s.record.last_update_epoch.max(self.epoch(now));
        s.record.pending_notification = false;
        s.last_handout = None;
        s.stats.uploads += 1;
        s.note_store_change(now);
        Ok(UploadAck {
            stored: batch.len(),
            discarded,
            epoch: s.record.last_update_epoch,
        })
    }

    pub fn rotate_signed_prekey(
        &self,
        device: &Jid,
        signed_prekey: SignedPrekeyPublic,
        now: SimTime,
    ) -> Result<(), ServerError> {
        let slot = self.slot(device)?;
        let mut s = slot.lock();
        if !verify_prekey(&s.record.identity, &signed_prekey.public, &signed_prekey.signature) {
            return Err(ServerError::InvalidSignature);
        }
        let current = s.record.signed_prekey.id.0;
        let advances = if self.config.hash_key_ids {
            signed_prekey.id.0 != current
        } else {
            signed_prekey.id.0 > current
        };
        if !advances {
            return Err(ServerError::NonMonotoneSignedId {
                current,
                got: signed_prekey.id.0,
            });
        }
        s.record.signed_prekey = signed_prekey;
        s.record.last_update_epoch = s.record.last_update_epoch.max(self.epoch(now));
        Ok(())
    }

    /// Called when a device comes online: a notification that is still
    /// pending is delivered again.
    pub fn reconnect(&self, device: &Jid, now: SimTime) -> Result<bool, ServerError> {
        let slot = self.slot(device)?;
        let s = slot.lock();
        if s.record.pending_notification {
            self.outbox.lock().push(Notification {
                device: device.clone(),
                at: now,
                redelivery: true,
            });
        }
        Ok(s.record.pending_notification)
    }

    pub fn drain_notifications(&self) -> Vec<Notification> {
        std::mem::take(&mut *self.outbox.lock())
    }

    pub fn record(&self, jid: &Jid) -> Option<DeviceRecord> {
        self.slot(jid).ok().map(|s| s.lock().record.clone())
    }

    pub fn store_size(&self, jid: &Jid) -> Option<usize> {
        self.slot(jid).ok().map(|s| s.lock().record.one_time.len())
    }

    pub fn store_ids(&self, jid: &Jid) -> Vec<KeyId> {
        let mut ids: Vec<KeyId> = self
            .slot(jid)
            .map(|s| s.lock().record.one_time.iter().map(|(id, _)| *id).collect())
            .unwrap_or_default();
        ids.sort();
        ids
    }

    pub fn stats(&self, jid: &Jid) -> Option<DeviceStats> {
        self.slot(jid).ok().map(|s| s.lock().stats)
    }

    /// Total time the device's one-time store has been empty up to `now`.
    pub fn empty_time(&self, jid: &Jid, now: SimTime) -> Option<SimTime> {
        self.slot(jid).ok().map(|s| {
            let s = s.lock();
            s.empty_total + s.empty_since.map_or(0, |since| now.saturating_sub(since))
        })
    }

    pub fn snapshot(&self) -> ServerSnapshot {
        let accounts = self.accounts.read();
        let mut devices = Vec::new();
        let mut next_companion_ids = BTreeMap::new();
        for (phone, account) in accounts.iter() {
            next_companion_ids.insert(phone.clone(), account.next_companion_id);
            devices.extend(account.devices.values().map(|s| s.lock().record.clone()));
        }
        devices.sort_by(|a, b| a.jid.cmp(&b.jid));
        ServerSnapshot {
            config: self.config.clone(),
            devices,
            next_companion_ids,
        }
    }

    pub fn restore(snapshot: ServerSnapshot, now: SimTime) -> Self {
        let server = Self::new(snapshot.config);
        {
            let mut accounts = server.accounts.write();
            for (phone, next) in snapshot.next_companion_ids {
                accounts.entry(phone).or_default().next_companion_id = next;
            }
            for record in snapshot.devices {
                accounts
                    .entry(record.jid.phone.clone())
                    .or_default()
                    .devices
                    .insert(record.jid.device, Arc::new(Mutex::new(Slot::new(record, now))));
            }
        }
        server
    }
}
