use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::deplete::{Depleter, DepletionMode, DepletionReport};
use super::fingerprint::{FingerprintVerdict, Fingerprinter};
use crate::crypto::compromise_oracle;
use crate::device::{
    DeviceCondition, DeviceOptions, DeviceProfile, Link, OsKind, PhoneModel, PowerState, BATTERY_PERCENT_PER_REFILL,
    REFILL_BATCH, REFILL_UPLOAD_BYTES,
};
use crate::server::{DeviceRole, Jid, RateLimit, ServerConfig};
use crate::simnet::{DeviceSpec, Initiator, NetworkModel, RetryPolicy, Sim, SimConfig, SimError};
use crate::time::{as_secs_f64, from_secs_f64, SimTime, DAY, HOUR, MINUTE, SECOND};

const VICTIM_PHONE: &str = "4915100000001";
const ATTACKER: &str = "attacker";

fn stratified(rng: &mut ChaCha20Rng, n: u32, start: SimTime, span: SimTime) -> Vec<SimTime> {
    (0..n)
        .map(|i| {
            let u: f64 = rng.gen();
            start + ((f64::from(i) + u) * span as f64 / f64::from(n)) as SimTime
        })
        .collect()
}

fn standby_wifi() -> DeviceCondition {
    DeviceCondition::new(PowerState::Standby, Link::Wifi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfsExperimentConfig {
    pub model: PhoneModel,
    pub condition: DeviceCondition,
    pub trials: u32,
    /// Refill cycles simulated after warm-up; trial times spread over them.
    pub cycles: u32,
    pub warmup_cycles: u32,
    pub max_pre_reply: u32,
    pub post_reply: u32,
    pub reply_after: SimTime,
    pub network: NetworkModel,
    pub server: ServerConfig,
    pub device_options: DeviceOptions,
    pub seed: u64,
}

impl Default for PfsExperimentConfig {
    fn default() -> Self {
        Self {
            model: PhoneModel::GalaxyA54,
            condition: standby_wifi(),
            trials: 500,
            cycles: 100,
            warmup_cycles: 2,
            max_pre_reply: 3,
            post_reply: 1,
            reply_after: 10 * SECOND,
            network: NetworkModel::default(),
            server: ServerConfig::default(),
            device_options: DeviceOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PfsCell {
    pub model: PhoneModel,
    pub condition: DeviceCondition,
    pub target_rate: f64,
    pub trials: u32,
    pub no_otpk_sessions: u32,
    pub success_rate: f64,
    pub empty_fraction: f64,
    pub oracle_decrypted_sessions: u32,
    pub oracle_false_positives: u32,
    pub oracle_false_negatives: u32,
    pub oracle_sound: bool,
    pub simulated_ms: SimTime,
    pub fetches: u64,
}

impl PfsCell {
    pub const CSV_HEADER: &'static str = "model,state,target_rate,success_rate,trials,no_otpk_sessions,empty_fraction,oracle_decrypted_sessions,oracle_sound,simulated_s,fetches";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.2},{:.4},{},{},{:.4},{},{},{:.0},{}",
            self.model.name(),
            self.condition,
            self.target_rate,
            self.success_rate,
            self.trials,
            self.no_otpk_sessions,
            self.empty_fraction,
            self.oracle_decrypted_sessions,
            self.oracle_sound,
            as_secs_f64(self.simulated_ms),
            self.fetches
        )
    }
}

/// Continuous synchronous depletion against one phone while honest contacts
/// open conversations at stratified random times. A trial succeeds when the
/// contact's bundle had no one-time prekey. The compromise oracle is then
/// run over the recorded traffic to confirm that exactly those sessions'
/// pre-reply messages are recoverable.
pub fn pfs_experiment(cfg: &PfsExperimentConfig) -> Result<PfsCell, SimError> {
    let mut sim = Sim::new(SimConfig {
        seed: cfg.seed,
        network: cfg.network.clone(),
        server: cfg.server.clone(),
        device_options: cfg.device_options.clone(),
        ..Default::default()
    });
    let spec = DeviceSpec::phone_model(VICTIM_PHONE, cfg.model)
        .condition(cfg.condition)
        .reply_after(cfg.reply_after);
    let jid = sim.add_device(spec)?;

    let per_fetch = sim.network().sync_depletion_secs(1);
    let refill_delay = match cfg.condition.power {
        PowerState::Offline => 0.0,
        _ => cfg.model.latency_model().get(cfg.condition).map_or(0.0, |d| d.mean_secs()),
    };
    let cycle = from_secs_f64(f64::from(REFILL_BATCH - 10) * per_fetch + refill_delay);
    let warmup = cycle * u64::from(cfg.warmup_cycles);
    let span = cycle * u64::from(cfg.cycles);
    let horizon = warmup + span;

    sim.add_agent(
        Box::new(
            Depleter::new(ATTACKER, jid.clone(), DepletionMode::Sync)
                .continuous(Some(horizon))
                .without_id_tracking(),
        ),
        0,
    )?;
    let mut plan_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x7f4a_7c15);
    let times = stratified(&mut plan_rng, cfg.trials, warmup, span);
    let mut agents = Vec::with_capacity(times.len());
    for (i, t) in times.into_iter().enumerate() {
        let pre = plan_rng.gen_range(1..=cfg.max_pre_reply.max(1));
        let alice = Initiator::new(format!("contact-{i}"), jid.clone()).messages(pre, cfg.post_reply);
        agents.push(sim.add_agent(Box::new(alice), t)?);
    }
    let empty_before = sim.server().empty_time(&jid, warmup);
    sim.run_until(warmup)?;
    let empty_at_warmup = sim.server().empty_time(&jid, warmup).unwrap_or(0);
    let _ = empty_before;
    sim.run_until(horizon + cycle)?;
    let empty_total = sim.server().empty_time(&jid, horizon).unwrap_or(0);

    let device = sim.device(&jid).expect("victim registered");
    let held = device.held_signed_prekeys();
    let mut no_otpk = 0;
    let mut decrypted_sessions = 0;
    let mut fp = 0;
    let mut fneg = 0;
    for &a in &agents {
        let name = format!("contact-{}", a - agents[0]);
        let rec = sim.agent::<Initiator>(a).expect("initiator").record().clone();
        let without = rec.bundle_had_one_time_prekey == Some(false);
        if without {
            no_otpk += 1;
        }
        let sent: Vec<_> = sim
            .channel_log()
            .envelopes_between(&name, &jid.to_string())
            .cloned()
            .collect();
        let outcomes = compromise_oracle(&sent, device.identity(), &held).expect("secrets not erased");
        let any = outcomes.iter().any(|o| o.is_decrypted());
        if any {
            decrypted_sessions += 1;
        }
        for (k, o) in outcomes.iter().enumerate() {
            let expected = without && (k as u32) < rec.pre_reply_sent;
            match (o.is_decrypted(), expected) {
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    Ok(PfsCell {
        model: cfg.model,
        condition: cfg.condition,
        target_rate: cfg.model.target_rate(cfg.condition),
        trials: cfg.trials,
        no_otpk_sessions: no_otpk,
        success_rate: f64::from(no_otpk) / f64::from(cfg.trials.max(1)),
        empty_fraction: (empty_total - empty_at_warmup) as f64 / span as f64,
        oracle_decrypted_sessions: decrypted_sessions,
        oracle_false_positives: fp,
        oracle_false_negatives: fneg,
        oracle_sound: fp == 0 && fneg == 0 && decrypted_sessions == no_otpk,
        simulated_ms: horizon,
        fetches: sim.metrics().fetches,
    })
}

/// The 6 phones x 4 conditions matrix.
pub fn table2(base: &PfsExperimentConfig) -> Result<Vec<PfsCell>, SimError> {
    let mut cells = Vec::new();
    for (m, model) in PhoneModel::ALL.into_iter().enumerate() {
        for (c, condition) in DeviceCondition::ALL.into_iter().enumerate() {
            let cfg = PfsExperimentConfig {
                model,
                condition,
                seed: base.seed.wrapping_add((m * 4 + c) as u64),
                ..base.clone()
            };
            cells.push(pfs_experiment(&cfg)?);
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DosConfig {
    pub rate: u32,
    pub duration: SimTime,
    pub probes: u32,
    /// Delay between the end of the attack and the contact restarting the app.
    pub restart_after: SimTime,
    pub network: NetworkModel,
    pub server: ServerConfig,
    pub seed: u64,
}

impl Default for DosConfig {
    fn default() -> Self {
        Self {
            rate: 2000,
            duration: 60 * SECOND,
            probes: 200,
            restart_after: 30 * SECOND,
            network: NetworkModel::default(),
            server: ServerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DosReport {
    pub rate: u32,
    pub duration_ms: SimTime,
    pub probes: u32,
    pub probe_failures: u32,
    pub victim_fetch_failure_rate: f64,
    pub legit_session_established: bool,
    pub message_delivered_at: Option<SimTime>,
    pub restart_at: SimTime,
    pub delivered_only_after_restart: bool,
    pub attacker_requests: u64,
    pub attacker_unavailable: u64,
}

impl DosReport {
    pub const CSV_HEADER: &'static str = "rate,duration_s,probes,probe_failures,failure_rate,legit_session_established,message_delivered_at_s,restart_at_s,delivered_only_after_restart,attacker_requests,attacker_unavailable";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.0},{},{},{:.4},{},{},{:.0},{},{},{}",
            self.rate,
            as_secs_f64(self.duration_ms),
            self.probes,
            self.probe_failures,
            self.victim_fetch_failure_rate,
            self.legit_session_established,
            self.message_delivered_at
                .map(|t| format!("{:.3}", as_secs_f64(t)))
                .unwrap_or_default(),
            as_secs_f64(self.restart_at),
            self.delivered_only_after_restart,
            self.attacker_requests,
            self.attacker_unavailable
        )
    }
}

/// Clogs one device's bundle endpoint while honest contacts try to start
/// conversations. One contact queues a message and, like the observed
/// client, only retries after an application restart.
pub fn dos_clog(cfg: &DosConfig) -> Result<DosReport, SimError> {
    let mut sim = Sim::new(SimConfig {
        seed: cfg.seed,
        network: cfg.network.clone(),
        server: cfg.server.clone(),
        ..Default::default()
    });
    let jid = sim.add_device(DeviceSpec::phone_model(VICTIM_PHONE, PhoneModel::GalaxyA54))?;
    let attacker = sim.add_agent(
        Box::new(
            Depleter::new(ATTACKER, jid.clone(), DepletionMode::Async { rate: cfg.rate })
                .continuous(Some(cfg.duration))
                .without_id_tracking(),
        ),
        0,
    )?;
    let mut plan_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0xd05);
    let probe_start = SECOND.min(cfg.duration);
    let times = stratified(&mut plan_rng, cfg.probes, probe_start, cfg.duration.saturating_sub(probe_start + SECOND));
    let mut probes = Vec::new();
    for (i, t) in times.into_iter().enumerate() {
        let p = Initiator::new(format!("probe-{i}"), jid.clone()).messages(0, 0);
        probes.push(sim.add_agent(Box::new(p), t)?);
    }
    let alice = sim.add_agent(
        Box::new(Initiator::new("alice", jid.clone()).messages(1, 0).retry(RetryPolicy::OnRestart)),
        cfg.duration / 2,
    )?;
    let restart_at = cfg.duration + cfg.restart_after;
    sim.schedule_restart(alice, restart_at)?;
    sim.run_until(restart_at + 5 * MINUTE)?;

    let failures = probes
        .iter()
        .filter(|&&p| sim.agent::<Initiator>(p).is_some_and(|a| a.record().fetch_failures > 0))
        .count() as u32;
    let delivered = sim
        .timeline()
        .of_kind("message_received")
        .find(|r| r.fields.get("from").and_then(|v| v.as_str()) == Some("alice"))
        .map(|r| r.t);
    let rec = sim.agent::<Initiator>(alice).expect("alice").record().clone();
    let att = sim.agent::<Depleter>(attacker).expect("attacker").report().clone();
    Ok(DosReport {
        rate: cfg.rate,
        duration_ms: cfg.duration,
        probes: cfg.probes,
        probe_failures: failures,
        victim_fetch_failure_rate: f64::from(failures) / f64::from(cfg.probes.max(1)),
        legit_session_established: rec.bundle_at.is_some(),
        message_delivered_at: delivered,
        restart_at,
        delivered_only_after_restart: delivered.is_some_and(|t| t >= restart_at) || (delivered.is_some() && rec.fetch_failures == 0),
        attacker_requests: att.requests,
        attacker_unavailable: att.unavailable,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExposureReport {
    pub signed_lifetime_ms: SimTime,
    pub sessions: u32,
    pub windows_ms: Vec<SimTime>,
    pub mean_window_ms: f64,
    /// Every session was oracle-decryptable exactly while its signed prekey
    /// secret was still held.
    pub oracle_consistent: bool,
}

/// How long a recorded no-OTPK session stays decryptable by a later device
/// compromise, for a given signed-prekey lifetime. The store is kept empty
/// (low-watermark notifications never reach the device) so every session is
/// exposed; the window ends when the device erases the signed prekey.
pub fn exposure_experiment(lifetime: SimTime, sessions: u32, seed: u64) -> Result<ExposureReport, SimError> {
    let mut server = ServerConfig::default();
    server.faults.notification_drop_probability = 1.0;
    let mut sim = Sim::new(SimConfig {
        seed,
        server,
        ..Default::default()
    });
    let mut profile = DeviceProfile::android();
    profile.signed_rotation_interval = Some(lifetime);
    let jid = sim.add_device(DeviceSpec::new(VICTIM_PHONE, profile))?;
    sim.add_agent(Box::new(Depleter::new(ATTACKER, jid.clone(), DepletionMode::Sync)), 0)?;
    let start = 10 * MINUTE;
    let span = 3 * lifetime;
    let mut plan_rng = ChaCha20Rng::seed_from_u64(seed ^ 0xe4905);
    let times = stratified(&mut plan_rng, sessions, start, span);
    let mut agents = Vec::new();
    for (i, t) in times.iter().enumerate() {
        agents.push(sim.add_agent(Box::new(Initiator::new(format!("contact-{i}"), jid.clone())), *t)?);
    }

    // Check the oracle mid-run: sessions whose signed prekey is still held
    // must decrypt, the others must not.
    let checkpoint = start + span + MINUTE;
    sim.run_until(checkpoint)?;
    let mut consistent = true;
    let device = sim.device(&jid).expect("victim");
    let held = device.held_signed_prekeys();
    for (i, &a) in agents.iter().enumerate() {
        let rec = sim.agent::<Initiator>(a).expect("contact").record().clone();
        let sent: Vec<_> = sim
            .channel_log()
            .envelopes_between(&format!("contact-{i}"), &jid.to_string())
            .cloned()
            .collect();
        let out = compromise_oracle(&sent, device.identity(), &held).expect("held keys are live");
        let still_held = rec.signed_prekey.is_some_and(|id| held.iter().any(|k| k.id() == id));
        if rec.bundle_had_one_time_prekey != Some(false) || out.iter().any(|o| o.is_decrypted()) != still_held {
            consistent = false;
        }
    }
    sim.run_until(checkpoint + 3 * lifetime)?;

    let mut erased_at = std::collections::HashMap::new();
    for r in sim.timeline().of_kind("signed_prekey_erased") {
        if let Some(id) = r.fields.get("id").and_then(|v| v.as_u64()) {
            erased_at.insert(id as u32, r.t);
        }
    }
    let mut windows = Vec::new();
    for &a in &agents {
        let rec = sim.agent::<Initiator>(a).expect("contact").record().clone();
        let (Some(id), Some(at)) = (rec.signed_prekey, rec.bundle_at) else {
            consistent = false;
            continue;
        };
        match erased_at.get(&id.0) {
            Some(&e) => windows.push(e.saturating_sub(at)),
            None => consistent = false,
        }
    }
    let mean = windows.iter().sum::<SimTime>() as f64 / windows.len().max(1) as f64;
    Ok(ExposureReport {
        signed_lifetime_ms: lifetime,
        sessions,
        windows_ms: windows,
        mean_window_ms: mean,
        oracle_consistent: consistent,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmptyFractionReport {
    pub model: PhoneModel,
    pub condition: DeviceCondition,
    pub rate_limit: Option<RateLimit>,
    pub horizon_ms: SimTime,
    pub empty_fraction: f64,
    pub attacker_bundles: u64,
    pub attacker_rate_limited: u64,
}

/// Fraction of time the victim's store is empty under continuous sync
/// depletion from one attacker account.
pub fn empty_fraction_experiment(
    model: PhoneModel,
    condition: DeviceCondition,
    rate_limit: Option<RateLimit>,
    horizon: SimTime,
    seed: u64,
) -> Result<EmptyFractionReport, SimError> {
    let mut server = ServerConfig::default();
    server.rate_limit = rate_limit;
    let mut sim = Sim::new(SimConfig {
        seed,
        server,
        ..Default::default()
    });
    let jid = sim.add_device(DeviceSpec::phone_model(VICTIM_PHONE, model).condition(condition))?;
    let a = sim.add_agent(
        Box::new(
            Depleter::new(ATTACKER, jid.clone(), DepletionMode::Sync)
                .continuous(Some(horizon))
                .without_id_tracking(),
        ),
        0,
    )?;
    sim.run_until(horizon)?;
    let report = sim.agent::<Depleter>(a).expect("attacker").report().clone();
    Ok(EmptyFractionReport {
        model,
        condition,
        rate_limit,
        horizon_ms: horizon,
        empty_fraction: sim.server().empty_time(&jid, horizon).unwrap_or(0) as f64 / horizon as f64,
        attacker_bundles: report.bundle_count,
        attacker_rate_limited: report.rate_limited,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OnDemandReport {
    pub min_validity_ms: SimTime,
    pub sessions: u32,
    pub sessions_established: u32,
    pub stale_bundle_errors: u32,
    pub other_errors: u32,
    pub on_demand_rotations: u32,
    pub sessions_without_otpk: u64,
}

/// Honest contacts open sessions against a phone under continuous
/// depletion while on-demand signed-prekey rotation is enabled.
pub fn on_demand_experiment(
    min_validity: SimTime,
    sessions: u32,
    horizon: SimTime,
    max_think_time: SimTime,
    seed: u64,
) -> Result<OnDemandReport, SimError> {
    let mut sim = Sim::new(SimConfig {
        seed,
        device_options: DeviceOptions {
            on_demand_min_validity: Some(min_validity),
            ..Default::default()
        },
        ..Default::default()
    });
    let jid = sim.add_device(DeviceSpec::phone_model(VICTIM_PHONE, PhoneModel::GalaxyA54))?;
    sim.add_agent(
        Box::new(
            Depleter::new(ATTACKER, jid.clone(), DepletionMode::Sync)
                .continuous(Some(horizon))
                .without_id_tracking(),
        ),
        0,
    )?;
    let mut plan_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x0d3a);
    let times = stratified(&mut plan_rng, sessions, MINUTE, horizon - 2 * MINUTE);
    let mut agents = Vec::new();
    for (i, t) in times.into_iter().enumerate() {
        let think = plan_rng.gen_range(0..=max_think_time);
        let a = Initiator::new(format!("contact-{i}"), jid.clone()).think_time(think);
        agents.push(sim.add_agent(Box::new(a), t)?);
    }
    sim.run_until(horizon + max_think_time + MINUTE)?;
    let failures = &sim.metrics().receive_failures;
    let stale = failures.iter().filter(|f| f.stale_bundle).count() as u32;
    let established = sim
        .timeline()
        .of_kind("message_received")
        .filter(|r| r.fields.get("new_session").and_then(|v| v.as_bool()) == Some(true))
        .count() as u32;
    let rotations = sim
        .timeline()
        .of_kind("signed_rotation")
        .filter(|r| r.fields.get("kind").and_then(|v| v.as_str()) == Some("on_demand"))
        .count() as u32;
    Ok(OnDemandReport {
        min_validity_ms: min_validity,
        sessions,
        sessions_established: established,
        stale_bundle_errors: stale,
        other_errors: failures.len() as u32 - stale,
        on_demand_rotations: rotations,
        sessions_without_otpk: sim.metrics().sessions_without_otpk,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub target_cycle_secs: f64,
    pub attack_rate: u32,
    pub horizon_ms: SimTime,
    pub refills: u64,
    pub mean_cycle_secs: f64,
    pub bytes_per_hour: f64,
    pub megabytes_per_hour: f64,
    pub battery_percent_per_hour: f64,
}

/// Drives a Galaxy A54 on standby/4G through depletion cycles of about
/// `cycle_secs` and converts the refill events into data and battery cost.
pub fn cost_experiment(cycle_secs: f64, horizon: SimTime, seed: u64) -> Result<CostReport, SimError> {
    let model = PhoneModel::GalaxyA54;
    let condition = DeviceCondition::new(PowerState::Standby, Link::Cellular);
    let mean_delay = model.latency_model().get(condition).map_or(0.0, |d| d.mean_secs());
    let rate = (f64::from(REFILL_BATCH - 10) / (cycle_secs - mean_delay).max(1.0)).round() as u32;
    let mut sim = Sim::new(SimConfig::seeded(seed));
    let jid = sim.add_device(DeviceSpec::phone_model(VICTIM_PHONE, model).condition(condition))?;
    sim.add_agent(
        Box::new(
            Depleter::new(ATTACKER, jid.clone(), DepletionMode::Async { rate })
                .continuous(Some(horizon))
                .without_id_tracking(),
        ),
        0,
    )?;
    sim.run_until(horizon)?;
    let counters = sim.device(&jid).expect("victim").counters();
    let hours = as_secs_f64(horizon) / 3600.0;
    let refills = counters.refill_events;
    let bytes_per_hour = (refills * REFILL_UPLOAD_BYTES) as f64 / hours;
    Ok(CostReport {
        target_cycle_secs: cycle_secs,
        attack_rate: rate,
        horizon_ms: horizon,
        refills,
        mean_cycle_secs: as_secs_f64(horizon) / refills.max(1) as f64,
        bytes_per_hour,
        megabytes_per_hour: bytes_per_hour / 1e6,
        battery_percent_per_hour: refills as f64 * BATTERY_PERCENT_PER_REFILL / hours,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FingerprintCountermeasures {
    pub hash_key_ids: bool,
    pub uniform_initial_batch: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FingerprintTrial {
    pub truth: OsKind,
    pub prior_refills: u32,
    pub verdict: FingerprintVerdict,
}

impl FingerprintTrial {
    pub fn correct(&self) -> bool {
        self.verdict.os_guess == Some(self.truth)
    }
}

/// Instantiates one device of `os` with a random number of prior refills
/// and fingerprints it from a fresh attacker account.
pub fn fingerprint_trial(
    os: OsKind,
    seed: u64,
    countermeasures: FingerprintCountermeasures,
) -> Result<FingerprintTrial, SimError> {
    let mut sim = Sim::new(SimConfig {
        seed,
        device_options: DeviceOptions {
            hash_key_ids: countermeasures.hash_key_ids,
            uniform_initial_batch: countermeasures.uniform_initial_batch.then_some(REFILL_BATCH),
            ..Default::default()
        },
        ..Default::default()
    });
    let prior_refills = sim.rng().gen_range(0..=2);
    let jid = if os.is_companion() {
        sim.add_device(DeviceSpec::new(VICTIM_PHONE, DeviceProfile::android()))?;
        sim.add_device(DeviceSpec::new(VICTIM_PHONE, DeviceProfile::for_os(os)))?
    } else {
        sim.add_device(DeviceSpec::new(VICTIM_PHONE, DeviceProfile::for_os(os)))?
    };
    for _ in 0..prior_refills {
        sim.force_refill(&jid)?;
    }
    let f = sim.add_agent(Box::new(Fingerprinter::new(ATTACKER, jid, true)), SECOND)?;
    sim.run_until(10 * MINUTE)?;
    let verdict = sim
        .agent::<Fingerprinter>(f)
        .and_then(|a| a.verdict().cloned())
        .expect("fingerprint finishes within the horizon");
    Ok(FingerprintTrial {
        truth: os,
        prior_refills,
        verdict,
    })
}

/// The account from the device-query listing: main phone, a web session,
/// an unlinked laptop and a Windows desktop that has refilled three times
/// and is now switched off.
pub struct FixtureWorld {
    pub sim: Sim,
    pub phone: String,
    pub windows: Jid,
}

pub const FIXTURE_PHONE: &str = "123456789";

pub fn fixture_world(seed: u64) -> Result<FixtureWorld, SimError> {
    let mut sim = Sim::new(SimConfig::seeded(seed));
    sim.add_device(DeviceSpec::new(FIXTURE_PHONE, DeviceProfile::android()))?;
    sim.add_device(DeviceSpec::new(FIXTURE_PHONE, DeviceProfile::web()))?;
    let laptop = sim.add_device(DeviceSpec::new(FIXTURE_PHONE, DeviceProfile::desktop_mac()))?;
    sim.unlink_device(&laptop)?;
    let windows = sim.add_device(
        DeviceSpec::new(FIXTURE_PHONE, DeviceProfile::desktop_windows())
            .role(DeviceRole::Companion)
            .condition(DeviceCondition::new(PowerState::Offline, Link::Wifi)),
    )?;
    for _ in 0..3 {
        sim.force_refill(&windows)?;
    }
    Ok(FixtureWorld {
        sim,
        phone: FIXTURE_PHONE.to_string(),
        windows,
    })
}

/// One depletion run against `target` inside `sim`, returning its report.
pub fn run_depletion(
    sim: &mut Sim,
    target: &Jid,
    mode: DepletionMode,
    limit: SimTime,
) -> Result<DepletionReport, SimError> {
    let start = sim.now();
    let name = format!("{ATTACKER}-{start}");
    let a = sim.add_agent(Box::new(Depleter::new(name, target.clone(), mode).until(start + limit)), start)?;
    sim.run_until(start + limit + MINUTE)?;
    Ok(sim.agent::<Depleter>(a).expect("depleter").report().clone())
}

/// Sync depletion of an offline phone at several background loads.
pub fn load_sweep(loads: &[f64], seed: u64) -> Result<Vec<(f64, DepletionReport)>, SimError> {
    let mut out = Vec::new();
    for &load in loads {
        let mut sim = Sim::new(SimConfig {
            seed,
            network: NetworkModel::with_load(load),
            ..Default::default()
        });
        let jid = sim.add_device(
            DeviceSpec::new(VICTIM_PHONE, DeviceProfile::android())
                .condition(DeviceCondition::new(PowerState::Offline, Link::Wifi)),
        )?;
        out.push((load, run_depletion(&mut sim, &jid, DepletionMode::Sync, 10 * MINUTE)?));
    }
    Ok(out)
}

/// Default sweep points for the background load factor.
pub const LOAD_SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub const DEFAULT_EXPOSURE_LIFETIMES: [SimTime; 2] = [2 * DAY, 30 * DAY];
pub const DEFAULT_RATE_LIMIT: RateLimit = RateLimit {
    bundles_per_window: 1,
    window_ms: MINUTE,
};
pub const DEFAULT_EMPTY_FRACTION_HORIZON: SimTime = 6 * HOUR;
