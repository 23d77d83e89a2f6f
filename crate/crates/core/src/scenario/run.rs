use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::json;

use super::config::{parse_target, AttackOp, ScenarioConfig, ScenarioError};
use crate::attack::experiments::{pfs_experiment, table2, PfsCell, PfsExperimentConfig};
use crate::attack::{
    DepletionReport, Depleter, FingerprintVerdict, Fingerprinter, Monitor, MonitorConfig, OnlineTimeline,
};
use crate::device::{DeviceOptions, OsKind};
use crate::server::{Jid, ServerConfig};
use crate::simnet::{Agent, AgentId, Ctx, DeviceSpec, Initiator, Sim, SimConfig};
use crate::time::{SimTime, MINUTE};

/// Asks the server which device ids a phone number has.
struct DeviceQuery {
    name: String,
    phone: String,
    result: Option<Vec<u32>>,
}

impl Agent for DeviceQuery {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        let ids = ctx.query_devices(&self.phone);
        ctx.log("devices_found", json!({ "phone": self.phone, "devices": ids }));
        self.result = Some(ids);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum AttackOutcome {
    QueryDevices {
        phone: String,
        devices: Vec<u32>,
    },
    Deplete(DepletionReport),
    Fingerprint {
        truth: Option<OsKind>,
        correct: bool,
        verdict: Option<FingerprintVerdict>,
    },
    Monitor(OnlineTimeline),
    Dos {
        depletion: DepletionReport,
        window_start: SimTime,
        window_end: SimTime,
        contact_fetches: u64,
        contact_fetch_failures: u64,
    },
    PfsExperiment(PfsCell),
    Table2 {
        cells: Vec<PfsCell>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackEntry {
    pub index: usize,
    pub outcome: AttackOutcome,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ContactSummary {
    pub sessions: u32,
    pub established: u32,
    pub without_one_time_prekey: u32,
    pub fetch_failures: u64,
    /// Share of established sessions that the depletion stripped of a one-time prekey.
    pub depletion_success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceReport {
    pub jid: String,
    pub os: OsKind,
    pub refill_events: u64,
    pub uploads: u64,
    pub rejected_uploads: u64,
    pub bytes: u64,
    pub keys_generated: u64,
    pub signed_rotations: u64,
    pub battery_percent: f64,
    pub empty_ms: SimTime,
    pub empty_fraction: f64,
}

impl DeviceReport {
    pub const CSV_HEADER: &'static str = "jid,os,refill_events,uploads,rejected_uploads,bytes,keys_generated,signed_rotations,battery_percent,empty_ms,empty_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.4},{},{:.6}",
            self.jid,
            self.os,
            self.refill_events,
            self.uploads,
            self.rejected_uploads,
            self.bytes,
            self.keys_generated,
            self.signed_rotations,
            self.battery_percent,
            self.empty_ms,
            self.empty_fraction
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub events: u64,
    pub fetches: u64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub sessions_without_otpk: u64,
    pub receive_failures: u64,
    pub stale_bundle_errors: u64,
}

/// A session established without a one-time prekey, surfaced to the user
/// when the corresponding countermeasure is on.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PfsNotice {
    pub t: SimTime,
    pub device: String,
    pub peer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricDelta {
    pub metric: String,
    pub baseline: f64,
    pub value: f64,
    pub delta: f64,
}

impl MetricDelta {
    pub const CSV_HEADER: &'static str = "metric,baseline,with_countermeasures,delta";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.metric, self.baseline, self.value, self.delta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub name: Option<String>,
    pub seed: u64,
    pub horizon_ms: SimTime,
    pub countermeasures: Vec<String>,
    pub attacks: Vec<AttackEntry>,
    pub contacts: ContactSummary,
    pub devices: Vec<DeviceReport>,
    pub metrics: MetricsSummary,
    pub pfs_notifications: Vec<PfsNotice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Box<RunReport>>,
    pub deltas: Vec<MetricDelta>,
}

/// A finished run: the report plus the simulation it came from, for the
/// timeline and channel log.
pub struct RunOutput {
    pub report: RunReport,
    pub sim: Sim,
}

enum Pending {
    Query(AgentId),
    Deplete(AgentId),
    Fingerprint(AgentId, Jid),
    Monitor(AgentId),
    Dos(AgentId, SimTime, SimTime),
    Done(AttackOutcome),
}

fn sim_config(cfg: &ScenarioConfig) -> SimConfig {
    let cm = &cfg.countermeasures;
    let mut server: ServerConfig = cfg.server.clone();
    if let Some(r) = cm.rate_limit {
        server.rate_limit = Some(r.into());
    }
    server.hash_key_ids |= cm.hash_key_ids;
    SimConfig {
        seed: cfg.seed,
        network: cfg.network.clone(),
        server,
        device_options: DeviceOptions {
            hash_key_ids: cm.hash_key_ids,
            uniform_initial_batch: cm.uniform_initial_batch,
            on_demand_min_validity: cm.on_demand_rotation.map(|o| o.min_validity),
        },
        pfs_ui_notification: cm.pfs_ui_notification,
        ..Default::default()
    }
}

fn target(s: &str) -> Jid {
    parse_target(s).expect("validated")
}

/// Runs a validated scenario. With countermeasures enabled and
/// `compare_baseline` set, the scenario also runs without them and the
/// report carries the differences.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    cfg.validate()?;
    let mut out = run_once(cfg)?;
    if cfg.compare_baseline && cfg.countermeasures.any() {
        let base = run_once(&cfg.baseline())?.report;
        out.report.deltas = deltas(&base, &out.report);
        out.report.baseline = Some(Box::new(base));
    }
    Ok(out)
}

fn run_once(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    let sim_cfg = sim_config(cfg);
    let mut sim = Sim::new(sim_cfg.clone());
    let mut jids = Vec::new();
    for d in &cfg.devices {
        let mut profile = d.profile.resolve();
        if let Some(l) = cfg.countermeasures.signed_lifetime {
            profile.signed_rotation_interval = Some(l);
        }
        if let Some(m) = d.model {
            profile.latency = m.latency_model();
        }
        let mut spec = DeviceSpec::new(d.phone.clone(), profile).condition(d.state);
        spec.model = d.model;
        if let Some(s) = d.daily_schedule().expect("validated") {
            spec = spec.schedule(s);
        }
        if let Some(r) = d.reply_after {
            spec = spec.reply_after(r);
        }
        let jid = sim.add_device(spec)?;
        for _ in 0..d.prior_refills {
            sim.force_refill(&jid)?;
        }
        if d.unlinked {
            sim.unlink_device(&jid)?;
        }
        jids.push(jid);
    }

    let mut plan_rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5ce7_a210);
    let mut contacts = Vec::new();
    for (c, group) in cfg.contacts.iter().enumerate() {
        let jid = target(&group.target);
        let span = group
            .span
            .unwrap_or_else(|| cfg.horizon.saturating_sub(group.start + MINUTE))
            .max(1);
        for i in 0..group.count {
            let u: f64 = plan_rng.gen();
            let at = group.start + ((f64::from(i) + u) * span as f64 / f64::from(group.count)) as SimTime;
            let think = plan_rng.gen_range(0..=group.max_think_time);
            let a = Initiator::new(format!("contact-{c}-{i}"), jid.clone())
                .messages(group.pre_reply, group.post_reply)
                .think_time(think);
            contacts.push(sim.add_agent(Box::new(a), at)?);
        }
    }

    let mut pending = Vec::new();
    for (i, op) in cfg.attacks.iter().enumerate() {
        let name = format!("attacker-{i}");
        let p = match op {
            AttackOp::QueryDevices { phone, at } => Pending::Query(sim.add_agent(
                Box::new(DeviceQuery {
                    name,
                    phone: phone.clone(),
                    result: None,
                }),
                *at,
            )?),
            AttackOp::Deplete {
                target: t,
                mode,
                rate,
                at,
                continuous,
                until,
            } => {
                let mode = AttackOp::depletion_mode(*mode, *rate).expect("validated");
                let mut d = Depleter::new(name, target(t), mode);
                if *continuous {
                    d = d.continuous(Some(until.unwrap_or(cfg.horizon))).without_id_tracking();
                } else if let Some(u) = until {
                    d = d.until(*u);
                }
                Pending::Deplete(sim.add_agent(Box::new(d), *at)?)
            }
            AttackOp::Fingerprint {
                target: t,
                at,
                allow_depletion,
            } => {
                let jid = target(t);
                Pending::Fingerprint(
                    sim.add_agent(Box::new(Fingerprinter::new(name, jid.clone(), *allow_depletion)), *at)?,
                    jid,
                )
            }
            AttackOp::Monitor {
                target: t,
                at,
                poll_interval,
            } => {
                let mut mc = MonitorConfig {
                    epoch_offset_secs: sim_cfg.server.epoch_offset_secs,
                    ..Default::default()
                };
                if let Some(p) = poll_interval {
                    mc.poll_interval = *p;
                }
                Pending::Monitor(sim.add_agent(Box::new(Monitor::new(name, target(t), mc)), *at)?)
            }
            AttackOp::Dos {
                target: t,
                rate,
                at,
                duration,
            } => {
                let d = Depleter::new(name, target(t), crate::attack::DepletionMode::Async { rate: *rate })
                    .continuous(Some(at + duration))
                    .without_id_tracking();
                Pending::Dos(sim.add_agent(Box::new(d), *at)?, *at, at + duration)
            }
            AttackOp::PfsExperiment {
                model,
                state,
                trials,
                cycles,
            } => {
                let cell = pfs_experiment(&experiment_config(cfg, &sim_cfg, i, *trials, *cycles, *model, *state))?;
                Pending::Done(AttackOutcome::PfsExperiment(cell))
            }
            AttackOp::Table2 { trials, cycles } => {
                let base = experiment_config(
                    cfg,
                    &sim_cfg,
                    i,
                    *trials,
                    *cycles,
                    PfsExperimentConfig::default().model,
                    PfsExperimentConfig::default().condition,
                );
                Pending::Done(AttackOutcome::Table2 { cells: table2(&base)? })
            }
        };
        pending.push(p);
    }

    sim.run_until(cfg.horizon)?;
    let now = sim.now();

    let attacks = pending
        .into_iter()
        .enumerate()
        .map(|(index, p)| {
            let outcome = match p {
                Pending::Query(a) => {
                    let q = sim.agent::<DeviceQuery>(a).expect("query agent");
                    AttackOutcome::QueryDevices {
                        phone: q.phone.clone(),
                        devices: q.result.clone().unwrap_or_default(),
                    }
                }
                Pending::Deplete(a) => AttackOutcome::Deplete(finish_report(&sim, a)),
                Pending::Fingerprint(a, jid) => {
                    let truth = sim.device(&jid).map(|d| d.profile().os);
                    let verdict = sim.agent::<Fingerprinter>(a).and_then(|f| f.verdict().cloned());
                    AttackOutcome::Fingerprint {
                        truth,
                        correct: truth.is_some() && verdict.as_ref().and_then(|v| v.os_guess) == truth,
                        verdict,
                    }
                }
                Pending::Monitor(a) => {
                    AttackOutcome::Monitor(sim.agent::<Monitor>(a).expect("monitor").timeline().clone())
                }
                Pending::Dos(a, start, end) => {
                    let in_window = |r: &&crate::simnet::TimelineRecord| {
                        r.actor.starts_with("contact-") && (start..end).contains(&r.t)
                    };
                    let failures = sim.timeline().of_kind("fetch_failed").filter(in_window).count() as u64;
                    let ok = sim.timeline().of_kind("session_initiated").filter(in_window).count() as u64;
                    AttackOutcome::Dos {
                        depletion: finish_report(&sim, a),
                        window_start: start,
                        window_end: end,
                        contact_fetches: failures + ok,
                        contact_fetch_failures: failures,
                    }
                }
                Pending::Done(o) => o,
            };
            AttackEntry { index, outcome }
        })
        .collect();

    let mut summary = ContactSummary {
        sessions: contacts.len() as u32,
        ..Default::default()
    };
    for &a in &contacts {
        let rec = sim.agent::<Initiator>(a).expect("contact").record();
        summary.fetch_failures += u64::from(rec.fetch_failures);
        match rec.bundle_had_one_time_prekey {
            Some(true) => summary.established += 1,
            Some(false) => {
                summary.established += 1;
                summary.without_one_time_prekey += 1;
            }
            None => {}
        }
    }
    summary.depletion_success_rate = if summary.established == 0 {
        0.0
    } else {
        f64::from(summary.without_one_time_prekey) / f64::from(summary.established)
    };

    let devices = jids
        .iter()
        .filter_map(|jid| {
            let d = sim.device(jid)?;
            let c = d.counters();
            let empty = sim.server().empty_time(jid, now).unwrap_or(0);
            Some(DeviceReport {
                jid: jid.to_string(),
                os: d.profile().os,
                refill_events: c.refill_events,
                uploads: c.uploads,
                rejected_uploads: c.rejected_uploads,
                bytes: c.bytes,
                keys_generated: c.keys_generated,
                signed_rotations: c.signed_rotations,
                battery_percent: c.battery_percent(),
                empty_ms: empty,
                empty_fraction: empty as f64 / now.max(1) as f64,
            })
        })
        .collect();

    let m = sim.metrics();
    let metrics = MetricsSummary {
        events: m.events,
        fetches: m.fetches,
        messages_sent: m.messages_sent,
        messages_delivered: m.messages_delivered,
        sessions_without_otpk: m.sessions_without_otpk,
        receive_failures: m.receive_failures.len() as u64,
        stale_bundle_errors: m.receive_failures.iter().filter(|f| f.stale_bundle).count() as u64,
    };
    let pfs_notifications = sim
        .timeline()
        .of_kind("pfs_notification")
        .map(|r| PfsNotice {
            t: r.t,
            device: r.actor.clone(),
            peer: r.fields.get("peer").and_then(|v| v.as_str()).unwrap_or_default().to_string(),
        })
        .collect();

    let report = RunReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        horizon_ms: cfg.horizon,
        countermeasures: cfg.countermeasures.enabled().into_iter().map(String::from).collect(),
        attacks,
        contacts: summary,
        devices,
        metrics,
        pfs_notifications,
        baseline: None,
        deltas: Vec::new(),
    };
    Ok(RunOutput { report, sim })
}

fn finish_report(sim: &Sim, a: AgentId) -> DepletionReport {
    sim.agent::<Depleter>(a).expect("depleter").report().clone()
}

fn experiment_config(
    cfg: &ScenarioConfig,
    sim_cfg: &SimConfig,
    index: usize,
    trials: u32,
    cycles: u32,
    model: crate::device::PhoneModel,
    condition: crate::device::DeviceCondition,
) -> PfsExperimentConfig {
    PfsExperimentConfig {
        model,
        condition,
        trials,
        cycles,
        network: sim_cfg.network.clone(),
        server: sim_cfg.server.clone(),
        device_options: sim_cfg.device_options.clone(),
        seed: cfg.seed.wrapping_add(index as u64 * 1000),
        ..Default::default()
    }
}

/// Numeric metrics that both runs share, paired up.
fn metric_points(r: &RunReport) -> Vec<(String, f64)> {
    let mut v = vec![
        ("contacts.established".to_string(), f64::from(r.contacts.established)),
        ("contacts.without_one_time_prekey".to_string(), f64::from(r.contacts.without_one_time_prekey)),
        ("contacts.depletion_success_rate".to_string(), r.contacts.depletion_success_rate),
        ("contacts.fetch_failures".to_string(), r.contacts.fetch_failures as f64),
        ("sessions_without_otpk".to_string(), r.metrics.sessions_without_otpk as f64),
        ("receive_failures".to_string(), r.metrics.receive_failures as f64),
        ("stale_bundle_errors".to_string(), r.metrics.stale_bundle_errors as f64),
        ("pfs_notifications".to_string(), r.pfs_notifications.len() as f64),
    ];
    for d in &r.devices {
        v.push((format!("{}.empty_fraction", d.jid), d.empty_fraction));
        v.push((format!("{}.refill_events", d.jid), d.refill_events as f64));
        v.push((format!("{}.bytes", d.jid), d.bytes as f64));
        v.push((format!("{}.signed_rotations", d.jid), d.signed_rotations as f64));
    }
    for a in &r.attacks {
        let key = format!("attacks[{}]", a.index);
        match &a.outcome {
            AttackOutcome::Deplete(d) => {
                v.push((format!("{key}.bundle_count"), d.bundle_count as f64));
                v.push((format!("{key}.rate_limited"), d.rate_limited as f64));
                v.push((format!("{key}.duration_s"), crate::time::as_secs_f64(d.duration_ms)));
            }
            AttackOutcome::Fingerprint { correct, .. } => {
                v.push((format!("{key}.correct"), f64::from(u8::from(*correct))));
            }
            AttackOutcome::Dos {
                contact_fetch_failures, ..
            } => v.push((format!("{key}.contact_fetch_failures"), *contact_fetch_failures as f64)),
            AttackOutcome::PfsExperiment(c) => v.push((format!("{key}.success_rate"), c.success_rate)),
            AttackOutcome::Table2 { cells } => {
                for c in cells {
                    v.push((format!("{key}.{}.{}.success_rate", c.model, c.condition), c.success_rate));
                }
            }
            AttackOutcome::Monitor(t) => {
                v.push((format!("{key}.observations"), t.observations.len() as f64));
            }
            AttackOutcome::QueryDevices { devices, .. } => {
                v.push((format!("{key}.devices"), devices.len() as f64));
            }
        }
    }
    v
}

fn deltas(base: &RunReport, with: &RunReport) -> Vec<MetricDelta> {
    let base_points = metric_points(base);
    metric_points(with)
        .into_iter()
        .filter_map(|(metric, value)| {
            let (_, b) = base_points.iter().find(|(m, _)| *m == metric)?;
            Some(MetricDelta {
                metric,
                baseline: *b,
                value,
                delta: value - b,
            })
        })
        .collect()
}

impl RunReport {
    /// CSV tables keyed by file name; tables without rows are omitted.
    pub fn csv_tables(&self) -> Vec<(String, String)> {
        let mut depletions = Vec::new();
        let mut fingerprints = Vec::new();
        let mut monitor = Vec::new();
        let mut dos = Vec::new();
        let mut cells = Vec::new();
        let mut queries = Vec::new();
        for a in &self.attacks {
            match &a.outcome {
                AttackOutcome::Deplete(d) => depletions.push(format!("{},{}", a.index, d.csv_row())),
                AttackOutcome::Fingerprint { truth, correct, verdict } => {
                    if let Some(v) = verdict {
                        fingerprints.push(format!(
                            "{},{},{},{}",
                            a.index,
                            truth.map(|t| t.to_string()).unwrap_or_default(),
                            correct,
                            v.csv_row()
                        ));
                    }
                }
                AttackOutcome::Monitor(t) => {
                    monitor.extend(t.csv_rows().into_iter().map(|r| format!("{},{r}", a.index)))
                }
                AttackOutcome::Dos {
                    depletion,
                    window_start,
                    window_end,
                    contact_fetches,
                    contact_fetch_failures,
                } => dos.push(format!(
                    "{},{},{},{},{},{}",
                    a.index,
                    window_start,
                    window_end,
                    contact_fetches,
                    contact_fetch_failures,
                    depletion.csv_row()
                )),
                AttackOutcome::PfsExperiment(c) => cells.push(c.csv_row()),
                AttackOutcome::Table2 { cells: cs } => cells.extend(cs.iter().map(PfsCell::csv_row)),
                AttackOutcome::QueryDevices { phone, devices } => queries.push(format!(
                    "{},{phone},{}",
                    a.index,
                    devices.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
                )),
            }
        }
        let mut tables = Vec::new();
        let mut add = |name: &str, header: String, rows: Vec<String>| {
            if !rows.is_empty() {
                let mut s = header;
                s.push('\n');
                for r in rows {
                    s.push_str(&r);
                    s.push('\n');
                }
                tables.push((name.to_string(), s));
            }
        };
        add("depletions.csv", format!("attack,{}", DepletionReport::CSV_HEADER), depletions);
        add(
            "fingerprints.csv",
            format!("attack,truth,correct,{}", FingerprintVerdict::CSV_HEADER),
            fingerprints,
        );
        add("monitor.csv", format!("attack,{}", OnlineTimeline::CSV_HEADER), monitor);
        add(
            "dos.csv",
            format!(
                "attack,window_start_ms,window_end_ms,contact_fetches,contact_fetch_failures,{}",
                DepletionReport::CSV_HEADER
            ),
            dos,
        );
        add("pfs_cells.csv", PfsCell::CSV_HEADER.to_string(), cells);
        add("query_devices.csv", "attack,phone,devices".to_string(), queries);
        add(
            "devices.csv",
            DeviceReport::CSV_HEADER.to_string(),
            self.devices.iter().map(DeviceReport::csv_row).collect(),
        );
        add(
            "contacts.csv",
            "sessions,established,without_one_time_prekey,fetch_failures,depletion_success_rate".to_string(),
            vec![format!(
                "{},{},{},{},{:.6}",
                self.contacts.sessions,
                self.contacts.established,
                self.contacts.without_one_time_prekey,
                self.contacts.fetch_failures,
                self.contacts.depletion_success_rate
            )],
        );
        add(
            "pfs_notifications.csv",
            "t_ms,device,peer".to_string(),
            self.pfs_notifications
                .iter()
                .map(|n| format!("{},{},{}", n.t, n.device, n.peer))
                .collect(),
        );
        add(
            "deltas.csv",
            MetricDelta::CSV_HEADER.to_string(),
            self.deltas.iter().map(MetricDelta::csv_row).collect(),
        );
        tables
    }
}
