use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::log::{ChannelEntry, ChannelLog, ChannelPayload, Timeline, TimelineConfig};
use super::network::NetworkModel;
use super::schedule::DailySchedule;
use crate::crypto::{CryptoError, Envelope};
use crate::device::{
    Device, DeviceCondition, DeviceError, DeviceOptions, DeviceProfile, Link, PhoneModel, PowerState, RotationKind,
};
use crate::server::{DeviceRole, Jid, PrekeyBundle, PrekeyServer, ServerConfig, ServerError};
use crate::time::SimTime;

pub type AgentId = usize;
pub type RequestId = u64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} ms but the clock is already at {now} ms")]
    ScheduleInPast { at: SimTime, now: SimTime },
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("duplicate agent name {0}")]
    DuplicateAgent(String),
    #[error(transparent)]
    Server(#[from] ServerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub network: NetworkModel,
    pub server: ServerConfig,
    pub timeline: TimelineConfig,
    pub device_options: DeviceOptions,
    /// Surface sessions opened without a one-time prekey as timeline events.
    pub pfs_ui_notification: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkModel::default(),
            server: ServerConfig::default(),
            timeline: TimelineConfig::default(),
            device_options: DeviceOptions::default(),
            pfs_ui_notification: false,
        }
    }
}

impl SimConfig {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeviceSpec {
    pub phone: String,
    pub role: DeviceRole,
    pub profile: DeviceProfile,
    pub model: Option<PhoneModel>,
    pub condition: DeviceCondition,
    pub schedule: Option<DailySchedule>,
    /// Reply to each new conversation after this delay while online.
    pub reply_after: Option<SimTime>,
}

impl DeviceSpec {
    pub fn new(phone: impl Into<String>, profile: DeviceProfile) -> Self {
        Self {
            phone: phone.into(),
            role: if profile.os.is_companion() {
                DeviceRole::Companion
            } else {
                DeviceRole::Main
            },
            profile,
            model: None,
            condition: DeviceCondition::new(PowerState::Standby, Link::Wifi),
            schedule: None,
            reply_after: None,
        }
    }

    /// A main device of a measured phone model, with that model's latency.
    pub fn phone_model(phone: impl Into<String>, model: PhoneModel) -> Self {
        let mut profile = if model.is_iphone() {
            DeviceProfile::iphone()
        } else {
            DeviceProfile::android()
        };
        profile.latency = model.latency_model();
        let mut spec = Self::new(phone, profile);
        spec.model = Some(model);
        spec
    }

    pub fn condition(mut self, condition: DeviceCondition) -> Self {
        self.condition = condition;
        self
    }

    pub fn schedule(mut self, schedule: DailySchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn reply_after(mut self, delay: SimTime) -> Self {
        self.reply_after = Some(delay);
        self
    }

    pub fn role(mut self, role: DeviceRole) -> Self {
        self.role = role;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReceiveFailure {
    pub time: SimTime,
    pub device: String,
    pub peer: String,
    pub error: String,
    pub stale_bundle: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SimMetrics {
    pub events: u64,
    pub fetches: u64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub sessions_without_otpk: u64,
    pub pfs_notifications: u64,
    pub receive_failures: Vec<ReceiveFailure>,
}

pub trait AsAny: Any {
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
    fn into_any(self: Box<Self>) -> Box<dyn Any>;
}

impl<T: Any> AsAny for T {
    fn as_any(&self) -> &dyn Any {
        self
    }
    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
    fn into_any(self: Box<Self>) -> Box<dyn Any> {
        self
    }
}

/// A client that talks to the server (and, through it, to devices).
/// Agents never address a device directly: fetches go to the server and
/// messages are relayed by it.
pub trait Agent: AsAny {
    /// Account name used as the requester identity.
    fn name(&self) -> &str;
    fn on_start(&mut self, ctx: &mut Ctx<'_>);
    fn on_fetch(
        &mut self,
        _ctx: &mut Ctx<'_>,
        _request: RequestId,
        _target: &Jid,
        _result: Result<PrekeyBundle, ServerError>,
    ) {
    }
    fn on_timer(&mut self, _ctx: &mut Ctx<'_>, _token: u64) {}
    fn on_message(&mut self, _ctx: &mut Ctx<'_>, _from: &Jid, _envelope: Envelope) {}
    /// The user closed and reopened the application.
    fn on_restart(&mut self, _ctx: &mut Ctx<'_>) {}
}

enum Command {
    Fetch { request: RequestId, target: Jid },
    Send { to: Jid, envelope: Envelope },
    Timer { at: SimTime, token: u64 },
}

pub struct Ctx<'a> {
    now: SimTime,
    agent: AgentId,
    rng: &'a mut ChaCha20Rng,
    server: &'a PrekeyServer,
    timeline: &'a mut Timeline,
    actor: &'a str,
    commands: &'a mut Vec<Command>,
    next_request: &'a mut RequestId,
    halt: &'a mut bool,
    error: &'a mut Option<SimError>,
}

impl Ctx<'_> {
    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn id(&self) -> AgentId {
        self.agent
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        self.rng
    }

    pub fn server_config(&self) -> &ServerConfig {
        self.server.config()
    }

    pub fn query_devices(&mut self, phone: &str) -> Vec<u32> {
        let ids = self.server.query_devices(self.actor, phone);
        self.timeline
            .push(self.now, self.actor, "query_devices", json!({ "phone": phone, "devices": ids }));
        ids
    }

    pub fn fetch(&mut self, target: &Jid) -> RequestId {
        let request = *self.next_request;
        *self.next_request += 1;
        self.commands.push(Command::Fetch {
            request,
            target: target.clone(),
        });
        request
    }

    pub fn send(&mut self, to: &Jid, envelope: Envelope) {
        self.commands.push(Command::Send {
            to: to.clone(),
            envelope,
        });
    }

    pub fn timer(&mut self, delay: SimTime, token: u64) {
        self.commands.push(Command::Timer {
            at: self.now + delay,
            token,
        });
    }

    pub fn timer_at(&mut self, at: SimTime, token: u64) {
        if at < self.now {
            *self.error = Some(SimError::ScheduleInPast { at, now: self.now });
            return;
        }
        self.commands.push(Command::Timer { at, token });
    }

    pub fn log(&mut self, kind: &str, fields: serde_json::Value) {
        self.timeline.push(self.now, self.actor, kind, fields);
    }

    /// Stops the whole simulation after this callback.
    pub fn halt(&mut self) {
        *self.halt = true;
    }
}

enum EventKind {
    AgentStart(AgentId),
    AgentTimer(AgentId, u64),
    AgentRestart(AgentId),
    FetchServe {
        agent: AgentId,
        request: RequestId,
        target: Jid,
        response_delay: SimTime,
    },
    FetchResponse {
        agent: AgentId,
        request: RequestId,
        target: Jid,
        result: Result<PrekeyBundle, ServerError>,
    },
    DeliverToDevice(usize, AgentId, Envelope),
    DeliverToAgent(AgentId, usize, Envelope),
    RefillArrive(usize, u64),
    PeriodicRotation(usize),
    EraseSigned(usize),
    Condition(usize, DeviceCondition),
    ScheduleTick(usize),
    DeviceReply(usize, AgentId),
}

struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct DeviceActor {
    device: Device,
    jid: Jid,
    name: String,
    schedule: Option<DailySchedule>,
    reply_after: Option<SimTime>,
    inbox: VecDeque<(AgentId, Envelope)>,
    reply_scheduled: BTreeSet<AgentId>,
    pending_replies: BTreeSet<AgentId>,
    rotation_overdue: bool,
    refill_generation: u64,
    removed: bool,
}

struct AgentSlot {
    name: String,
    agent: Option<Box<dyn Agent>>,
}

/// The discrete-event engine. All randomness comes from one seeded
/// generator, events run in (time, insertion order), and nothing reads the
/// wall clock, so a (configuration, seed) pair always replays identically.
pub struct Sim {
    config: SimConfig,
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Event>,
    rng: ChaCha20Rng,
    server: PrekeyServer,
    devices: Vec<DeviceActor>,
    device_index: HashMap<Jid, usize>,
    agents: Vec<AgentSlot>,
    agent_index: HashMap<String, AgentId>,
    channel: ChannelLog,
    timeline: Timeline,
    metrics: SimMetrics,
    next_request: RequestId,
    halted: bool,
}

impl Sim {
    pub fn new(config: SimConfig) -> Self {
        let mut server_config = config.server.clone();
        server_config.hash_key_ids |= config.device_options.hash_key_ids;
        Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            server: PrekeyServer::new(server_config),
            devices: Vec::new(),
            device_index: HashMap::new(),
            agents: Vec::new(),
            agent_index: HashMap::new(),
            channel: ChannelLog::default(),
            timeline: Timeline::new(config.timeline),
            metrics: SimMetrics::default(),
            next_request: 0,
            halted: false,
            config,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn server(&self) -> &PrekeyServer {
        &self.server
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn channel_log(&self) -> &ChannelLog {
        &self.channel
    }

    pub fn timeline(&self) -> &Timeline {
        &self.timeline
    }

    pub fn metrics(&self) -> &SimMetrics {
        &self.metrics
    }

    pub fn network(&self) -> &NetworkModel {
        &self.config.network
    }

    pub fn device(&self, jid: &Jid) -> Option<&Device> {
        self.device_index.get(jid).map(|&i| &self.devices[i].device)
    }

    pub fn device_mut(&mut self, jid: &Jid) -> Option<&mut Device> {
        self.device_index.get(jid).map(|&i| &mut self.devices[i].device)
    }

    pub fn device_jids(&self) -> Vec<Jid> {
        self.devices.iter().map(|d| d.jid.clone()).collect()
    }

    fn push(&mut self, time: SimTime, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn check_future(&self, at: SimTime) -> Result<(), SimError> {
        if at < self.now {
            Err(SimError::ScheduleInPast { at, now: self.now })
        } else {
            Ok(())
        }
    }

    pub fn add_device(&mut self, spec: DeviceSpec) -> Result<Jid, SimError> {
        let condition = spec
            .schedule
            .as_ref()
            .map_or(spec.condition, |s| s.condition_at(self.now));
        let mut device = Device::new(
            spec.phone.clone(),
            spec.role,
            spec.profile,
            spec.model,
            self.config.device_options.clone(),
            condition,
            self.now,
            &mut self.rng,
        );
        let jid = self
            .server
            .register_device(&spec.phone, spec.role, device.initial_upload(), self.now)?;
        device.set_jid(jid.clone());
        self.timeline.push(
            self.now,
            jid.to_string(),
            "device_registered",
            json!({
                "os": device.profile().os.name(),
                "model": device.model().map(|m| m.name()),
                "registration": device.registration_id(),
                "signed_prekey_id": device.signed_prekey().id.0,
                "first_one_time_id": device.first_one_time_id(),
                "initial_batch": device.initial_upload().one_time_prekeys.len(),
                "condition": condition.to_string(),
            }),
        );
        let idx = self.devices.len();
        let next_rotation = device.next_periodic_rotation();
        let next_tick = spec.schedule.as_ref().and_then(|s| s.next_change(self.now));
        self.devices.push(DeviceActor {
            device,
            name: jid.to_string(),
            jid: jid.clone(),
            schedule: spec.schedule,
            reply_after: spec.reply_after,
            inbox: VecDeque::new(),
            reply_scheduled: BTreeSet::new(),
            pending_replies: BTreeSet::new(),
            rotation_overdue: false,
            refill_generation: 0,
            removed: false,
        });
        self.device_index.insert(jid.clone(), idx);
        if let Some(at) = next_rotation {
            self.push(at, EventKind::PeriodicRotation(idx));
        }
        if let Some(at) = next_tick {
            self.push(at, EventKind::ScheduleTick(idx));
        }
        Ok(jid)
    }

    /// Makes the device build and upload its next refill batch right now,
    /// outside the notification path. Used to age fixtures.
    pub fn force_refill(&mut self, jid: &Jid) -> Result<crate::server::UploadAck, SimError> {
        let idx = *self
            .device_index
            .get(jid)
            .ok_or_else(|| SimError::UnknownDevice(jid.to_string()))?;
        let actor = &mut self.devices[idx];
        let batch = actor.device.build_refill(&mut self.rng);
        let ack = self.server.upload_prekeys(&actor.jid, &batch, self.now, &mut self.rng)?;
        actor.device.refill_accepted();
        self.timeline.push(
            self.now,
            actor.name.clone(),
            "refill",
            json!({
                "forced": true,
                "stored": ack.stored,
                "discarded": ack.discarded,
                "epoch": ack.epoch,
                "first_id": batch.first().map(|k| k.id.0),
                "last_id": batch.last().map(|k| k.id.0),
            }),
        );
        Ok(ack)
    }

    /// Removes a companion from the account. Its id is never handed out again.
    pub fn unlink_device(&mut self, jid: &Jid) -> Result<(), SimError> {
        let idx = self
            .device_index
            .remove(jid)
            .ok_or_else(|| SimError::UnknownDevice(jid.to_string()))?;
        self.server.unlink(jid)?;
        self.devices[idx].removed = true;
        self.timeline.push(self.now, jid.to_string(), "device_unlinked", json!({}));
        Ok(())
    }

    pub fn add_agent(&mut self, agent: Box<dyn Agent>, start_at: SimTime) -> Result<AgentId, SimError> {
        self.check_future(start_at)?;
        let name = agent.name().to_string();
        if self.agent_index.contains_key(&name) {
            return Err(SimError::DuplicateAgent(name));
        }
        let id = self.agents.len();
        self.agents.push(AgentSlot {
            name: name.clone(),
            agent: Some(agent),
        });
        self.agent_index.insert(name, id);
        self.push(start_at, EventKind::AgentStart(id));
        Ok(id)
    }

    pub fn schedule_condition(&mut self, jid: &Jid, at: SimTime, condition: DeviceCondition) -> Result<(), SimError> {
        self.check_future(at)?;
        let idx = *self
            .device_index
            .get(jid)
            .ok_or_else(|| SimError::UnknownDevice(jid.to_string()))?;
        self.push(at, EventKind::Condition(idx, condition));
        Ok(())
    }

    pub fn schedule_restart(&mut self, agent: AgentId, at: SimTime) -> Result<(), SimError> {
        self.check_future(at)?;
        self.push(at, EventKind::AgentRestart(agent));
        Ok(())
    }

    pub fn agent<T: Agent>(&self, id: AgentId) -> Option<&T> {
        let boxed = self.agents.get(id)?.agent.as_ref()?;
        (**boxed).as_any().downcast_ref::<T>()
    }

    pub fn agent_mut<T: Agent>(&mut self, id: AgentId) -> Option<&mut T> {
        let boxed = self.agents.get_mut(id)?.agent.as_mut()?;
        (**boxed).as_any_mut().downcast_mut::<T>()
    }

    pub fn take_agent<T: Agent>(&mut self, id: AgentId) -> Option<Box<T>> {
        let slot = self.agents.get_mut(id)?;
        let boxed = slot.agent.take()?;
        match boxed.into_any().downcast::<T>() {
            Ok(t) => Some(t),
            Err(_) => None,
        }
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Processes events up to and including `horizon`. Unless an agent halts
    /// the run, the clock ends at `horizon`.
    pub fn run_until(&mut self, horizon: SimTime) -> Result<(), SimError> {
        self.halted = false;
        while let Some(ev) = self.queue.peek() {
            if ev.time > horizon {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.time;
            self.metrics.events += 1;
            self.process(ev.kind)?;
            if self.halted {
                return Ok(());
            }
        }
        self.now = self.now.max(horizon);
        Ok(())
    }

    fn process(&mut self, kind: EventKind) -> Result<(), SimError> {
        let device_event = match &kind {
            EventKind::DeliverToDevice(idx, ..)
            | EventKind::RefillArrive(idx, _)
            | EventKind::PeriodicRotation(idx)
            | EventKind::EraseSigned(idx)
            | EventKind::Condition(idx, _)
            | EventKind::ScheduleTick(idx)
            | EventKind::DeviceReply(idx, _) => Some(*idx),
            _ => None,
        };
        if device_event.is_some_and(|idx| self.devices[idx].removed) {
            return Ok(());
        }
        match kind {
            EventKind::AgentStart(a) => self.with_agent(a, |ag, ctx| ag.on_start(ctx)),
            EventKind::AgentTimer(a, token) => self.with_agent(a, |ag, ctx| ag.on_timer(ctx, token)),
            EventKind::AgentRestart(a) => {
                let name = self.agents[a].name.clone();
                self.timeline.push(self.now, name, "client_restart", json!({}));
                self.with_agent(a, |ag, ctx| ag.on_restart(ctx))
            }
            EventKind::FetchServe {
                agent,
                request,
                target,
                response_delay,
            } => {
                let requester = &self.agents[agent].name;
                let result = self.server.fetch_bundle(requester, &target, self.now, &mut self.rng);
                self.metrics.fetches += 1;
                if self.timeline.config().record_fetches {
                    let outcome = match &result {
                        Ok(b) => json!({ "target": target.to_string(), "key": b.key.map(|k| k.id.0), "t": b.t }),
                        Err(e) => json!({ "target": target.to_string(), "error": e.to_string() }),
                    };
                    self.timeline.push(self.now, requester.clone(), "fetch", outcome);
                }
                self.dispatch_notifications()?;
                let at = self.now + response_delay;
                self.push(
                    at,
                    EventKind::FetchResponse {
                        agent,
                        request,
                        target,
                        result,
                    },
                );
                Ok(())
            }
            EventKind::FetchResponse {
                agent,
                request,
                target,
                result,
            } => self.with_agent(agent, |ag, ctx| ag.on_fetch(ctx, request, &target, result)),
            EventKind::DeliverToDevice(idx, from, env) => {
                if self.devices[idx].device.is_online() {
                    self.receive_at_device(idx, from, env);
                } else {
                    self.devices[idx].inbox.push_back((from, env));
                }
                Ok(())
            }
            EventKind::DeliverToAgent(agent, idx, env) => {
                self.metrics.messages_delivered += 1;
                let jid = self.devices[idx].jid.clone();
                self.with_agent(agent, |ag, ctx| ag.on_message(ctx, &jid, env))
            }
            EventKind::RefillArrive(idx, generation) => self.refill_arrive(idx, generation),
            EventKind::PeriodicRotation(idx) => {
                if self.devices[idx].device.is_online() {
                    self.rotate(idx, RotationKind::Periodic)?;
                    self.schedule_next_rotation(idx);
                } else {
                    self.devices[idx].rotation_overdue = true;
                }
                Ok(())
            }
            EventKind::EraseSigned(idx) => {
                let actor = &mut self.devices[idx];
                for id in actor.device.erase_expired(self.now) {
                    self.timeline
                        .push(self.now, actor.name.clone(), "signed_prekey_erased", json!({ "id": id.0 }));
                }
                Ok(())
            }
            EventKind::Condition(idx, c) => self.apply_condition(idx, c),
            EventKind::ScheduleTick(idx) => {
                let actor = &self.devices[idx];
                let schedule = actor.schedule.as_ref().expect("ticks only for scheduled devices");
                let c = schedule.condition_at(self.now);
                let next = schedule.next_change(self.now);
                if let Some(at) = next {
                    self.push(at, EventKind::ScheduleTick(idx));
                }
                self.apply_condition(idx, c)
            }
            EventKind::DeviceReply(idx, agent) => {
                self.devices[idx].reply_scheduled.remove(&agent);
                if self.devices[idx].device.is_online() {
                    self.send_reply(idx, agent);
                } else {
                    self.devices[idx].pending_replies.insert(agent);
                }
                Ok(())
            }
        }
    }

    fn with_agent(
        &mut self,
        id: AgentId,
        f: impl FnOnce(&mut dyn Agent, &mut Ctx<'_>),
    ) -> Result<(), SimError> {
        let Some(mut agent) = self.agents[id].agent.take() else {
            return Ok(());
        };
        let mut commands = Vec::new();
        let mut error = None;
        {
            let mut ctx = Ctx {
                now: self.now,
                agent: id,
                rng: &mut self.rng,
                server: &self.server,
                timeline: &mut self.timeline,
                actor: &self.agents[id].name,
                commands: &mut commands,
                next_request: &mut self.next_request,
                halt: &mut self.halted,
                error: &mut error,
            };
            f(agent.as_mut(), &mut ctx);
        }
        self.agents[id].agent = Some(agent);
        if let Some(e) = error {
            return Err(e);
        }
        for c in commands {
            self.apply_command(id, c)?;
        }
        Ok(())
    }

    fn apply_command(&mut self, agent: AgentId, command: Command) -> Result<(), SimError> {
        let load = self.config.network.load;
        match command {
            Command::Fetch { request, target } => {
                let rtt = self.config.network.sample_rtt(Link::Wifi, load, &mut self.rng);
                let service = self.config.network.sample_service(load, &mut self.rng);
                let at = self.now + rtt / 2 + service;
                self.push(
                    at,
                    EventKind::FetchServe {
                        agent,
                        request,
                        target,
                        response_delay: rtt - rtt / 2,
                    },
                );
            }
            Command::Send { to, envelope } => {
                let Some(&idx) = self.device_index.get(&to) else {
                    let name = self.agents[agent].name.clone();
                    self.timeline
                        .push(self.now, name, "send_failed", json!({ "to": to.to_string() }));
                    return Ok(());
                };
                self.metrics.messages_sent += 1;
                self.channel.push(ChannelEntry {
                    time: self.now,
                    sender: self.agents[agent].name.clone(),
                    receiver: to.to_string(),
                    payload: ChannelPayload::Envelope(envelope.clone()),
                });
                let link = self.devices[idx].device.condition().link;
                let up = self.config.network.sample_rtt(Link::Wifi, load, &mut self.rng);
                let down = self.config.network.sample_rtt(link, load, &mut self.rng);
                let at = self.now + up / 2 + down - down / 2;
                self.push(at, EventKind::DeliverToDevice(idx, agent, envelope));
            }
            Command::Timer { at, token } => {
                self.check_future(at)?;
                self.push(at, EventKind::AgentTimer(agent, token));
            }
        }
        Ok(())
    }

    fn dispatch_notifications(&mut self) -> Result<(), SimError> {
        for n in self.server.drain_notifications() {
            let idx = *self
                .device_index
                .get(&n.device)
                .ok_or_else(|| SimError::UnknownDevice(n.device.to_string()))?;
            let actor = &mut self.devices[idx];
            match actor.device.on_notification(&mut self.rng) {
                Some(delay) => {
                    actor.refill_generation += 1;
                    let generation = actor.refill_generation;
                    self.timeline.push(
                        self.now,
                        actor.name.clone(),
                        "notification",
                        json!({ "redelivery": n.redelivery, "upload_in_ms": delay }),
                    );
                    self.push(self.now + delay, EventKind::RefillArrive(idx, generation));
                }
                None => {
                    self.timeline.push(
                        self.now,
                        actor.name.clone(),
                        "notification_ignored",
                        json!({ "redelivery": n.redelivery, "online": actor.device.is_online() }),
                    );
                }
            }
        }
        Ok(())
    }

    fn refill_arrive(&mut self, idx: usize, generation: u64) -> Result<(), SimError> {
        {
            let actor = &self.devices[idx];
            if generation != actor.refill_generation || !actor.device.is_online() || !actor.device.refill_in_flight() {
                return Ok(());
            }
        }
        if self.devices[idx].device.on_demand_rotation_due(self.now) {
            self.rotate(idx, RotationKind::OnDemand)?;
        }
        let actor = &mut self.devices[idx];
        let batch = actor.device.build_refill(&mut self.rng);
        match self.server.upload_prekeys(&actor.jid, &batch, self.now, &mut self.rng) {
            Ok(ack) => {
                actor.device.refill_accepted();
                self.timeline.push(
                    self.now,
                    actor.name.clone(),
                    "refill",
                    json!({
                        "stored": ack.stored,
                        "discarded": ack.discarded,
                        "epoch": ack.epoch,
                        "first_id": batch.first().map(|k| k.id.0),
                        "last_id": batch.last().map(|k| k.id.0),
                    }),
                );
                Ok(())
            }
            Err(ServerError::ServiceUnavailable) => {
                let retry = actor.device.refill_rejected();
                self.timeline
                    .push(self.now, actor.name.clone(), "refill_rejected", json!({ "retry_in_ms": retry }));
                self.push(self.now + retry, EventKind::RefillArrive(idx, generation));
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn rotate(&mut self, idx: usize, kind: RotationKind) -> Result<(), SimError> {
        let actor = &mut self.devices[idx];
        let old = actor.device.signed_prekey().id;
        let public = actor.device.prepare_rotation(kind, &mut self.rng);
        self.server.rotate_signed_prekey(&actor.jid, public, self.now)?;
        let erase_at = actor.device.commit_rotation(self.now).expect("rotation was prepared");
        self.timeline.push(
            self.now,
            actor.name.clone(),
            "signed_rotation",
            json!({
                "old": old.0,
                "new": public.id.0,
                "kind": match kind { RotationKind::Periodic => "periodic", RotationKind::OnDemand => "on_demand" },
                "erase_old_at": erase_at,
            }),
        );
        self.push(erase_at, EventKind::EraseSigned(idx));
        Ok(())
    }

    fn schedule_next_rotation(&mut self, idx: usize) {
        if let Some(at) = self.devices[idx].device.next_periodic_rotation() {
            self.push(at.max(self.now), EventKind::PeriodicRotation(idx));
        }
    }

    fn apply_condition(&mut self, idx: usize, c: DeviceCondition) -> Result<(), SimError> {
        let actor = &mut self.devices[idx];
        let was_online = actor.device.is_online();
        if actor.device.condition() == c {
            return Ok(());
        }
        actor.device.set_power(c.power);
        actor.device.set_link(c.link);
        let online = actor.device.is_online();
        self.timeline
            .push(self.now, actor.name.clone(), "condition", json!({ "condition": c.to_string() }));
        if was_online && !online {
            actor.refill_generation += 1;
        }
        if !was_online && online {
            let jid = actor.jid.clone();
            self.server.reconnect(&jid, self.now)?;
            self.dispatch_notifications()?;
            if std::mem::take(&mut self.devices[idx].rotation_overdue) {
                self.rotate(idx, RotationKind::Periodic)?;
                self.schedule_next_rotation(idx);
            }
            while let Some((from, env)) = self.devices[idx].inbox.pop_front() {
                self.receive_at_device(idx, from, env);
            }
            for agent in std::mem::take(&mut self.devices[idx].pending_replies) {
                self.send_reply(idx, agent);
            }
        }
        Ok(())
    }

    fn receive_at_device(&mut self, idx: usize, from: AgentId, env: Envelope) {
        let peer = self.agents[from].name.clone();
        let actor = &mut self.devices[idx];
        match actor.device.receive(&peer, &env, &mut self.rng) {
            Ok(out) => {
                self.timeline.push(
                    self.now,
                    actor.name.clone(),
                    "message_received",
                    json!({
                        "from": peer,
                        "new_session": out.new_session,
                        "signed_prekey_id": out.signed_prekey.map(|k| k.0),
                        "one_time_prekey_id": out.one_time_prekey.map(|k| k.0),
                    }),
                );
                if out.new_session && out.one_time_prekey.is_none() {
                    self.metrics.sessions_without_otpk += 1;
                    if self.config.pfs_ui_notification {
                        self.metrics.pfs_notifications += 1;
                        self.timeline
                            .push(self.now, actor.name.clone(), "pfs_notification", json!({ "peer": peer }));
                    }
                }
                if let Some(delay) = actor.reply_after {
                    if actor.reply_scheduled.insert(from) {
                        self.push(self.now + delay, EventKind::DeviceReply(idx, from));
                    }
                }
            }
            Err(e) => {
                let stale = matches!(e, DeviceError::Crypto(CryptoError::StaleBundle(_)));
                self.timeline.push(
                    self.now,
                    actor.name.clone(),
                    "receive_failed",
                    json!({ "from": peer, "error": e.to_string() }),
                );
                self.metrics.receive_failures.push(ReceiveFailure {
                    time: self.now,
                    device: actor.name.clone(),
                    peer,
                    error: e.to_string(),
                    stale_bundle: stale,
                });
            }
        }
    }

    fn send_reply(&mut self, idx: usize, agent: AgentId) {
        let peer = self.agents[agent].name.clone();
        let actor = &mut self.devices[idx];
        let Ok(env) = actor.device.encrypt_to(&peer, b"reply", &mut self.rng) else {
            return;
        };
        self.metrics.messages_sent += 1;
        self.channel.push(ChannelEntry {
            time: self.now,
            sender: actor.name.clone(),
            receiver: peer.clone(),
            payload: ChannelPayload::Envelope(env.clone()),
        });
        self.timeline
            .push(self.now, actor.name.clone(), "reply_sent", json!({ "to": peer }));
        let link = actor.device.condition().link;
        let load = self.config.network.load;
        let up = self.config.network.sample_rtt(link, load, &mut self.rng);
        let down = self.config.network.sample_rtt(Link::Wifi, load, &mut self.rng);
        let at = self.now + up / 2 + down - down / 2;
        self.push(at, EventKind::DeliverToAgent(agent, idx, env));
    }
}
