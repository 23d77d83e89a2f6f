use serde::Serialize;
use serde_json::json;

use crate::device::{DeviceCondition, LatencyModel, PhoneModel, COMPANION_MEDIAN_DELAY_SECS, CALIBRATION_SIGMA};
use crate::device::LogNormalDelay;
use crate::server::{Jid, PrekeyBundle, ServerError};
use crate::simnet::{Agent, Ctx, RequestId};
use crate::time::{from_secs_f64, SimTime, MINUTE, SECOND};

const TIMER_POLL: u64 = 1;
const TIMER_PROBE: u64 = 2;
const MAX_PROBE_INTERVAL: SimTime = 60 * SECOND;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferredState {
    Online,
    Offline,
    Unknown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Basis {
    RefillObserved,
    RefillMissing,
    Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Observation {
    /// When the inferred state began, as best the evidence allows.
    pub time: SimTime,
    /// When the monitor drew the conclusion.
    pub decided_at: SimTime,
    pub state: InferredState,
    pub basis: Basis,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OnlineTimeline {
    pub target: String,
    pub observations: Vec<Observation>,
}

impl OnlineTimeline {
    pub const CSV_HEADER: &'static str = "target,time_ms,decided_at_ms,state,basis";

    pub fn csv_rows(&self) -> Vec<String> {
        self.observations
            .iter()
            .map(|o| {
                format!(
                    "{},{},{},{},{}",
                    self.target,
                    o.time,
                    o.decided_at,
                    match o.state {
                        InferredState::Online => "online",
                        InferredState::Offline => "offline",
                        InferredState::Unknown => "unknown",
                    },
                    match o.basis {
                        Basis::RefillObserved => "refill-observed",
                        Basis::RefillMissing => "refill-missing",
                        Basis::Timestamp => "timestamp",
                    }
                )
            })
            .collect()
    }

    /// State changes only: consecutive observations with the same state
    /// collapse into the first.
    pub fn transitions(&self) -> Vec<Observation> {
        let mut out: Vec<Observation> = Vec::new();
        for o in &self.observations {
            if out.last().is_none_or(|l| l.state != o.state) {
                out.push(*o);
            }
        }
        out
    }

    /// Inferred offline spans `[start, end)`; an open span ends at `horizon`.
    pub fn offline_spans(&self, horizon: SimTime) -> Vec<(SimTime, SimTime)> {
        let mut spans = Vec::new();
        let mut open: Option<SimTime> = None;
        for o in self.transitions() {
            match (o.state, open) {
                (InferredState::Offline, None) => open = Some(o.time),
                (InferredState::Online, Some(start)) => {
                    spans.push((start, o.time));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(start) = open {
            spans.push((start, horizon));
        }
        spans
    }
}

/// Default response window: three times the 95th percentile of the pooled
/// refill-latency cells of every shipped profile.
pub fn default_response_window() -> SimTime {
    let companion = LatencyModel::uniform(LogNormalDelay::from_median_secs(
        COMPANION_MEDIAN_DELAY_SECS,
        CALIBRATION_SIGMA,
    ));
    let mut p95: f64 = 0.0;
    for model in PhoneModel::ALL {
        for (_, delay) in model.latency_model().cells() {
            p95 = p95.max(delay.quantile_secs(0.95));
        }
    }
    if let Some(d) = companion.get(DeviceCondition::ALL[0]) {
        p95 = p95.max(d.quantile_secs(0.95));
    }
    from_secs_f64(3.0 * p95)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonitorConfig {
    pub poll_interval: SimTime,
    pub probe_interval: SimTime,
    pub response_window: SimTime,
    pub epoch_offset_secs: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            poll_interval: 5 * MINUTE,
            probe_interval: SECOND,
            response_window: default_response_window(),
            epoch_offset_secs: crate::server::ServerConfig::default().epoch_offset_secs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    Draining,
    Waiting { empty_at: SimTime },
    Offline,
}

/// Tracks a device's connectivity through its refill behaviour: each poll
/// drains the store below the watermark, then probes until the device's
/// refill shows up (online) or the response window expires (offline).
pub struct Monitor {
    name: String,
    target: Jid,
    config: MonitorConfig,
    phase: Phase,
    cycle_start: SimTime,
    last_t: Option<u64>,
    probe_interval: SimTime,
    in_flight: bool,
    backoffs: u32,
    timeline: OnlineTimeline,
}

impl Monitor {
    pub fn new(name: impl Into<String>, target: Jid, config: MonitorConfig) -> Self {
        Self {
            name: name.into(),
            timeline: OnlineTimeline {
                target: target.to_string(),
                observations: Vec::new(),
            },
            target,
            probe_interval: config.probe_interval,
            config,
            phase: Phase::Idle,
            cycle_start: 0,
            last_t: None,
            in_flight: false,
            backoffs: 0,
        }
    }

    pub fn timeline(&self) -> &OnlineTimeline {
        &self.timeline
    }

    pub fn backoffs(&self) -> u32 {
        self.backoffs
    }

    fn fetch(&mut self, ctx: &mut Ctx<'_>) {
        if !self.in_flight {
            self.in_flight = true;
            ctx.fetch(&self.target);
        }
    }

    fn observe(&mut self, ctx: &mut Ctx<'_>, time: SimTime, state: InferredState, basis: Basis) {
        let o = Observation {
            time,
            decided_at: ctx.now(),
            state,
            basis,
        };
        ctx.log(
            "online_observation",
            json!({ "target": self.timeline.target, "time": time, "state": state, "basis": basis }),
        );
        self.timeline.observations.push(o);
    }

    fn upload_time(&self, t: u64, now: SimTime) -> SimTime {
        (t.saturating_sub(self.config.epoch_offset_secs) * SECOND).min(now)
    }

    fn schedule_next_poll(&mut self, ctx: &mut Ctx<'_>) {
        self.phase = Phase::Idle;
        let next = (self.cycle_start + self.config.poll_interval).max(ctx.now() + 1);
        ctx.timer_at(next, TIMER_POLL);
    }

    fn refilled(&mut self, ctx: &mut Ctx<'_>, bundle: &PrekeyBundle) {
        let advanced = self.last_t.is_some_and(|t| bundle.t > t);
        let (time, basis) = if advanced {
            (self.upload_time(bundle.t, ctx.now()), Basis::Timestamp)
        } else {
            (ctx.now(), Basis::RefillObserved)
        };
        self.observe(ctx, time, InferredState::Online, basis);
        self.schedule_next_poll(ctx);
    }
}

impl Agent for Monitor {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        self.on_timer(ctx, TIMER_POLL);
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        match (token, self.phase) {
            (TIMER_POLL, Phase::Idle) => {
                self.cycle_start = ctx.now();
                self.phase = Phase::Draining;
                self.fetch(ctx);
            }
            (TIMER_PROBE, Phase::Waiting { .. } | Phase::Offline) => self.fetch(ctx),
            _ => {}
        }
    }

    fn on_fetch(
        &mut self,
        ctx: &mut Ctx<'_>,
        _request: RequestId,
        _target: &Jid,
        result: Result<PrekeyBundle, ServerError>,
    ) {
        self.in_flight = false;
        let bundle = match result {
            Ok(b) => {
                if self.probe_interval > self.config.probe_interval {
                    self.probe_interval = (self.probe_interval / 2).max(self.config.probe_interval);
                }
                b
            }
            Err(ServerError::ServiceUnavailable) => {
                self.backoffs += 1;
                self.probe_interval = (self.probe_interval * 2).min(MAX_PROBE_INTERVAL);
                ctx.log("self_clogging_backoff", json!({ "probe_interval_ms": self.probe_interval }));
                ctx.timer(self.probe_interval, TIMER_PROBE);
                if self.phase == Phase::Draining {
                    self.phase = Phase::Waiting { empty_at: ctx.now() };
                }
                return;
            }
            Err(_) => {
                ctx.timer(self.probe_interval, TIMER_PROBE);
                return;
            }
        };
        let advanced = self.last_t.is_some_and(|t| bundle.t > t);
        match self.phase {
            Phase::Draining => {
                if bundle.key.is_some() {
                    self.last_t = Some(bundle.t);
                    self.fetch(ctx);
                } else {
                    self.last_t = Some(bundle.t);
                    self.phase = Phase::Waiting { empty_at: ctx.now() };
                    ctx.timer(self.probe_interval, TIMER_PROBE);
                }
            }
            Phase::Waiting { empty_at } => {
                if advanced || bundle.key.is_some() {
                    self.refilled(ctx, &bundle);
                } else if ctx.now().saturating_sub(empty_at) >= self.config.response_window {
                    self.observe(ctx, empty_at, InferredState::Offline, Basis::RefillMissing);
                    self.phase = Phase::Offline;
                    ctx.timer(self.probe_interval, TIMER_PROBE);
                } else {
                    ctx.timer(self.probe_interval, TIMER_PROBE);
                }
                self.last_t = Some(bundle.t);
            }
            Phase::Offline => {
                if advanced || bundle.key.is_some() {
                    self.refilled(ctx, &bundle);
                } else {
                    ctx.timer(self.probe_interval, TIMER_PROBE);
                }
                self.last_t = Some(bundle.t);
            }
            Phase::Idle => {
                self.last_t = Some(bundle.t);
            }
        }
    }
}
