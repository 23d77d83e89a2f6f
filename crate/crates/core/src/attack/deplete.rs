use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::server::{Jid, PrekeyBundle, ServerError};
use crate::simnet::{Agent, Ctx, RequestId};
use crate::time::{as_secs_f64, SimTime, SECOND};

const TIMER_PACE: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DepletionMode {
    /// One request outstanding at a time.
    Sync,
    /// Requests issued at `rate` per second, at most `rate` outstanding.
    Async { rate: u32 },
}

impl fmt::Display for DepletionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepletionMode::Sync => write!(f, "sync"),
            DepletionMode::Async { rate } => write!(f, "async@{rate}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DepletionReport {
    pub target: String,
    pub mode: String,
    /// Bundles that carried a one-time prekey.
    pub bundle_count: u64,
    pub min_id: Option<u32>,
    pub max_id: Option<u32>,
    pub duration_ms: SimTime,
    pub empty_bundle_count: u64,
    pub duplicate_ids: Vec<u32>,
    pub unavailable: u64,
    pub rate_limited: u64,
    pub requests: u64,
    pub first_epoch: Option<u64>,
    pub last_epoch: Option<u64>,
    pub completed: bool,
}

impl DepletionReport {
    pub const CSV_HEADER: &'static str = "target,mode,bundle_count,min_id,max_id,duration_s,empty_bundles,duplicates,unavailable,rate_limited,requests,completed";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.3},{},{},{},{},{},{}",
            self.target,
            self.mode,
            self.bundle_count,
            opt(self.min_id),
            opt(self.max_id),
            as_secs_f64(self.duration_ms),
            self.empty_bundle_count,
            self.duplicate_ids.len(),
            self.unavailable,
            self.rate_limited,
            self.requests,
            self.completed
        )
    }

    /// Terminal summary in the format of the original tooling.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        if self.bundle_count == 0 {
            out.push_str("No one-time prekeys available\n");
        } else if self.completed {
            out.push_str(&format!(
                "All prekeys depleted, consumed {} bundles in {}s\n",
                self.bundle_count,
                self.duration_ms / SECOND
            ));
        } else {
            out.push_str(&format!(
                "Stopped before depletion, consumed {} bundles in {}s\n",
                self.bundle_count,
                self.duration_ms / SECOND
            ));
        }
        out.push_str(&format!(
            "[Prekey Stats] Cnt: {}, MinID: {}, MaxID: {}\n",
            self.bundle_count,
            self.min_id.map_or("-".into(), |v| v.to_string()),
            self.max_id.map_or("-".into(), |v| v.to_string()),
        ));
        if self.rate_limited > 0 {
            out.push_str(&format!("Rate limited requests: {}\n", self.rate_limited));
        }
        if self.unavailable > 0 {
            out.push_str(&format!("503 Service Unavailable: {}\n", self.unavailable));
        }
        if !self.duplicate_ids.is_empty() {
            out.push_str(&format!(
                "Duplicate handouts observed: {:?}\n",
                self.duplicate_ids
            ));
        }
        out
    }
}

/// Repeatedly fetches bundles for one device.
pub struct Depleter {
    name: String,
    target: Jid,
    mode: DepletionMode,
    stop_when_empty: bool,
    max_bundles: Option<u64>,
    until: Option<SimTime>,
    track_ids: bool,
    started_at: SimTime,
    last_key_at: SimTime,
    finished_at: Option<SimTime>,
    issued: u64,
    in_flight: u32,
    stopped: bool,
    ids: Vec<u32>,
    seen: HashSet<u32>,
    report: DepletionReport,
}

impl Depleter {
    pub fn new(name: impl Into<String>, target: Jid, mode: DepletionMode) -> Self {
        let report = DepletionReport {
            target: target.to_string(),
            mode: mode.to_string(),
            bundle_count: 0,
            min_id: None,
            max_id: None,
            duration_ms: 0,
            empty_bundle_count: 0,
            duplicate_ids: Vec::new(),
            unavailable: 0,
            rate_limited: 0,
            requests: 0,
            first_epoch: None,
            last_epoch: None,
            completed: false,
        };
        Self {
            name: name.into(),
            target,
            mode,
            stop_when_empty: true,
            max_bundles: None,
            until: None,
            track_ids: true,
            started_at: 0,
            last_key_at: 0,
            finished_at: None,
            issued: 0,
            in_flight: 0,
            stopped: false,
            ids: Vec::new(),
            seen: HashSet::new(),
            report,
        }
    }

    /// Keep fetching after the store runs dry, up to `until` if given.
    pub fn continuous(mut self, until: Option<SimTime>) -> Self {
        self.stop_when_empty = false;
        self.until = until;
        self
    }

    pub fn stop_when_empty(mut self, stop: bool) -> Self {
        self.stop_when_empty = stop;
        self
    }

    pub fn max_bundles(mut self, n: u64) -> Self {
        self.max_bundles = Some(n);
        self
    }

    pub fn until(mut self, t: SimTime) -> Self {
        self.until = Some(t);
        self
    }

    /// Skip per-id bookkeeping (duplicate detection) for long runs.
    pub fn without_id_tracking(mut self) -> Self {
        self.track_ids = false;
        self
    }

    pub fn report(&self) -> &DepletionReport {
        &self.report
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn is_finished(&self) -> bool {
        self.finished_at.is_some()
    }

    fn issue(&mut self, ctx: &mut Ctx<'_>) {
        self.issued += 1;
        self.in_flight += 1;
        self.report.requests += 1;
        ctx.fetch(&self.target);
    }

    fn past_deadline(&self, now: SimTime) -> bool {
        self.until.is_some_and(|u| now >= u)
    }

    fn stop(&mut self, ctx: &mut Ctx<'_>, completed: bool) {
        if self.stopped {
            return;
        }
        self.stopped = true;
        self.report.completed = completed;
        self.report.duration_ms = self.last_key_at.saturating_sub(self.started_at);
        if self.report.bundle_count == 0 {
            self.report.duration_ms = ctx.now().saturating_sub(self.started_at);
        }
        self.finished_at = Some(ctx.now());
        ctx.log(
            "depletion_finished",
            json!({
                "target": self.report.target,
                "bundles": self.report.bundle_count,
                "min_id": self.report.min_id,
                "max_id": self.report.max_id,
                "duration_ms": self.report.duration_ms,
                "completed": completed,
            }),
        );
    }

    fn next_pace_time(&self) -> SimTime {
        match self.mode {
            DepletionMode::Async { rate } => self.started_at + self.issued * SECOND / u64::from(rate.max(1)),
            DepletionMode::Sync => self.started_at,
        }
    }
}

impl Agent for Depleter {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        self.started_at = ctx.now();
        ctx.log(
            "depletion_started",
            json!({ "target": self.report.target, "mode": self.report.mode }),
        );
        match self.mode {
            DepletionMode::Sync => self.issue(ctx),
            DepletionMode::Async { .. } => self.on_timer(ctx, TIMER_PACE),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, _token: u64) {
        let DepletionMode::Async { rate } = self.mode else {
            return;
        };
        if self.stopped {
            return;
        }
        if self.past_deadline(ctx.now()) {
            let completed = self.report.empty_bundle_count > 0;
            self.stop(ctx, completed);
            return;
        }
        while self.next_pace_time() <= ctx.now() && self.in_flight < rate {
            self.issue(ctx);
        }
        let next = self.next_pace_time().max(ctx.now() + 1);
        ctx.timer_at(next, TIMER_PACE);
    }

    fn on_fetch(
        &mut self,
        ctx: &mut Ctx<'_>,
        _request: RequestId,
        _target: &Jid,
        result: Result<PrekeyBundle, ServerError>,
    ) {
        self.in_flight = self.in_flight.saturating_sub(1);
        match result {
            Ok(bundle) => {
                self.report.first_epoch.get_or_insert(bundle.t);
                self.report.last_epoch = Some(bundle.t);
                match bundle.key {
                    Some(k) => {
                        let id = k.id.0;
                        self.report.bundle_count += 1;
                        self.last_key_at = ctx.now();
                        self.report.min_id = Some(self.report.min_id.map_or(id, |m| m.min(id)));
                        self.report.max_id = Some(self.report.max_id.map_or(id, |m| m.max(id)));
                        if self.track_ids {
                            if !self.seen.insert(id) {
                                self.report.duplicate_ids.push(id);
                            }
                            self.ids.push(id);
                        }
                    }
                    None => {
                        self.report.empty_bundle_count += 1;
                        if self.stop_when_empty {
                            self.stop(ctx, true);
                        }
                    }
                }
            }
            Err(ServerError::ServiceUnavailable) => self.report.unavailable += 1,
            Err(ServerError::RateLimited) => self.report.rate_limited += 1,
            Err(_) => {
                self.stop(ctx, false);
            }
        }
        if self
            .max_bundles
            .is_some_and(|m| self.report.bundle_count >= m)
        {
            self.stop(ctx, false);
        }
        if self.stopped {
            return;
        }
        if self.past_deadline(ctx.now()) {
            let completed = self.report.empty_bundle_count > 0;
            self.stop(ctx, completed);
            return;
        }
        if self.mode == DepletionMode::Sync {
            self.issue(ctx);
        }
    }
}
