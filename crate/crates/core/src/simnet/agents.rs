use serde::Serialize;
use serde_json::json;

use super::engine::{Agent, Ctx, RequestId};
use crate::crypto::{x3dh_initiate, Envelope, IdentityKeyPair, KeyId, SessionState};
use crate::server::{Jid, PrekeyBundle, ServerError};
use crate::time::SimTime;

const TIMER_SEND: u64 = 1;
const TIMER_RETRY: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RetryPolicy {
    /// Observed client behaviour: a failed bundle fetch is only retried when
    /// the application is restarted.
    OnRestart,
    After(SimTime),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct InitiatorRecord {
    pub bundle_at: Option<SimTime>,
    pub one_time_prekey: Option<KeyId>,
    pub signed_prekey: Option<KeyId>,
    pub bundle_had_one_time_prekey: Option<bool>,
    pub fetch_failures: u32,
    pub first_send_at: Option<SimTime>,
    pub pre_reply_sent: u32,
    pub reply_at: Option<SimTime>,
    pub post_reply_sent: u32,
    pub handshake_error: Option<String>,
}

/// An honest contact who opens a conversation with one device: fetches a
/// bundle, sends its first messages, and answers a reply with more.
pub struct Initiator {
    name: String,
    identity: Option<IdentityKeyPair>,
    target: Jid,
    pre_reply: u32,
    post_reply: u32,
    think_time: SimTime,
    retry: RetryPolicy,
    session: Option<SessionState>,
    in_flight: Option<RequestId>,
    record: InitiatorRecord,
}

impl Initiator {
    pub fn new(name: impl Into<String>, target: Jid) -> Self {
        Self {
            name: name.into(),
            identity: None,
            target,
            pre_reply: 1,
            post_reply: 0,
            think_time: 0,
            retry: RetryPolicy::OnRestart,
            session: None,
            in_flight: None,
            record: InitiatorRecord::default(),
        }
    }

    pub fn messages(mut self, pre_reply: u32, post_reply: u32) -> Self {
        self.pre_reply = pre_reply;
        self.post_reply = post_reply;
        self
    }

    pub fn think_time(mut self, delay: SimTime) -> Self {
        self.think_time = delay;
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn record(&self) -> &InitiatorRecord {
        &self.record
    }

    pub fn session(&self) -> Option<&SessionState> {
        self.session.as_ref()
    }

    pub fn target(&self) -> &Jid {
        &self.target
    }

    fn request(&mut self, ctx: &mut Ctx<'_>) {
        if self.identity.is_none() {
            self.identity = Some(IdentityKeyPair::generate(ctx.rng()));
        }
        self.in_flight = Some(ctx.fetch(&self.target));
    }

    fn send(&mut self, ctx: &mut Ctx<'_>, text: &str) -> bool {
        let Some(session) = self.session.as_mut() else {
            return false;
        };
        match session.encrypt(text.as_bytes(), ctx.rng()) {
            Ok(env) => {
                ctx.send(&self.target, env);
                true
            }
            Err(_) => false,
        }
    }

    fn send_first(&mut self, ctx: &mut Ctx<'_>) {
        self.record.first_send_at = Some(ctx.now());
        for i in 0..self.pre_reply {
            if self.send(ctx, &format!("{} pre {i}", self.name)) {
                self.record.pre_reply_sent += 1;
            }
        }
    }

    fn accept_bundle(&mut self, ctx: &mut Ctx<'_>, bundle: PrekeyBundle) {
        self.record.bundle_at = Some(ctx.now());
        self.record.bundle_had_one_time_prekey = Some(bundle.has_one_time_prekey());
        self.record.one_time_prekey = bundle.key.map(|k| k.id);
        self.record.signed_prekey = Some(bundle.signed_prekey.id);
        let identity = self.identity.as_ref().expect("identity created before the fetch");
        match x3dh_initiate(identity, &bundle.keys(), ctx.rng()) {
            Ok((session, _)) => {
                self.session = Some(session);
                ctx.log(
                    "session_initiated",
                    json!({
                        "target": self.target.to_string(),
                        "one_time_prekey_id": self.record.one_time_prekey.map(|k| k.0),
                        "signed_prekey_id": bundle.signed_prekey.id.0,
                    }),
                );
                if self.think_time == 0 {
                    self.send_first(ctx);
                } else {
                    ctx.timer(self.think_time, TIMER_SEND);
                }
            }
            Err(e) => self.record.handshake_error = Some(e.to_string()),
        }
    }
}

impl Agent for Initiator {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        self.request(ctx);
    }

    fn on_fetch(
        &mut self,
        ctx: &mut Ctx<'_>,
        request: RequestId,
        _target: &Jid,
        result: Result<PrekeyBundle, ServerError>,
    ) {
        if self.in_flight != Some(request) {
            return;
        }
        self.in_flight = None;
        match result {
            Ok(bundle) => self.accept_bundle(ctx, bundle),
            Err(e) => {
                self.record.fetch_failures += 1;
                ctx.log("fetch_failed", json!({ "error": e.to_string(), "queued": true }));
                if let RetryPolicy::After(d) = self.retry {
                    ctx.timer(d, TIMER_RETRY);
                }
            }
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_>, token: u64) {
        match token {
            TIMER_SEND => self.send_first(ctx),
            TIMER_RETRY if self.session.is_none() && self.in_flight.is_none() => self.request(ctx),
            _ => {}
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_>, _from: &Jid, envelope: Envelope) {
        let Some(session) = self.session.as_mut() else {
            return;
        };
        if session.decrypt(&envelope, ctx.rng()).is_err() || self.record.reply_at.is_some() {
            return;
        }
        self.record.reply_at = Some(ctx.now());
        for i in 0..self.post_reply {
            if self.send(ctx, &format!("{} post {i}", self.name)) {
                self.record.post_reply_sent += 1;
            }
        }
    }

    fn on_restart(&mut self, ctx: &mut Ctx<'_>) {
        if self.session.is_none() && self.in_flight.is_none() {
            self.request(ctx);
        }
    }
}
