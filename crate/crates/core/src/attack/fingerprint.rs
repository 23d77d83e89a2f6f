use serde::Serialize;
use serde_json::json;

use super::deplete::{Depleter, DepletionMode, DepletionReport};
use crate::crypto::hash_key_id;
use crate::device::{OsKind, REFILL_BATCH};
use crate::server::{Jid, PrekeyBundle, ServerError};
use crate::simnet::{Agent, Ctx, RequestId};

/// Signed prekey ids above this are taken to be random rather than counters.
pub const RANDOM_ID_THRESHOLD: u32 = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Evidence {
    pub feature: String,
    pub value: String,
    pub rule: String,
}

fn ev(feature: &str, value: impl ToString, rule: &str) -> Evidence {
    Evidence {
        feature: feature.into(),
        value: value.to_string(),
        rule: rule.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FingerprintVerdict {
    pub target: String,
    pub os_guess: Option<OsKind>,
    pub confidence: f64,
    pub evidence: Vec<Evidence>,
    pub initial_batch_estimate: Option<u32>,
    pub refills_estimate: Option<u32>,
}

impl FingerprintVerdict {
    pub const CSV_HEADER: &'static str = "target,os_guess,confidence,initial_batch_estimate,refills_estimate,evidence";

    pub fn csv_row(&self) -> String {
        let evidence: Vec<String> = self
            .evidence
            .iter()
            .map(|e| format!("{}={} ({})", e.feature, e.value, e.rule))
            .collect();
        format!(
            "{},{},{:.3},{},{},\"{}\"",
            self.target,
            self.os_guess.map_or("unknown", |o| o.name()),
            self.confidence,
            self.initial_batch_estimate.map(|v| v.to_string()).unwrap_or_default(),
            self.refills_estimate.map(|v| v.to_string()).unwrap_or_default(),
            evidence.join("; ")
        )
    }
}

/// Everything the classifier looks at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FingerprintFeatures {
    pub target: Jid,
    pub signed_prekey_id: u32,
    pub signed_id_is_key_hash: bool,
    pub depletion: Option<DepletionSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepletionSummary {
    pub count: u64,
    pub min_id: Option<u32>,
    pub max_id: Option<u32>,
}

impl From<&DepletionReport> for DepletionSummary {
    fn from(r: &DepletionReport) -> Self {
        Self {
            count: r.bundle_count,
            min_id: r.min_id,
            max_id: r.max_id,
        }
    }
}

impl FingerprintFeatures {
    pub fn from_bundle(bundle: &PrekeyBundle) -> Self {
        Self {
            target: bundle.jid.clone(),
            signed_prekey_id: bundle.signed_prekey.id.0,
            signed_id_is_key_hash: hash_key_id(&bundle.signed_prekey.public) == bundle.signed_prekey.id,
            depletion: None,
        }
    }

    pub fn needs_depletion(&self, threshold: u32) -> bool {
        !self.target.is_main() && !self.signed_id_is_key_hash && self.signed_prekey_id <= threshold
    }
}

/// Decision procedure over bundle features. Deterministic: equal features
/// give equal verdicts.
pub fn classify(f: &FingerprintFeatures, threshold: u32) -> FingerprintVerdict {
    let mut evidence = vec![
        ev("device_id", f.target.device, "0 is the main device, >0 a companion"),
        ev("signed_prekey_id", f.signed_prekey_id, &format!("> {threshold} means randomly initialized")),
    ];
    let mut verdict = FingerprintVerdict {
        target: f.target.to_string(),
        os_guess: None,
        confidence: 0.0,
        evidence: Vec::new(),
        initial_batch_estimate: None,
        refills_estimate: None,
    };
    let random_signed = f.signed_prekey_id > threshold;

    if f.signed_id_is_key_hash {
        evidence.push(ev(
            "signed_prekey_id",
            "hash of public key",
            "key ids carry no initialization information; feature removed",
        ));
        if f.target.is_main() {
            verdict.os_guess = Some(OsKind::Iphone);
            verdict.confidence = 0.5;
        } else {
            verdict.os_guess = Some(OsKind::Web);
            verdict.confidence = 1.0 / 3.0;
        }
        verdict.evidence = evidence;
        return verdict;
    }

    if f.target.is_main() {
        verdict.os_guess = Some(if random_signed { OsKind::Iphone } else { OsKind::Android });
        verdict.confidence = 0.99;
        verdict.evidence = evidence;
        return verdict;
    }

    if random_signed {
        verdict.os_guess = Some(OsKind::DesktopMac);
        verdict.confidence = 0.99;
        verdict.evidence = evidence;
        return verdict;
    }

    let Some(d) = f.depletion else {
        evidence.push(ev("depletion", "not performed", "web and windows need the batch size"));
        verdict.confidence = 0.5;
        verdict.evidence = evidence;
        return verdict;
    };
    evidence.push(ev("bundle_count", d.count, "keys handed out until empty"));
    let Some(max) = d.max_id else {
        evidence.push(ev("max_id", "none", "no one-time prekeys observed"));
        verdict.confidence = 0.5;
        verdict.evidence = evidence;
        return verdict;
    };
    let batch = REFILL_BATCH;
    let initial = match max % batch {
        0 => batch,
        r => r,
    };
    let refills = (max - initial) / batch;
    verdict.initial_batch_estimate = Some(initial);
    verdict.refills_estimate = Some(refills);
    if let Some(min) = d.min_id {
        evidence.push(ev("min_id", min, "first id of the current batch"));
    }
    evidence.push(ev(
        "max_id",
        max,
        &format!("initial batch = max_id - refills * {batch} = {initial} with {refills} refills"),
    ));
    verdict.os_guess = match initial {
        200 => Some(OsKind::Web),
        50 => Some(OsKind::DesktopWindows),
        _ => None,
    };
    verdict.confidence = if verdict.os_guess.is_some() { 0.99 } else { 0.5 };
    if verdict.os_guess.is_none() {
        evidence.push(ev("initial_batch", initial, "matches no known companion profile"));
    }
    verdict.evidence = evidence;
    verdict
}

enum Phase {
    Probe,
    Depleting(Box<Depleter>),
    Done,
}

/// Fetches one bundle and, for companions with counter ids, drains the
/// store to learn the initial batch size.
pub struct Fingerprinter {
    name: String,
    target: Jid,
    allow_depletion: bool,
    threshold: u32,
    phase: Phase,
    features: Option<FingerprintFeatures>,
    probe_key: Option<u32>,
    verdict: Option<FingerprintVerdict>,
    depletion: Option<DepletionReport>,
}

impl Fingerprinter {
    pub fn new(name: impl Into<String>, target: Jid, allow_depletion: bool) -> Self {
        Self {
            name: name.into(),
            target,
            allow_depletion,
            threshold: RANDOM_ID_THRESHOLD,
            phase: Phase::Probe,
            features: None,
            probe_key: None,
            verdict: None,
            depletion: None,
        }
    }

    pub fn threshold(mut self, threshold: u32) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn verdict(&self) -> Option<&FingerprintVerdict> {
        self.verdict.as_ref()
    }

    pub fn depletion(&self) -> Option<&DepletionReport> {
        self.depletion.as_ref()
    }

    fn conclude(&mut self, ctx: &mut Ctx<'_>) {
        let f = self.features.as_ref().expect("features before verdict");
        let v = classify(f, self.threshold);
        ctx.log(
            "fingerprint",
            json!({
                "target": v.target,
                "os_guess": v.os_guess.map(|o| o.name()),
                "confidence": v.confidence,
            }),
        );
        self.verdict = Some(v);
        self.phase = Phase::Done;
    }
}

impl Agent for Fingerprinter {
    fn name(&self) -> &str {
        &self.name
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.fetch(&self.target);
    }

    fn on_fetch(
        &mut self,
        ctx: &mut Ctx<'_>,
        request: RequestId,
        target: &Jid,
        result: Result<PrekeyBundle, ServerError>,
    ) {
        match &mut self.phase {
            Phase::Probe => match result {
                Ok(bundle) => {
                    let features = FingerprintFeatures::from_bundle(&bundle);
                    self.probe_key = bundle.key.as_ref().map(|k| k.id.0);
                    let deplete = self.allow_depletion && features.needs_depletion(self.threshold);
                    self.features = Some(features);
                    if deplete {
                        let mut d = Depleter::new(self.name.clone(), self.target.clone(), DepletionMode::Sync)
                            .max_bundles(2 * u64::from(REFILL_BATCH));
                        d.on_start(ctx);
                        self.phase = Phase::Depleting(Box::new(d));
                    } else {
                        self.conclude(ctx);
                    }
                }
                Err(_) => {
                    ctx.fetch(&self.target);
                }
            },
            Phase::Depleting(d) => {
                d.on_fetch(ctx, request, target, result);
                if d.is_finished() {
                    let report = d.report().clone();
                    let mut summary = DepletionSummary::from(&report);
                    if let Some(id) = self.probe_key {
                        summary.count += 1;
                        summary.min_id = Some(summary.min_id.map_or(id, |m| m.min(id)));
                        summary.max_id = Some(summary.max_id.map_or(id, |m| m.max(id)));
                    }
                    if let Some(f) = self.features.as_mut() {
                        f.depletion = Some(summary);
                    }
                    self.depletion = Some(report);
                    self.conclude(ctx);
                }
            }
            Phase::Done => {}
        }
    }
}
