use std::collections::HashSet;

use super::*;
use crate::crypto::compromise_oracle;
use crate::device::{DeviceCondition, DeviceProfile, Link, PhoneModel, PowerState};
use crate::server::{Jid, PrekeyBundle, ServerError};
use crate::time::{HOUR, SECOND};

/// Fetches back to back until the first bundle without a one-time prekey.
struct Drain {
    name: String,
    target: Jid,
    ids: Vec<u32>,
    done_at: Option<u64>,
}

impl Drain {
    fn new(target: Jid) -> Self {
        Self {
            name: "drain".into(),
            target,
            ids: Vec::new(),
            done_at: None,
        }
    }
}

impl Agent for Drain {
    fn name(&self) -> &str {
        &self.name
    }
    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.fetch(&self.target);
    }
    fn on_fetch(&mut self, ctx: &mut Ctx<'_>, _r: RequestId, _t: &Jid, result: Result<PrekeyBundle, ServerError>) {
        match result.ok().and_then(|b| b.key) {
            Some(k) => {
                self.ids.push(k.id.0);
                ctx.fetch(&self.target);
            }
            None => self.done_at = Some(ctx.now()),
        }
    }
}

fn offline() -> DeviceCondition {
    DeviceCondition::new(PowerState::Offline, Link::Wifi)
}

#[test]
fn empty_scenario_has_empty_timeline() {
    let mut sim = Sim::new(SimConfig::seeded(1));
    sim.run_until(HOUR).unwrap();
    assert!(sim.timeline().is_empty());
    assert!(sim.channel_log().is_empty());
}

#[test]
fn sync_drain_of_offline_device_matches_closed_form() {
    let mut sim = Sim::new(SimConfig::seeded(2));
    let jid = sim
        .add_device(DeviceSpec::new("100", DeviceProfile::android()).condition(offline()))
        .unwrap();
    let id = sim.add_agent(Box::new(Drain::new(jid.clone())), 0).unwrap();
    sim.run_until(HOUR).unwrap();
    let drain = sim.agent::<Drain>(id).unwrap();
    assert_eq!(drain.ids.len(), 812);
    assert_eq!(drain.ids.iter().collect::<HashSet<_>>().len(), 812);
    // 812 keyed responses at 50 ms each; the empty response comes one round later.
    assert_eq!(drain.done_at, Some(813 * 50));
    assert!(sim.network().sync_depletion_secs(812) - 40.6 < 1e-9);
}

#[test]
fn online_device_refills_after_watermark() {
    let mut sim = Sim::new(SimConfig::seeded(3));
    let jid = sim
        .add_device(DeviceSpec::phone_model("200", PhoneModel::GalaxyA54))
        .unwrap();
    sim.add_agent(Box::new(Drain::new(jid.clone())), 0).unwrap();
    sim.run_until(10 * 60 * SECOND).unwrap();
    let refills: Vec<_> = sim.timeline().of_kind("refill").collect();
    assert!(!refills.is_empty());
    assert_eq!(refills[0].fields["stored"], 812);
    assert_eq!(sim.timeline().of_kind("notification").count(), refills.len());
}

#[test]
fn same_seed_same_outputs() {
    let run = |seed| {
        let mut sim = Sim::new(SimConfig {
            seed,
            timeline: TimelineConfig {
                enabled: true,
                record_fetches: true,
            },
            ..Default::default()
        });
        let jid = sim
            .add_device(DeviceSpec::phone_model("300", PhoneModel::IphoneSe).reply_after(5 * SECOND))
            .unwrap();
        sim.add_agent(Box::new(Drain::new(jid.clone())), 0).unwrap();
        sim.add_agent(Box::new(Initiator::new("alice", jid).messages(2, 1)), 20 * SECOND)
            .unwrap();
        sim.run_until(5 * 60 * SECOND).unwrap();
        let mut log = Vec::new();
        sim.channel_log().write_framed(&mut log).unwrap();
        (sim.timeline().to_ndjson(), log)
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9).0, run(10).0);
}

#[test]
fn scheduling_in_the_past_is_an_error() {
    let mut sim = Sim::new(SimConfig::seeded(4));
    let jid = sim.add_device(DeviceSpec::new("400", DeviceProfile::web().clone())).err();
    assert!(jid.is_some(), "companion without main device must be rejected");
    let jid = sim.add_device(DeviceSpec::new("400", DeviceProfile::android())).unwrap();
    sim.run_until(10 * SECOND).unwrap();
    assert!(matches!(
        sim.schedule_condition(&jid, SECOND, offline()),
        Err(SimError::ScheduleInPast { .. })
    ));
}

#[test]
fn conversation_is_logged_and_oracle_reads_only_pre_reply_messages() {
    let mut sim = Sim::new(SimConfig::seeded(5));
    let jid = sim
        .add_device(DeviceSpec::new("500", DeviceProfile::android()).condition(offline()).reply_after(SECOND))
        .unwrap();
    let drain = sim.add_agent(Box::new(Drain::new(jid.clone())), 0).unwrap();
    let alice = sim
        .add_agent(Box::new(Initiator::new("alice", jid.clone()).messages(3, 2)), 60 * SECOND)
        .unwrap();
    sim.schedule_condition(&jid, 120 * SECOND, DeviceCondition::ALL[0]).unwrap();
    sim.run_until(10 * 60 * SECOND).unwrap();
    assert_eq!(sim.agent::<Drain>(drain).unwrap().ids.len(), 812);
    let rec = sim.agent::<Initiator>(alice).unwrap().record().clone();
    assert_eq!(rec.bundle_had_one_time_prekey, Some(false));
    assert!(rec.reply_at.unwrap() > 120 * SECOND);
    assert_eq!(rec.post_reply_sent, 2);

    let sent: Vec<_> = sim
        .channel_log()
        .envelopes_between("alice", &jid.to_string())
        .cloned()
        .collect();
    assert_eq!(sent.len(), 5);
    let device = sim.device(&jid).unwrap();
    let out = compromise_oracle(&sent, device.identity(), &device.held_signed_prekeys()).unwrap();
    let decrypted: Vec<bool> = out.iter().map(|o| o.is_decrypted()).collect();
    assert_eq!(decrypted, [true, true, true, false, false]);
    assert_eq!(sim.metrics().sessions_without_otpk, 1);
}

#[test]
fn reconnect_redelivers_pending_notification() {
    let mut sim = Sim::new(SimConfig::seeded(6));
    let jid = sim
        .add_device(DeviceSpec::new("600", DeviceProfile::iphone()).condition(offline()))
        .unwrap();
    sim.add_agent(Box::new(Drain::new(jid.clone())), 0).unwrap();
    sim.schedule_condition(&jid, 2 * 60 * SECOND, DeviceCondition::ALL[0]).unwrap();
    sim.run_until(HOUR).unwrap();
    let n: Vec<_> = sim.timeline().of_kind("notification").collect();
    assert_eq!(n.len(), 1);
    assert_eq!(n[0].fields["redelivery"], true);
    assert!(n[0].t == 2 * 60 * SECOND);
    assert_eq!(sim.server().store_size(&jid), Some(812));
}

#[test]
fn channel_log_framing_round_trips() {
    let mut sim = Sim::new(SimConfig::seeded(7));
    let jid = sim
        .add_device(DeviceSpec::new("700", DeviceProfile::android()).reply_after(SECOND))
        .unwrap();
    sim.add_agent(Box::new(Initiator::new("alice", jid).messages(2, 2)), 0).unwrap();
    sim.run_until(60 * SECOND).unwrap();
    let mut bytes = Vec::new();
    sim.channel_log().write_framed(&mut bytes).unwrap();
    let back = ChannelLog::read_framed(bytes.as_slice()).unwrap();
    assert_eq!(back.entries(), sim.channel_log().entries());
    assert_eq!(back.len(), 6);
}

#[test]
fn timeline_ndjson_lines_parse() {
    let mut sim = Sim::new(SimConfig::seeded(8));
    let jid = sim.add_device(DeviceSpec::new("800", DeviceProfile::android())).unwrap();
    sim.add_agent(Box::new(Drain::new(jid)), 0).unwrap();
    sim.run_until(60 * SECOND).unwrap();
    for line in sim.timeline().to_ndjson().lines() {
        let r: TimelineRecord = serde_json::from_str(line).unwrap();
        assert!(!r.kind.is_empty());
    }
}

#[test]
fn parallel_drain_hands_out_each_key_once() {
    let mut sim = Sim::new(SimConfig::seeded(9));
    let jid = sim
        .add_device(DeviceSpec::new("900", DeviceProfile::android()).condition(offline()))
        .unwrap();
    let per_worker = drain_concurrently(sim.server(), &jid, 8, 1);
    let all: Vec<_> = per_worker.into_iter().flatten().collect();
    assert_eq!(all.len(), 812);
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 812);
}
