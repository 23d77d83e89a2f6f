use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::crypto::Envelope;
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChannelPayload {
    Envelope(Envelope),
    Server(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelEntry {
    pub time: SimTime,
    pub sender: String,
    pub receiver: String,
    pub payload: ChannelPayload,
}

/// Append-only record of everything that crossed the simulated network.
/// This is all a passive eavesdropper gets to see.
#[derive(Clone, Debug, Default)]
pub struct ChannelLog {
    entries: Vec<ChannelEntry>,
}

const KIND_ENVELOPE: u8 = 1;
const KIND_SERVER: u8 = 2;

impl ChannelLog {
    pub fn push(&mut self, entry: ChannelEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[ChannelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Envelopes exchanged between two parties, in transmission order.
    pub fn envelopes_between<'a>(&'a self, sender: &'a str, receiver: &'a str) -> impl Iterator<Item = &'a Envelope> + 'a {
        self.entries.iter().filter_map(move |e| match &e.payload {
            ChannelPayload::Envelope(env) if e.sender == sender && e.receiver == receiver => Some(env),
            _ => None,
        })
    }

    /// Framing: every record is a 4-byte big-endian length followed by
    /// `time:u64 | kind:u8 | sender | receiver | body`, where sender,
    /// receiver and body each carry their own 4-byte length prefix.
    pub fn write_framed<W: Write>(&self, mut w: W) -> io::Result<()> {
        for e in &self.entries {
            let mut rec = Vec::new();
            rec.extend_from_slice(&e.time.to_be_bytes());
            let (kind, body) = match &e.payload {
                ChannelPayload::Envelope(env) => (KIND_ENVELOPE, env.to_bytes()),
                ChannelPayload::Server(s) => (KIND_SERVER, s.as_bytes().to_vec()),
            };
            rec.push(kind);
            for part in [e.sender.as_bytes(), e.receiver.as_bytes(), &body] {
                rec.extend_from_slice(&(part.len() as u32).to_be_bytes());
                rec.extend_from_slice(part);
            }
            w.write_all(&(rec.len() as u32).to_be_bytes())?;
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn read_framed<R: Read>(mut r: R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut entries = Vec::new();
        loop {
            let mut len = [0u8; 4];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e),
            }
            let mut rec = vec![0u8; u32::from_be_bytes(len) as usize];
            r.read_exact(&mut rec)?;
            if rec.len() < 9 {
                return Err(bad("short record"));
            }
            let time = u64::from_be_bytes(rec[..8].try_into().expect("8 bytes"));
            let kind = rec[8];
            let mut rest = &rec[9..];
            let mut parts = Vec::with_capacity(3);
            for _ in 0..3 {
                if rest.len() < 4 {
                    return Err(bad("truncated field length"));
                }
                let n = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
                rest = &rest[4..];
                if rest.len() < n {
                    return Err(bad("truncated field"));
                }
                parts.push(rest[..n].to_vec());
                rest = &rest[n..];
            }
            let text = |b: Vec<u8>| String::from_utf8(b).map_err(|_| bad("non-utf8 name"));
            let body = parts.pop().expect("three parts");
            let receiver = text(parts.pop().expect("three parts"))?;
            let sender = text(parts.pop().expect("three parts"))?;
            let payload = match kind {
                KIND_ENVELOPE => ChannelPayload::Envelope(
                    Envelope::from_bytes(&body).map_err(|e| bad(&e.to_string()))?,
                ),
                KIND_SERVER => ChannelPayload::Server(text(body)?),
                _ => return Err(bad("unknown record kind")),
            };
            entries.push(ChannelEntry {
                time,
                sender,
                receiver,
                payload,
            });
        }
        Ok(Self { entries })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRecord {
    pub t: SimTime,
    pub actor: String,
    pub kind: String,
    #[serde(flatten)]
    pub fields: Map<String, Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimelineConfig {
    pub enabled: bool,
    /// Per-fetch records dominate long runs; off by default.
    pub record_fetches: bool,
}

impl Default for TimelineConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            record_fetches: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Timeline {
    config: TimelineConfig,
    records: Vec<TimelineRecord>,
}

impl Timeline {
    pub fn new(config: TimelineConfig) -> Self {
        Self {
            config,
            records: Vec::new(),
        }
    }

    pub fn config(&self) -> TimelineConfig {
        self.config
    }

    pub fn push(&mut self, t: SimTime, actor: impl Into<String>, kind: &str, fields: Value) {
        if !self.config.enabled {
            return;
        }
        let fields = match fields {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        self.records.push(TimelineRecord {
            t,
            actor: actor.into(),
            kind: kind.to_string(),
            fields,
        });
    }

    pub fn records(&self) -> &[TimelineRecord] {
        &self.records
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TimelineRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = Vec::new();
        self.write_ndjson(&mut out).expect("writing to a Vec cannot fail");
        String::from_utf8(out).expect("serde_json emits utf-8")
    }
}
