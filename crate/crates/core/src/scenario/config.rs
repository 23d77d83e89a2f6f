use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::attack::DepletionMode;
use crate::device::{DeviceCondition, DeviceProfile, OsKind, PhoneModel};
use crate::server::{ConfigError, Jid, RateLimit, ServerConfig, DEFAULT_SERVER_NAME};
use crate::simnet::{DailySchedule, DailyWindow, NetworkModel, SimError};
use crate::time::{SimTime, HOUR, MINUTE};

pub const SCHEMA: &str = "prekeysim/1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema {found:?}, expected {SCHEMA:?}")]
    Schema { found: String },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("server: {0}")]
    Server(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
}

impl ScenarioError {
    /// Configuration problems are detected before anything runs.
    pub fn is_config_error(&self) -> bool {
        !matches!(self, ScenarioError::Sim(_))
    }

    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub(crate) mod duration {
    use super::*;

    pub fn parse(s: &str) -> Result<SimTime, String> {
        humantime::parse_duration(s)
            .map(|d| d.as_millis() as SimTime)
            .map_err(|e| format!("invalid duration {s:?}: {e}"))
    }

    pub fn format(t: SimTime) -> String {
        humantime::format_duration(std::time::Duration::from_millis(t)).to_string()
    }

    pub fn serialize<S: Serializer>(t: &SimTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimTime, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(t: &Option<SimTime>, s: S) -> Result<S::Ok, S::Error> {
            match t {
                Some(t) => s.serialize_str(&format(*t)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<SimTime>, D::Error> {
            let s = Option::<String>::deserialize(d)?;
            s.map(|s| parse(&s).map_err(serde::de::Error::custom)).transpose()
        }
    }
}

/// Parses `phone`, `phone:device` or a full `phone:device@server`.
pub fn parse_target(s: &str) -> Result<Jid, String> {
    let full = if s.contains('@') {
        s.to_string()
    } else {
        format!("{s}@{DEFAULT_SERVER_NAME}")
    };
    full.parse::<Jid>().map_err(|e| e.to_string())
}

fn parse_time_of_day(s: &str) -> Result<SimTime, String> {
    let (h, m) = s
        .split_once(':')
        .ok_or_else(|| format!("expected HH:MM, got {s:?}"))?;
    let h: u64 = h.parse().map_err(|_| format!("bad hour in {s:?}"))?;
    let m: u64 = m.parse().map_err(|_| format!("bad minute in {s:?}"))?;
    if h > 24 || m > 59 || (h == 24 && m > 0) {
        return Err(format!("time of day out of range: {s:?}"));
    }
    Ok(h * HOUR + m * MINUTE)
}

/// A device profile: either one of the shipped names or a full table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Named(OsKind),
    Custom(Box<DeviceProfile>),
}

impl ProfileSpec {
    pub fn resolve(&self) -> DeviceProfile {
        match self {
            ProfileSpec::Named(os) => DeviceProfile::for_os(*os),
            ProfileSpec::Custom(p) => (**p).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleWindow {
    pub from: String,
    pub to: String,
    pub state: DeviceCondition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub phone: String,
    pub profile: ProfileSpec,
    /// Phone model whose calibrated refill latency the device uses.
    #[serde(default)]
    pub model: Option<PhoneModel>,
    #[serde(default = "default_state")]
    pub state: DeviceCondition,
    /// Daily windows overriding `state`.
    #[serde(default)]
    pub schedule: Vec<ScheduleWindow>,
    #[serde(default, with = "duration::option")]
    pub reply_after: Option<SimTime>,
    /// Refills forced before the scenario starts.
    #[serde(default)]
    pub prior_refills: u32,
    #[serde(default)]
    pub unlinked: bool,
}

fn default_state() -> DeviceCondition {
    DeviceCondition::ALL[0]
}

impl DeviceConfig {
    pub fn daily_schedule(&self) -> Result<Option<DailySchedule>, String> {
        if self.schedule.is_empty() {
            return Ok(None);
        }
        let windows = self
            .schedule
            .iter()
            .map(|w| {
                Ok(DailyWindow {
                    from: parse_time_of_day(&w.from)?,
                    to: parse_time_of_day(&w.to)?,
                    condition: w.state,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Some(DailySchedule {
            otherwise: self.state,
            windows,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    #[default]
    Sync,
    Async,
}

/// One step of the attacker plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackOp {
    QueryDevices {
        phone: String,
        #[serde(default, with = "duration")]
        at: SimTime,
    },
    Deplete {
        target: String,
        #[serde(default)]
        mode: ModeName,
        #[serde(default)]
        rate: Option<u32>,
        #[serde(default, with = "duration")]
        at: SimTime,
        /// Keep fetching after the store is empty, until `until` or the horizon.
        #[serde(default)]
        continuous: bool,
        #[serde(default, with = "duration::option")]
        until: Option<SimTime>,
    },
    Fingerprint {
        target: String,
        #[serde(default, with = "duration")]
        at: SimTime,
        #[serde(default = "yes")]
        allow_depletion: bool,
    },
    Monitor {
        target: String,
        #[serde(default, with = "duration")]
        at: SimTime,
        #[serde(default, with = "duration::option")]
        poll_interval: Option<SimTime>,
    },
    Dos {
        target: String,
        rate: u32,
        #[serde(default, with = "duration")]
        at: SimTime,
        #[serde(with = "duration")]
        duration: SimTime,
    },
    PfsExperiment {
        model: PhoneModel,
        state: DeviceCondition,
        #[serde(default = "default_trials")]
        trials: u32,
        #[serde(default = "default_cycles")]
        cycles: u32,
    },
    Table2 {
        #[serde(default = "default_trials")]
        trials: u32,
        #[serde(default = "default_cycles")]
        cycles: u32,
    },
}

fn yes() -> bool {
    true
}

fn default_trials() -> u32 {
    500
}

fn default_cycles() -> u32 {
    100
}

impl AttackOp {
    pub fn kind(&self) -> &'static str {
        match self {
            AttackOp::QueryDevices { .. } => "query-devices",
            AttackOp::Deplete { .. } => "deplete",
            AttackOp::Fingerprint { .. } => "fingerprint",
            AttackOp::Monitor { .. } => "monitor",
            AttackOp::Dos { .. } => "dos",
            AttackOp::PfsExperiment { .. } => "pfs-experiment",
            AttackOp::Table2 { .. } => "table2",
        }
    }

    pub fn depletion_mode(mode: ModeName, rate: Option<u32>) -> Result<DepletionMode, String> {
        match (mode, rate) {
            (ModeName::Sync, None) => Ok(DepletionMode::Sync),
            (ModeName::Sync, Some(_)) => Err("rate only applies to async depletion".into()),
            (ModeName::Async, Some(0)) => Err("rate must be positive".into()),
            (ModeName::Async, Some(rate)) => Ok(DepletionMode::Async { rate }),
            (ModeName::Async, None) => Ok(DepletionMode::Async { rate: 100 }),
        }
    }
}

/// Honest contacts opening conversations with one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactsConfig {
    pub target: String,
    pub count: u32,
    #[serde(default, with = "duration")]
    pub start: SimTime,
    /// Sessions are spread evenly (with jitter) over this span; defaults to
    /// the rest of the horizon.
    #[serde(default, with = "duration::option")]
    pub span: Option<SimTime>,
    #[serde(default = "one")]
    pub pre_reply: u32,
    #[serde(default)]
    pub post_reply: u32,
    #[serde(default, with = "duration")]
    pub max_think_time: SimTime,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitConfig {
    pub bundles: u32,
    #[serde(with = "duration")]
    pub window: SimTime,
}

impl From<RateLimitConfig> for RateLimit {
    fn from(r: RateLimitConfig) -> Self {
        RateLimit {
            bundles_per_window: r.bundles,
            window_ms: r.window,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnDemandRotation {
    #[serde(with = "duration")]
    pub min_validity: SimTime,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Countermeasures {
    pub rate_limit: Option<RateLimitConfig>,
    #[serde(with = "duration::option")]
    pub signed_lifetime: Option<SimTime>,
    pub on_demand_rotation: Option<OnDemandRotation>,
    pub hash_key_ids: bool,
    pub uniform_initial_batch: Option<u32>,
    pub pfs_ui_notification: bool,
}

impl Countermeasures {
    pub fn any(&self) -> bool {
        *self != Countermeasures::default()
    }

    /// Names of the enabled countermeasures.
    pub fn enabled(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.rate_limit.is_some() {
            out.push("rate_limit");
        }
        if self.signed_lifetime.is_some() {
            out.push("signed_lifetime");
        }
        if self.on_demand_rotation.is_some() {
            out.push("on_demand_rotation");
        }
        if self.hash_key_ids {
            out.push("hash_key_ids");
        }
        if self.uniform_initial_batch.is_some() {
            out.push("uniform_initial_batch");
        }
        if self.pfs_ui_notification {
            out.push("pfs_ui_notification");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(with = "duration")]
    pub horizon: SimTime,
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default)]
    pub countermeasures: Countermeasures,
    /// Also run the scenario with every countermeasure off and report deltas.
    #[serde(default = "yes")]
    pub compare_baseline: bool,
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub contacts: Vec<ContactsConfig>,
    #[serde(default)]
    pub attacks: Vec<AttackOp>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        #[derive(Deserialize)]
        struct Header {
            schema: Option<String>,
        }
        // Check the header first so an old or foreign file gets a clear message
        // instead of a list of unknown fields.
        if let Ok(h) = toml::from_str::<Header>(text) {
            match h.schema {
                Some(s) if s == SCHEMA => {}
                Some(found) => return Err(ScenarioError::Schema { found }),
                None => return Err(ScenarioError::invalid("schema", format!("missing, expected {SCHEMA:?}"))),
            }
        }
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema != SCHEMA {
            return Err(ScenarioError::Schema {
                found: self.schema.clone(),
            });
        }
        if self.horizon == 0 {
            return Err(ScenarioError::invalid("horizon", "must be positive"));
        }
        self.server.validate()?;
        let phones: Vec<&str> = self.devices.iter().map(|d| d.phone.as_str()).collect();
        for (i, d) in self.devices.iter().enumerate() {
            let field = format!("devices[{i}]");
            if d.phone.is_empty() || !d.phone.bytes().all(|b| b.is_ascii_digit()) {
                return Err(ScenarioError::invalid(format!("{field}.phone"), "must be digits"));
            }
            let profile = d.profile.resolve();
            if profile.os.is_companion() && !self.devices[..i].iter().any(|m| m.phone == d.phone && !m.profile.resolve().os.is_companion()) {
                return Err(ScenarioError::invalid(
                    format!("{field}.profile"),
                    "a companion device needs a main device listed before it",
                ));
            }
            d.daily_schedule()
                .map_err(|m| ScenarioError::invalid(format!("{field}.schedule"), m))?;
        }
        let check_target = |field: String, t: &str| -> Result<(), ScenarioError> {
            let jid = parse_target(t).map_err(|m| ScenarioError::invalid(field.clone(), m))?;
            if !phones.contains(&jid.phone.as_str()) {
                return Err(ScenarioError::invalid(field, format!("no device with phone {}", jid.phone)));
            }
            Ok(())
        };
        for (i, c) in self.contacts.iter().enumerate() {
            check_target(format!("contacts[{i}].target"), &c.target)?;
        }
        for (i, op) in self.attacks.iter().enumerate() {
            let field = format!("attacks[{i}]");
            match op {
                AttackOp::Deplete { target, mode, rate, .. } => {
                    check_target(format!("{field}.target"), target)?;
                    AttackOp::depletion_mode(*mode, *rate)
                        .map_err(|m| ScenarioError::invalid(format!("{field}.rate"), m))?;
                }
                AttackOp::Fingerprint { target, .. } | AttackOp::Monitor { target, .. } => {
                    check_target(format!("{field}.target"), target)?
                }
                AttackOp::Dos { target, rate, duration, .. } => {
                    check_target(format!("{field}.target"), target)?;
                    if *rate == 0 || *duration == 0 {
                        return Err(ScenarioError::invalid(field, "rate and duration must be positive"));
                    }
                }
                AttackOp::PfsExperiment { trials, cycles, .. } | AttackOp::Table2 { trials, cycles } => {
                    if *trials == 0 || *cycles == 0 {
                        return Err(ScenarioError::invalid(field, "trials and cycles must be positive"));
                    }
                }
                AttackOp::QueryDevices { .. } => {}
            }
        }
        if let Some(r) = self.countermeasures.rate_limit {
            if r.bundles == 0 || r.window == 0 {
                return Err(ScenarioError::invalid("countermeasures.rate_limit", "needs a positive budget and window"));
            }
        }
        if self.countermeasures.signed_lifetime == Some(0) {
            return Err(ScenarioError::invalid("countermeasures.signed_lifetime", "must be positive"));
        }
        if self.countermeasures.uniform_initial_batch == Some(0) {
            return Err(ScenarioError::invalid("countermeasures.uniform_initial_batch", "must be positive"));
        }
        Ok(())
    }

    /// The same scenario with every countermeasure switched off.
    pub fn baseline(&self) -> Self {
        Self {
            countermeasures: Countermeasures::default(),
            compare_baseline: false,
            ..self.clone()
        }
    }
}
