use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::time::{from_secs_f64, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerState {
    Standby,
    ScreenOn,
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Wifi,
    Cellular,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown device state {0:?} (expected standby, screen-on or offline followed by -wifi or -4g)")]
pub struct StateParseError(pub String);

/// A powered-on condition a latency cell is defined for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct DeviceCondition {
    pub power: PowerState,
    pub link: Link,
}

impl DeviceCondition {
    pub const ALL: [DeviceCondition; 4] = [
        DeviceCondition { power: PowerState::Standby, link: Link::Wifi },
        DeviceCondition { power: PowerState::Standby, link: Link::Cellular },
        DeviceCondition { power: PowerState::ScreenOn, link: Link::Wifi },
        DeviceCondition { power: PowerState::ScreenOn, link: Link::Cellular },
    ];

    pub fn new(power: PowerState, link: Link) -> Self {
        Self { power, link }
    }
}

impl fmt::Display for DeviceCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.power {
            PowerState::Standby => "standby",
            PowerState::ScreenOn => "screen-on",
            PowerState::Offline => "offline",
        };
        let l = match self.link {
            Link::Wifi => "wifi",
            Link::Cellular => "4g",
        };
        write!(f, "{p}-{l}")
    }
}

impl From<DeviceCondition> for String {
    fn from(c: DeviceCondition) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for DeviceCondition {
    type Error = StateParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for DeviceCondition {
    type Err = StateParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase().replace('_', "-");
        if lower == "offline" {
            return Ok(Self::new(PowerState::Offline, Link::Wifi));
        }
        let (power, rest) = if let Some(rest) = lower.strip_prefix("standby-") {
            (PowerState::Standby, rest)
        } else if let Some(rest) = lower.strip_prefix("screen-on-") {
            (PowerState::ScreenOn, rest)
        } else if let Some(rest) = lower.strip_prefix("offline-") {
            (PowerState::Offline, rest)
        } else {
            return Err(StateParseError(s.to_string()));
        };
        let link = match rest {
            "wifi" => Link::Wifi,
            "4g" | "cellular" | "lte" => Link::Cellular,
            _ => return Err(StateParseError(s.to_string())),
        };
        Ok(Self { power, link })
    }
}

/// Log-normal delay in seconds: `ln D ~ N(mu, sigma^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalDelay {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalDelay {
    pub fn from_median_secs(median: f64, sigma: f64) -> Self {
        Self { mu: median.ln(), sigma }
    }

    pub fn mean_secs(&self) -> f64 {
        (self.mu + self.sigma * self.sigma / 2.0).exp()
    }

    pub fn median_secs(&self) -> f64 {
        self.mu.exp()
    }

    pub fn quantile_secs(&self, q: f64) -> f64 {
        let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(q);
        (self.mu + self.sigma * z).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimTime {
        let d = LogNormal::new(self.mu, self.sigma).expect("sigma is finite and non-negative");
        from_secs_f64(d.sample(rng)).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyCell {
    pub state: DeviceCondition,
    pub delay: LogNormalDelay,
}

/// Time from a low-watermark notification to the refill arriving at the
/// server, per powered-on condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<LatencyCell>", into = "Vec<LatencyCell>")]
pub struct LatencyModel {
    cells: BTreeMap<DeviceCondition, LogNormalDelay>,
}

impl From<Vec<LatencyCell>> for LatencyModel {
    fn from(cells: Vec<LatencyCell>) -> Self {
        Self {
            cells: cells.into_iter().map(|c| (c.state, c.delay)).collect(),
        }
    }
}

impl From<LatencyModel> for Vec<LatencyCell> {
    fn from(m: LatencyModel) -> Self {
        m.cells
            .into_iter()
            .map(|(state, delay)| LatencyCell { state, delay })
            .collect()
    }
}

impl LatencyModel {
    pub fn uniform(delay: LogNormalDelay) -> Self {
        Self {
            cells: DeviceCondition::ALL.iter().map(|c| (*c, delay)).collect(),
        }
    }

    pub fn set(&mut self, state: DeviceCondition, delay: LogNormalDelay) {
        self.cells.insert(state, delay);
    }

    pub fn get(&self, state: DeviceCondition) -> Option<LogNormalDelay> {
        self.cells.get(&state).copied()
    }

    pub fn cells(&self) -> impl Iterator<Item = (DeviceCondition, LogNormalDelay)> + '_ {
        self.cells.iter().map(|(k, v)| (*k, *v))
    }

    /// Samples a refill delay; `None` for conditions without a cell
    /// (offline devices never refill).
    pub fn sample<R: Rng + ?Sized>(&self, state: DeviceCondition, rng: &mut R) -> Option<SimTime> {
        self.get(state).map(|d| d.sample(rng))
    }
}
