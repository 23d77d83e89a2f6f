use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::latency::{LatencyModel, LogNormalDelay};
use crate::time::{SimTime, DAY};

pub const REFILL_BATCH: u32 = 812;
pub const REFILL_TRIGGER: u32 = 10;
pub const DEFAULT_SIGNED_ROTATION: SimTime = 30 * DAY;
/// Upper bound (exclusive) for randomly initialized key ids.
pub const RANDOM_ID_LIMIT: u32 = 1 << 24;
pub const WEB_REGISTRATION_MASK: u32 = 0x3FFF;
/// Median refill delay of desktop and web clients, seconds.
pub const COMPANION_MEDIAN_DELAY_SECS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum OsKind {
    Android,
    Iphone,
    Web,
    DesktopMac,
    DesktopWindows,
}

impl OsKind {
    pub const ALL: [OsKind; 5] = [
        OsKind::Android,
        OsKind::Iphone,
        OsKind::Web,
        OsKind::DesktopMac,
        OsKind::DesktopWindows,
    ];

    pub fn is_companion(self) -> bool {
        matches!(self, OsKind::Web | OsKind::DesktopMac | OsKind::DesktopWindows)
    }

    pub fn name(self) -> &'static str {
        match self {
            OsKind::Android => "android",
            OsKind::Iphone => "iphone",
            OsKind::Web => "web",
            OsKind::DesktopMac => "macos",
            OsKind::DesktopWindows => "windows",
        }
    }
}

impl fmt::Display for OsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown profile {0:?} (expected android, iphone, web, macos or windows)")]
pub struct ProfileParseError(pub String);

impl From<OsKind> for String {
    fn from(os: OsKind) -> String {
        os.name().to_string()
    }
}

impl TryFrom<String> for OsKind {
    type Error = ProfileParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for OsKind {
    type Err = ProfileParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "android" => Ok(OsKind::Android),
            "iphone" | "ios" => Ok(OsKind::Iphone),
            "web" => Ok(OsKind::Web),
            "macos" | "mac" | "desktop-mac" => Ok(OsKind::DesktopMac),
            "windows" | "desktop-windows" => Ok(OsKind::DesktopWindows),
            _ => Err(ProfileParseError(s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrationInit {
    Random,
    RandomMasked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdInit {
    Zero,
    One,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub os: OsKind,
    pub registration_init: RegistrationInit,
    pub signed_id_init: IdInit,
    pub one_time_id_init: IdInit,
    pub initial_batch: u32,
    pub refill_batch: u32,
    pub refill_trigger: u32,
    pub id_skip_per_refill: u32,
    /// `None` never rotates the signed prekey.
    pub signed_rotation_interval: Option<SimTime>,
    pub latency: LatencyModel,
}

impl DeviceProfile {
    pub fn for_os(os: OsKind) -> Self {
        let companion_latency =
            LatencyModel::uniform(LogNormalDelay::from_median_secs(COMPANION_MEDIAN_DELAY_SECS, 0.3));
        let (registration_init, signed_id_init, one_time_id_init, initial_batch, skip) = match os {
            OsKind::Android => (RegistrationInit::Random, IdInit::Zero, IdInit::Random, 812, 2),
            OsKind::Iphone => (RegistrationInit::Random, IdInit::Random, IdInit::One, 812, 0),
            OsKind::Web => (RegistrationInit::RandomMasked, IdInit::One, IdInit::One, 200, 0),
            OsKind::DesktopMac => (RegistrationInit::Random, IdInit::Random, IdInit::One, 200, 0),
            OsKind::DesktopWindows => (RegistrationInit::Random, IdInit::One, IdInit::One, 50, 0),
        };
        let latency = match os {
            OsKind::Android => super::PhoneModel::GalaxyA54.latency_model(),
            OsKind::Iphone => super::PhoneModel::IphoneSe.latency_model(),
            _ => companion_latency,
        };
        Self {
            os,
            registration_init,
            signed_id_init,
            one_time_id_init,
            initial_batch,
            refill_batch: REFILL_BATCH,
            refill_trigger: REFILL_TRIGGER,
            id_skip_per_refill: skip,
            signed_rotation_interval: Some(DEFAULT_SIGNED_ROTATION),
            latency,
        }
    }

    pub fn android() -> Self {
        Self::for_os(OsKind::Android)
    }

    pub fn iphone() -> Self {
        Self::for_os(OsKind::Iphone)
    }

    pub fn web() -> Self {
        Self::for_os(OsKind::Web)
    }

    pub fn desktop_mac() -> Self {
        Self::for_os(OsKind::DesktopMac)
    }

    pub fn desktop_windows() -> Self {
        Self::for_os(OsKind::DesktopWindows)
    }

    /// Highest one-time id after `refills` refills, given the first id.
    pub fn max_one_time_id(&self, first_id: u32, refills: u32) -> u32 {
        first_id + self.initial_batch + refills * (self.refill_batch + self.id_skip_per_refill) - 1
    }
}
