use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SERVER_NAME: &str = "s.whatsapp.net";

/// Jabber-style device address. Device 0 is the main device.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Jid {
    pub phone: String,
    pub device: u32,
    pub server: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JidError {
    #[error("missing '@' in jid {0:?}")]
    MissingServer(String),
    #[error("phone number must be digits, got {0:?}")]
    BadPhone(String),
    #[error("device id must be a non-negative integer, got {0:?}")]
    BadDevice(String),
}

impl Jid {
    pub fn new(phone: impl Into<String>, device: u32) -> Self {
        Self {
            phone: phone.into(),
            device,
            server: DEFAULT_SERVER_NAME.to_string(),
        }
    }

    pub fn main(phone: impl Into<String>) -> Self {
        Self::new(phone, 0)
    }

    pub fn is_main(&self) -> bool {
        self.device == 0
    }
}

impl fmt::Display for Jid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.device == 0 {
            write!(f, "{}@{}", self.phone, self.server)
        } else {
            write!(f, "{}:{}@{}", self.phone, self.device, self.server)
        }
    }
}

impl FromStr for Jid {
    type Err = JidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (user, server) = s
            .split_once('@')
            .ok_or_else(|| JidError::MissingServer(s.to_string()))?;
        let (phone, device) = match user.split_once(':') {
            Some((p, d)) => (
                p,
                d.parse::<u32>()
                    .map_err(|_| JidError::BadDevice(d.to_string()))?,
            ),
            None => (user, 0),
        };
        if phone.is_empty() || !phone.bytes().all(|b| b.is_ascii_digit()) {
            return Err(JidError::BadPhone(phone.to_string()));
        }
        Ok(Self {
            phone: phone.to_string(),
            device,
            server: server.to_string(),
        })
    }
}

impl From<Jid> for String {
    fn from(j: Jid) -> String {
        j.to_string()
    }
}

impl TryFrom<String> for Jid {
    type Error = JidError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}
