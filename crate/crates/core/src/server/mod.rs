//! Prekey distribution server: device registry, bundle handout, low-watermark
//! notifications, overload behaviour and countermeasure switches.

mod bundle;
mod config;
mod jid;
mod store;

pub use bundle::{BundleParseError, OneTimePrekeyPublic, PrekeyBundle, KEY_TYPE_DJB};
pub use config::{ConfigError, FaultModes, RateLimit, ServerConfig};
pub use jid::{Jid, JidError, DEFAULT_SERVER_NAME};
pub use store::{
    DeviceRecord, DeviceRole, DeviceStats, DeviceUpload, Notification, PrekeyServer, ServerError,
    ServerSnapshot, UploadAck,
};

#[cfg(test)]
mod tests;
