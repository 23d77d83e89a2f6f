//! Behavioural models of the official clients: id initialization, batch
//! sizes, refill latency, signed-prekey rotation and session replies.

mod calibration;
mod client;
mod latency;
mod profile;

pub use calibration::{
    calibrate_mu, empty_fraction, expected_excess, ModelParseError, PhoneModel,
    CALIBRATION_FETCH_CYCLE_SECS, CALIBRATION_SIGMA,
};
pub use client::{
    CostCounters, Device, DeviceError, DeviceOptions, ReceiveOutcome, RotationKind,
    BATTERY_PERCENT_PER_REFILL, ONE_TIME_PREKEY_WIRE_BYTES, REFILL_RETRY_DELAY, REFILL_UPLOAD_BYTES,
};
pub use latency::{
    DeviceCondition, LatencyCell, LatencyModel, Link, LogNormalDelay, PowerState, StateParseError,
};
pub use profile::{
    DeviceProfile, IdInit, OsKind, ProfileParseError, RegistrationInit, COMPANION_MEDIAN_DELAY_SECS,
    DEFAULT_SIGNED_ROTATION, RANDOM_ID_LIMIT, REFILL_BATCH, REFILL_TRIGGER, WEB_REGISTRATION_MASK,
};
