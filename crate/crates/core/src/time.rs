//! Simulated time: integer milliseconds since scenario start.

pub type SimTime = u64;

pub const MILLISECOND: SimTime = 1;
pub const SECOND: SimTime = 1_000;
pub const MINUTE: SimTime = 60 * SECOND;
pub const HOUR: SimTime = 60 * MINUTE;
pub const DAY: SimTime = 24 * HOUR;

pub fn as_secs_f64(t: SimTime) -> f64 {
    t as f64 / SECOND as f64
}

pub fn from_secs_f64(secs: f64) -> SimTime {
    (secs * SECOND as f64).round().max(0.0) as SimTime
}
