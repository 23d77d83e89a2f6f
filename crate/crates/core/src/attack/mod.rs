//! Attacker tooling: depletion, fingerprinting, activity and online monitoring,
//! and the experiment drivers built on top of the simulator.

mod activity;
mod deplete;
pub mod experiments;
mod fingerprint;
mod monitor;

pub use activity::{activity_score, ActivityScore};
pub use deplete::{Depleter, DepletionMode, DepletionReport};
pub use fingerprint::{
    classify, DepletionSummary, Evidence, FingerprintFeatures, FingerprintVerdict, Fingerprinter,
    RANDOM_ID_THRESHOLD,
};
pub use monitor::{
    default_response_window, Basis, InferredState, Monitor, MonitorConfig, Observation, OnlineTimeline,
};
