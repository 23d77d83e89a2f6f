//! Scenario files and the runner that executes them.

mod config;
mod run;

pub use config::{
    parse_target, AttackOp, ContactsConfig, Countermeasures, DeviceConfig, ModeName, OnDemandRotation, ProfileSpec,
    RateLimitConfig, ScenarioConfig, ScenarioError, ScheduleWindow, SCHEMA,
};
pub use run::{
    run_scenario, AttackEntry, AttackOutcome, ContactSummary, DeviceReport, MetricDelta, MetricsSummary, PfsNotice,
    RunOutput, RunReport,
};

/// Parses a human-readable duration such as `90s`, `5m` or `2days` into
/// simulated milliseconds.
pub fn parse_duration(s: &str) -> Result<crate::time::SimTime, String> {
    config::duration::parse(s)
}
