//! Discrete-event engine binding server, devices and clients.

mod agents;
mod engine;
mod log;
mod network;
mod parallel;
mod schedule;

pub use agents::{Initiator, InitiatorRecord, RetryPolicy};
pub use engine::{
    Agent, AgentId, AsAny, Ctx, DeviceSpec, ReceiveFailure, RequestId, Sim, SimConfig, SimError, SimMetrics,
};
pub use log::{ChannelEntry, ChannelLog, ChannelPayload, Timeline, TimelineConfig, TimelineRecord};
pub use network::NetworkModel;
pub use parallel::drain_concurrently;
pub use schedule::{DailySchedule, DailyWindow};

#[cfg(test)]
mod tests;
