use serde::{Deserialize, Serialize};

use crate::device::DeviceCondition;
use crate::time::{SimTime, DAY};

/// A window within each simulated day, `[from, to)` in milliseconds after
/// midnight. `to < from` wraps past midnight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailyWindow {
    pub from: SimTime,
    pub to: SimTime,
    pub condition: DeviceCondition,
}

impl DailyWindow {
    fn contains(&self, time_of_day: SimTime) -> bool {
        if self.from <= self.to {
            (self.from..self.to).contains(&time_of_day)
        } else {
            time_of_day >= self.from || time_of_day < self.to
        }
    }
}

/// Repeating daily routine. Simulation time 0 is midnight of day one.
/// The first window containing a time of day wins; outside all windows the
/// device is in `otherwise`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DailySchedule {
    pub otherwise: DeviceCondition,
    pub windows: Vec<DailyWindow>,
}

impl DailySchedule {
    pub fn always(condition: DeviceCondition) -> Self {
        Self {
            otherwise: condition,
            windows: Vec::new(),
        }
    }

    pub fn condition_at(&self, t: SimTime) -> DeviceCondition {
        let tod = t % DAY;
        self.windows
            .iter()
            .find(|w| w.contains(tod))
            .map_or(self.otherwise, |w| w.condition)
    }

    /// The first time after `t` at which the condition differs from the
    /// one at `t`.
    pub fn next_change(&self, t: SimTime) -> Option<SimTime> {
        if self.windows.is_empty() {
            return None;
        }
        let current = self.condition_at(t);
        let day_start = t - t % DAY;
        let mut candidates: Vec<SimTime> = Vec::new();
        for d in 0..=2 {
            for w in &self.windows {
                for b in [w.from, w.to] {
                    let at = day_start + d * DAY + b % DAY;
                    if at > t {
                        candidates.push(at);
                    }
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        candidates.into_iter().find(|&at| self.condition_at(at) != current)
    }
}
