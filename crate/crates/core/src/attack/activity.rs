use serde::Serialize;

use super::deplete::DepletionReport;
use crate::device::REFILL_BATCH;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ActivityScore {
    /// Keys consumed by contacts since the current batch was uploaded.
    pub used_since_refill: u64,
    /// Keys handed out since registration, when ids are counters from 1.
    pub total_used_estimate: Option<u64>,
}

/// Reads a full depletion as a contact-activity measurement. `counter_ids`
/// is false for clients that start one-time ids at a random value, where
/// only the per-batch figure is available. `initial_batch` is the profile's
/// (or the fingerprinted) first batch size.
pub fn activity_score(report: &DepletionReport, counter_ids: bool, initial_batch: u32) -> ActivityScore {
    let still_initial = counter_ids && report.max_id.is_some_and(|m| m <= initial_batch);
    let batch = if still_initial { initial_batch } else { REFILL_BATCH };
    ActivityScore {
        used_since_refill: u64::from(batch).saturating_sub(report.bundle_count),
        total_used_estimate: if counter_ids {
            report.max_id.map(|m| u64::from(m).saturating_sub(report.bundle_count))
        } else {
            None
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(count: u64, max: u32) -> DepletionReport {
        DepletionReport {
            target: "1@s.whatsapp.net".into(),
            mode: "sync".into(),
            bundle_count: count,
            min_id: Some(max + 1 - count as u32),
            max_id: Some(max),
            duration_ms: 0,
            empty_bundle_count: 1,
            duplicate_ids: vec![],
            unavailable: 0,
            rate_limited: 0,
            requests: count + 1,
            first_epoch: None,
            last_epoch: None,
            completed: true,
        }
    }

    #[test]
    fn used_since_refill() {
        assert_eq!(activity_score(&report(800, 2486), true, 50).used_since_refill, 12);
    }

    #[test]
    fn android_has_no_total() {
        assert_eq!(activity_score(&report(812, 9_000_000), false, 812).total_used_estimate, None);
    }

    #[test]
    fn web_total() {
        let s = activity_score(&report(790, 200 + 2 * 812), true, 200);
        assert_eq!(s.total_used_estimate, Some(200 + 2 * 812 - 790));
        assert_eq!(s.used_since_refill, 22);
        let fresh = activity_score(&report(190, 200), true, 200);
        assert_eq!(fresh.used_since_refill, 10);
    }
}
