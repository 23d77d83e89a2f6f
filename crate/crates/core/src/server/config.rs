use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimit {
    pub bundles_per_window: u32,
    pub window_ms: u64,
}

/// Injectable server misbehaviour, all off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultModes {
    /// Probability that a fetch re-serves the previously handed-out key.
    pub double_handout_probability: f64,
    /// Probability that a prekey upload is answered with 503.
    pub refill_reject_probability: f64,
    /// Probability that a low-watermark notification is lost in transit
    /// while the server still considers it pending (client/server desync).
    pub notification_drop_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub watermark_threshold: usize,
    pub overload_soft_rps: u32,
    pub overload_hard_rps: u32,
    pub rate_limit: Option<RateLimit>,
    pub faults: FaultModes,
    pub block_list_effect: bool,
    /// Key ids are truncated hashes of the public keys rather than counters.
    pub hash_key_ids: bool,
    /// Epoch seconds corresponding to simulated time zero.
    pub epoch_offset_secs: u64,
    pub server_name: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            watermark_threshold: 11,
            overload_soft_rps: 50,
            overload_hard_rps: 2000,
            rate_limit: None,
            faults: FaultModes::default(),
            block_list_effect: false,
            hash_key_ids: false,
            epoch_offset_secs: 1_740_182_155,
            server_name: super::DEFAULT_SERVER_NAME.to_string(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("overload_soft_rps ({soft}) must be below overload_hard_rps ({hard})")]
    OverloadOrder { soft: u32, hard: u32 },
    #[error("{name} must be a probability in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("rate limit needs a positive budget and window")]
    RateLimit,
    #[error("watermark threshold must be positive")]
    Watermark,
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.overload_soft_rps >= self.overload_hard_rps {
            return Err(ConfigError::OverloadOrder {
                soft: self.overload_soft_rps,
                hard: self.overload_hard_rps,
            });
        }
        for (name, value) in [
            ("double_handout_probability", self.faults.double_handout_probability),
            ("refill_reject_probability", self.faults.refill_reject_probability),
            ("notification_drop_probability", self.faults.notification_drop_probability),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConfigError::Probability { name, value });
            }
        }
        if let Some(rl) = self.rate_limit {
            if rl.bundles_per_window == 0 || rl.window_ms == 0 {
                return Err(ConfigError::RateLimit);
            }
        }
        if self.watermark_threshold == 0 {
            return Err(ConfigError::Watermark);
        }
        Ok(())
    }

    /// 503 probability for a fetch arriving while `rps` requests (including
    /// itself) hit the same device within the last second.
    pub fn overload_probability(&self, rps: u32) -> f64 {
        let (soft, hard) = (self.overload_soft_rps, self.overload_hard_rps);
        if rps >= hard {
            1.0
        } else if rps <= soft {
            0.0
        } else {
            f64::from(rps - soft) / f64::from(hard - soft)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_observed_thresholds() {
        let c = ServerConfig::default();
        c.validate().unwrap();
        assert_eq!(c.watermark_threshold, 11);
        assert_eq!((c.overload_soft_rps, c.overload_hard_rps), (50, 2000));
        assert!(!c.block_list_effect);
    }

    #[test]
    fn overload_ramp() {
        let c = ServerConfig::default();
        assert_eq!(c.overload_probability(10), 0.0);
        assert_eq!(c.overload_probability(50), 0.0);
        assert!((c.overload_probability(1025) - 0.5).abs() < 1e-12);
        assert_eq!(c.overload_probability(2000), 1.0);
        assert_eq!(c.overload_probability(5000), 1.0);
    }

    #[test]
    fn rejects_inverted_thresholds() {
        let c = ServerConfig {
            overload_soft_rps: 3000,
            ..ServerConfig::default()
        };
        assert!(matches!(c.validate(), Err(ConfigError::OverloadOrder { .. })));
    }
}
