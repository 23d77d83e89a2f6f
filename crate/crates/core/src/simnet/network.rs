use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::Link;
use crate::time::SimTime;

/// Round-trip and server service-time model. `load` is a dimensionless
/// background-load factor; the default range 0..=1 spans sync depletion
/// durations of roughly 41 s to 118 s for 812 keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkModel {
    pub base_rtt_ms: f64,
    pub rtt_load_slope: f64,
    pub service_ms_per_load: f64,
    pub cellular_rtt_factor: f64,
    /// Relative uniform jitter applied to every sampled delay.
    pub jitter: f64,
    pub load: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            base_rtt_ms: 50.0,
            rtt_load_slope: 0.2,
            service_ms_per_load: 85.0,
            cellular_rtt_factor: 1.0,
            jitter: 0.0,
            load: 0.0,
        }
    }
}

impl NetworkModel {
    pub fn with_load(load: f64) -> Self {
        Self {
            load,
            ..Self::default()
        }
    }

    fn jittered<R: Rng + ?Sized>(&self, ms: f64, rng: &mut R) -> SimTime {
        let ms = if self.jitter > 0.0 {
            ms * (1.0 + rng.gen_range(-self.jitter..=self.jitter))
        } else {
            ms
        };
        ms.round().max(0.0) as SimTime
    }

    pub fn mean_rtt_ms(&self, link: Link, load: f64) -> f64 {
        let factor = match link {
            Link::Wifi => 1.0,
            Link::Cellular => self.cellular_rtt_factor,
        };
        self.base_rtt_ms * factor * (1.0 + self.rtt_load_slope * load)
    }

    pub fn mean_service_ms(&self, load: f64) -> f64 {
        self.service_ms_per_load * load
    }

    pub fn sample_rtt<R: Rng + ?Sized>(&self, link: Link, load: f64, rng: &mut R) -> SimTime {
        self.jittered(self.mean_rtt_ms(link, load), rng)
    }

    pub fn sample_service<R: Rng + ?Sized>(&self, load: f64, rng: &mut R) -> SimTime {
        self.jittered(self.mean_service_ms(load), rng)
    }

    /// Closed-form duration of `n` back-to-back fetches at the configured load.
    pub fn sync_depletion_secs(&self, n: u32) -> f64 {
        let per = self.mean_rtt_ms(Link::Wifi, self.load).round() + self.mean_service_ms(self.load).round();
        n as f64 * per / 1000.0
    }
}
