//! Radio descriptors from received signal strength.
//!
//! Each reading is turned into an approximate distance with the free-space
//! path-loss model `δ = 10^((27.55 + |s|)/20) / f` (`s` in dBm, `f` in MHz,
//! `δ` in meters), clamped at `δ_max`. A descriptor holds one distance per
//! endpoint of a closed registry; unobserved endpoints sit at `δ_max`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadioReading {
    pub endpoint: u32,
    /// dBm.
    pub rssi: f64,
    /// MHz.
    pub freq: f64,
    /// Seconds.
    pub timestamp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioConfig {
    /// Meters.
    pub delta_max: f64,
    /// Per meter.
    pub beta: f64,
    /// Readings within this many seconds of the image are used.
    pub window: f64,
    /// Query images only use readings taken before the image.
    pub query_past_only: bool,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            delta_max: 500.0,
            beta: 2.5e-4,
            window: 10.0,
            query_past_only: true,
        }
    }
}

impl RadioConfig {
    /// Checks that `s_rad` stays in `[−1, 1]` for a registry of `n` endpoints.
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.delta_max > 0.0 && self.beta >= 0.0 && self.window >= 0.0) {
            return Err(Error::Config(alloc::format!(
                "invalid radio parameters {self:?}"
            )));
        }
        let worst = self.beta * self.delta_max * libm::sqrt(n as f64);
        if worst > 2.0 + 1e-12 {
            return Err(Error::Config(alloc::format!(
                "beta·delta_max·sqrt(N_r) = {worst} exceeds 2; radio similarity would leave [-1, 1]"
            )));
        }
        Ok(())
    }
}

/// Inverse of the free-space model: the RSSI observed at `distance` meters.
pub fn rssi_at(distance: f64, freq: f64) -> f64 {
    -(20.0 * libm::log10(freq * distance) - 27.55)
}

/// Free-space distance estimate, clamped at `delta_max`.
pub fn distance_from_rssi(rssi: f64, freq: f64, delta_max: f64) -> f64 {
    let d = libm::pow(10.0, (27.55 + rssi.abs()) / 20.0) / freq;
    d.min(delta_max)
}

/// Closed-world mapping from endpoint id to descriptor slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "RegistryIds")]
pub struct EndpointRegistry {
    /// Sorted and distinct; the slot of an id is its position.
    ids: Vec<u32>,
}

#[derive(Deserialize)]
struct RegistryIds {
    ids: Vec<u32>,
}

impl From<RegistryIds> for EndpointRegistry {
    fn from(r: RegistryIds) -> Self {
        Self::from_ids(r.ids)
    }
}

impl EndpointRegistry {
    /// Registry over the distinct ids, in ascending order.
    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Self {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn slot(&self, id: u32) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

/// Readings usable for an image taken at `time`: within `window` seconds,
/// optionally only earlier ones, at most one per endpoint (the closest in
/// time, earlier on ties).
pub fn window_readings(
    readings: &[RadioReading],
    time: f64,
    window: f64,
    past_only: bool,
) -> Vec<RadioReading> {
    let mut best: BTreeMap<u32, RadioReading> = BTreeMap::new();
    for r in readings {
        let dt = r.timestamp - time;
        if dt.abs() > window || (past_only && dt > 0.0) {
            continue;
        }
        best.entry(r.endpoint)
            .and_modify(|b| {
                let (db, dr) = ((b.timestamp - time).abs(), dt.abs());
                if dr < db || (dr == db && r.timestamp < b.timestamp) {
                    *b = *r;
                }
            })
            .or_insert(*r);
    }
    best.into_values().collect()
}

/// Drops each reading independently with probability `p`.
pub fn drop_readings<R: Rng + ?Sized>(
    readings: &[RadioReading],
    p: f64,
    rng: &mut R,
) -> Vec<RadioReading> {
    if p <= 0.0 {
        return readings.to_vec();
    }
    readings
        .iter()
        .filter(|_| !rng.random_bool(p.min(1.0)))
        .copied()
        .collect()
}

/// Radio descriptor and the number of readings whose endpoint is not in the
/// registry.
pub fn radio_descriptor(
    readings: &[RadioReading],
    registry: &EndpointRegistry,
    delta_max: f64,
) -> (Vec<f64>, usize) {
    let mut d = vec![delta_max; registry.len()];
    let mut unknown = 0;
    for r in readings {
        match registry.slot(r.endpoint) {
            Some(i) => d[i] = d[i].min(distance_from_rssi(r.rssi, r.freq, delta_max)),
            None => unknown += 1,
        }
    }
    if unknown > 0 {
        log::warn!("{unknown} radio readings reference endpoints outside the registry");
    }
    (d, unknown)
}

/// `1 − β‖δ_a − δ_b‖₂`.
pub fn radio_similarity(a: &[f64], b: &[f64], beta: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(alloc::format!(
            "radio descriptors have {} and {} endpoints",
            a.len(),
            b.len()
        )));
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(1.0 - beta * libm::sqrt(sq))
}
