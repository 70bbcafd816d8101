//! Flush+Reload and Prime+Probe on top of the cache timing model.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cpu::Machine;
use crate::mem::PAGE_SIZE;

/// Scratch line used by [`calibrate_threshold`]; never part of any program's memory.
pub const CALIBRATION_ADDR: u64 = 0x7e00_0000_0000;

/// `n_slots` page-strided lines starting at `base`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeArray {
    pub base: u64,
    pub n_slots: usize,
    pub stride: u64,
}

impl ProbeArray {
    pub fn new(base: u64, n_slots: usize) -> Self {
        ProbeArray { base, n_slots, stride: PAGE_SIZE }
    }

    /// One slot per 7-bit ASCII character.
    pub fn ascii(base: u64) -> Self {
        ProbeArray::new(base, 128)
    }

    /// One slot per nibble value.
    pub fn nibble(base: u64) -> Self {
        ProbeArray::new(base, 16)
    }

    pub fn slot_addr(&self, slot: usize) -> u64 {
        self.base + slot as u64 * self.stride
    }

    pub fn len_bytes(&self) -> u64 {
        self.n_slots as u64 * self.stride
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementResult {
    /// Indexed by slot, independent of the order slots were probed in.
    pub latencies: Vec<u64>,
    /// Slots measured faster than `threshold`, ascending.
    pub hot: Vec<usize>,
    pub threshold: u64,
}

impl MeasurementResult {
    pub fn from_latencies(latencies: Vec<u64>, threshold: u64) -> Self {
        let hot = latencies.iter().enumerate().filter(|(_, &l)| l < threshold).map(|(i, _)| i).collect();
        MeasurementResult { latencies, hot, threshold }
    }

    /// The single hot slot, if exactly one.
    pub fn single(&self) -> Option<usize> {
        match self.hot.as_slice() {
            [s] => Some(*s),
            _ => None,
        }
    }
}

/// Measurement noise applied by [`reload_and_time`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Probability that one probe's latency lands on the wrong side of the threshold.
    pub flip_prob: f64,
    /// Probability per measurement that an unrelated access fills one random slot first.
    pub spurious_fill: f64,
}

impl NoiseModel {
    pub fn is_silent(&self) -> bool {
        self.flip_prob <= 0.0 && self.spurious_fill <= 0.0
    }
}

pub fn flush_all(m: &mut Machine, pa: &ProbeArray) {
    for s in 0..pa.n_slots {
        m.caches.clflush(pa.slot_addr(s));
    }
}

/// Times one load of every slot (in a seeded random order) and classifies against `threshold`.
pub fn reload_and_time<R: Rng>(m: &mut Machine, pa: &ProbeArray, threshold: u64, rng: &mut R, noise: &NoiseModel) -> MeasurementResult {
    let mut order: Vec<usize> = (0..pa.n_slots).collect();
    order.shuffle(rng);
    if noise.spurious_fill > 0.0 && rng.gen::<f64>() < noise.spurious_fill {
        let s = rng.gen_range(0..pa.n_slots);
        m.caches.touch(pa.slot_addr(s));
    }
    let (fast, slow) = {
        let c = m.caches.config();
        (c.lat_l1, c.lat_mem)
    };
    let mut latencies = vec![0; pa.n_slots];
    for s in order {
        let mut lat = m.timed_probe(pa.slot_addr(s));
        if noise.flip_prob > 0.0 && rng.gen::<f64>() < noise.flip_prob {
            lat = if lat < threshold { slow } else { fast };
        }
        latencies[s] = lat;
    }
    MeasurementResult::from_latencies(latencies, threshold)
}

/// Midpoint between a measured L1 hit and a measured full miss.
pub fn calibrate_threshold(m: &mut Machine) -> u64 {
    m.caches.clflush(CALIBRATION_ADDR);
    let miss = m.timed_probe(CALIBRATION_ADDR);
    let hit = m.timed_probe(CALIBRATION_ADDR);
    m.caches.clflush(CALIBRATION_ADDR);
    (hit + miss) / 2
}

/// Combines the two 16-slot nibble measurements into a byte; `None` unless each is a singleton.
pub fn decode_nibbles(low_hot: &[usize], high_hot: &[usize]) -> Option<u8> {
    match (low_hot, high_hot) {
        ([lo], [hi]) if *lo < 16 && *hi < 16 => Some(((*hi as u8) << 4) | *lo as u8),
        _ => None,
    }
}

/// Prime: fills the LLC set of every slot with attacker-owned eviction lines.
pub fn prime(m: &mut Machine, pa: &ProbeArray) {
    for s in 0..pa.n_slots {
        let set = m.caches.llc_set_of(pa.slot_addr(s));
        m.caches.evict_set_by_walking(set);
    }
}

/// Probe: re-times the primed lines; a slot is hot when any line of its set was evicted.
/// Each slot's reported latency is the slowest of its set's lines.
pub fn probe(m: &mut Machine, pa: &ProbeArray, threshold: u64) -> MeasurementResult {
    let ways = m.caches.config().llc_ways;
    let mut latencies = Vec::with_capacity(pa.n_slots);
    for s in 0..pa.n_slots {
        let set = m.caches.llc_set_of(pa.slot_addr(s));
        let addrs = m.caches.eviction_addresses(set);
        let primed = &addrs[addrs.len() - ways..];
        let worst = primed.iter().map(|&a| m.timed_probe(a)).max().unwrap_or(0);
        latencies.push(worst);
    }
    // Slow means activity here, so invert the comparison used by Flush+Reload.
    let hot = latencies.iter().enumerate().filter(|(_, &l)| l >= threshold).map(|(i, _)| i).collect();
    MeasurementResult { latencies, hot, threshold }
}

/// `trial,slot,latency,hot` rows for a sequence of measurements.
pub fn measurements_csv(results: &[MeasurementResult]) -> String {
    let mut out = String::from("trial,slot,latency,hot\n");
    for (t, r) in results.iter().enumerate() {
        for (s, lat) in r.latencies.iter().enumerate() {
            let hot = r.hot.binary_search(&s).is_ok() as u8;
            writeln!(out, "{t},{s},{lat},{hot}").unwrap();
        }
    }
    out
}
