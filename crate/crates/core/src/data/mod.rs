//! Stay events, event stores, co-occurrence, related individuals and the
//! per-target collective samples the model consumes.

mod batch;
mod cooccur;
mod sample;
mod store;

use serde::{Deserialize, Serialize};

pub use batch::{pad_batch, unpad, CellPos, PaddedBatch, FEATURES};
pub use cooccur::{brute_force_pairs, sweep_pairs, History, PairStats, FM_MIN_COUNT, FM_MIN_MINUTES};
pub use sample::{
    build_event_graph, positional_indices, related_individuals, synthetic_sample, tile_windows,
    CollectiveSample, EventGraph, EventSequence, RelatedIndividuals, SampleBuilder, SampleConfig,
    Window,
};
pub use store::{
    load_events, load_labels, write_events, write_labels, EventStore, LabelRecord, Manifest,
};

pub type AgentId = u32;

pub const MINUTES_PER_DAY: i64 = 1440;
/// POI vocabulary size of the bundled datasets.
pub const DEFAULT_POI_VOCAB: usize = 14;
pub const DOW_VOCAB: usize = 7;
/// Co-occurrence distance threshold in km (40 m).
pub const DEFAULT_DELTA_KM: f64 = 0.04;

/// Day index of an absolute minute; day 0 is the dataset epoch.
pub fn day_of(minute: i64) -> i64 {
    minute.div_euclid(MINUTES_PER_DAY)
}

/// Day of week with the epoch on a Monday (0 = Monday .. 6 = Sunday).
pub fn dow_of(minute: i64) -> u8 {
    day_of(minute).rem_euclid(7) as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StayEvent {
    #[serde(rename = "agent_id")]
    pub agent: AgentId,
    #[serde(rename = "start_time_min")]
    pub start: i64,
    #[serde(rename = "duration_min")]
    pub duration: i64,
    #[serde(rename = "x_km")]
    pub x: f64,
    #[serde(rename = "y_km")]
    pub y: f64,
    #[serde(rename = "poi_id")]
    pub poi: u16,
    pub dow: u8,
}

impl StayEvent {
    pub fn new(agent: AgentId, start: i64, duration: i64, x: f64, y: f64, poi: u16) -> Self {
        Self {
            agent,
            start,
            duration,
            x,
            y,
            poi,
            dow: dow_of(start),
        }
    }

    pub fn end(&self) -> i64 {
        self.start + self.duration
    }

    pub fn day(&self) -> i64 {
        day_of(self.start)
    }

    pub fn midpoint(&self) -> i64 {
        self.start + self.duration / 2
    }

    /// Checks the per-event invariants against a POI vocabulary size.
    pub fn validate(&self, n_poi: usize) -> Result<(), String> {
        if self.duration <= 0 {
            return Err(format!("duration must be positive, got {}", self.duration));
        }
        if self.dow != dow_of(self.start) {
            return Err(format!(
                "dow {} inconsistent with start time {} (expected {})",
                self.dow,
                self.start,
                dow_of(self.start)
            ));
        }
        if usize::from(self.poi) >= n_poi {
            return Err(format!("poi {} outside vocabulary of {n_poi}", self.poi));
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err("non-finite coordinate".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Planar distance on (x, y) already expressed in km.
    #[default]
    Euclidean,
    /// Great-circle distance with x = longitude, y = latitude in degrees.
    Haversine,
}

const EARTH_RADIUS_KM: f64 = 6371.0088;

impl DistanceMetric {
    pub fn distance(self, a: &StayEvent, b: &StayEvent) -> f64 {
        match self {
            DistanceMetric::Euclidean => (a.x - b.x).hypot(a.y - b.y),
            DistanceMetric::Haversine => {
                let (lat1, lat2) = (a.y.to_radians(), b.y.to_radians());
                let dlat = lat2 - lat1;
                let dlon = (b.x - a.x).to_radians();
                let h = (dlat / 2.0).sin().powi(2)
                    + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
                2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
            }
        }
    }
}

/// Closed-interval overlap: touching endpoints count.
pub fn intervals_overlap(a: &StayEvent, b: &StayEvent) -> bool {
    a.start <= b.end() && b.start <= a.end()
}

/// Length in minutes of the intersection of two intervals (0 when disjoint).
pub fn overlap_minutes(a: &StayEvent, b: &StayEvent) -> i64 {
    (a.end().min(b.end()) - a.start.max(b.start)).max(0)
}

pub fn co_occurs(a: &StayEvent, b: &StayEvent, delta: f64, metric: DistanceMetric) -> bool {
    intervals_overlap(a, b) && metric.distance(a, b) < delta
}

/// Train / validation / test day ranges, each half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySplit {
    pub train: (i64, i64),
    pub val: (i64, i64),
    pub test: (i64, i64),
}

impl DaySplit {
    /// Splits `[day_start, day_end)` by date in proportion to `ratio`,
    /// rounding each boundary to the nearest day.
    pub fn from_ratio(day_start: i64, day_end: i64, ratio: [u32; 3]) -> Option<Self> {
        let total: u32 = ratio.iter().sum();
        if ratio.contains(&0) {
            return None;
        }
        let n = (day_end - day_start) as f64;
        let b1 = day_start + (n * f64::from(ratio[0]) / f64::from(total)).round() as i64;
        let b2 = day_start + (n * f64::from(ratio[0] + ratio[1]) / f64::from(total)).round() as i64;
        if !(day_start < b1 && b1 < b2 && b2 < day_end) {
            return None;
        }
        Some(Self {
            train: (day_start, b1),
            val: (b1, b2),
            test: (b2, day_end),
        })
    }
}
