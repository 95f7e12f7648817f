//! Per-run report: counts, speed histogram and hourly statistics over the
//! vehicles of a record stream.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dastrack::cluster::VehicleClass;
use dastrack::stream::{collapse_by_id, DetectionRecord};
use dastrack::Direction;
use serde::{Deserialize, Serialize};

pub const SPEED_BIN_KMH: f64 = 5.0;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub car: u64,
    pub truck: u64,
    pub unknown: u64,
}

impl ClassCounts {
    fn add(&mut self, class: VehicleClass) {
        match class {
            VehicleClass::Car => self.car += 1,
            VehicleClass::Truck => self.truck += 1,
            VehicleClass::Unknown => self.unknown += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.car + self.truck + self.unknown
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedBin {
    pub lo_kmh: f64,
    pub hi_kmh: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourStats {
    pub hour_start_unix_s: i64,
    pub count: u64,
    pub mean_speed_kmh: f64,
    pub std_speed_kmh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub vehicles: u64,
    pub records: u64,
    pub counts: BTreeMap<Direction, ClassCounts>,
    pub speed_histogram: Vec<SpeedBin>,
    pub hourly: Vec<HourStats>,
}

/// Vehicles are the records collapsed per id. Each vehicle is binned by the
/// hour its entry time falls in; the histogram covers the occupied 5 km/h
/// bins only.
pub fn summarize(records: &[DetectionRecord]) -> Summary {
    let vehicles = collapse_by_id(records);
    let mut counts: BTreeMap<Direction, ClassCounts> = Direction::BOTH.iter().map(|&d| (d, ClassCounts::default())).collect();
    let mut bins: BTreeMap<i64, u64> = BTreeMap::new();
    let mut hours: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for v in &vehicles {
        counts.entry(v.direction).or_default().add(v.class);
        *bins.entry((v.speed_kmh / SPEED_BIN_KMH).floor() as i64).or_default() += 1;
        hours.entry(v.t_enter_unix_ns.div_euclid(3_600_000_000_000) * 3600).or_default().push(v.speed_kmh);
    }
    let speed_histogram = bins
        .into_iter()
        .map(|(b, count)| SpeedBin { lo_kmh: b as f64 * SPEED_BIN_KMH, hi_kmh: (b + 1) as f64 * SPEED_BIN_KMH, count })
        .collect();
    let hourly = hours
        .into_iter()
        .map(|(hour_start_unix_s, speeds)| {
            let n = speeds.len() as f64;
            let mean = speeds.iter().sum::<f64>() / n;
            let var = speeds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
            HourStats { hour_start_unix_s, count: speeds.len() as u64, mean_speed_kmh: mean, std_speed_kmh: var.sqrt() }
        })
        .collect();
    Summary { vehicles: vehicles.len() as u64, records: records.len() as u64, counts, speed_histogram, hourly }
}

pub fn render_table(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "vehicles {} ({} records)", s.vehicles, s.records);
    let _ = writeln!(out, "{:<6} {:>6} {:>6} {:>8} {:>6}", "dir", "car", "truck", "unknown", "total");
    for (d, c) in &s.counts {
        let _ = writeln!(out, "{:<6} {:>6} {:>6} {:>8} {:>6}", d.as_str(), c.car, c.truck, c.unknown, c.total());
    }
    if !s.speed_histogram.is_empty() {
        let _ = writeln!(out, "speed km/h   count");
        for b in &s.speed_histogram {
            let _ = writeln!(out, "{:>5.0}-{:<5.0} {:>6}", b.lo_kmh, b.hi_kmh, b.count);
        }
    }
    for h in &s.hourly {
        let _ = writeln!(
            out,
            "hour {}: {} vehicles, mean {:.1} km/h, std {:.1} km/h",
            h.hour_start_unix_s, h.count, h.mean_speed_kmh, h.std_speed_kmh
        );
    }
    out
}
