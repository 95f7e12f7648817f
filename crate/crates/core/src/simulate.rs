//! Synthetic strain-rate waterfalls with exact ground truth.
//!
//! A vehicle at channel `s` produces a Gaussian quasi-static pulse centred
//! on its arrival time there, plus 15 to 25 Hz vibration under the same
//! envelope. Shear waves are short pulses running from one end of the
//! bridge to the other. Background is white noise and a few mains-like
//! harmonics.
//!
//! White noise is drawn per (seed, channel, one-second block), so any time
//! range renders to the same samples whether it is produced in one piece or
//! batch by batch.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::VehicleClass;
use crate::waterfall::{write_dasw_atomic, Axes, Waterfall, WaterfallError};
use crate::Direction;

pub use crate::evaluate::GroundTruthEvent;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event out of range: {0}")]
    EventOutOfRange(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Waterfall(#[from] WaterfallError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub t_enter_s: f64,
    pub speed_kmh: f64,
    pub direction: Direction,
    pub class: VehicleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SWave {
    pub t_s: f64,
    /// 0 or the channel count: the wave crosses the whole bridge from there.
    pub origin_channel: usize,
    pub speed_mps: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub white_sigma: f64,
    /// `(frequency Hz, amplitude)` pairs.
    pub harmonics: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub duration_s: f64,
    pub channel_count: usize,
    pub channel_spacing_m: f64,
    pub sample_rate_hz: f64,
    pub start_time_ns: i64,
    pub vehicles: Vec<Vehicle>,
    pub noise: Noise,
    pub s_waves: Vec<SWave>,
    pub amplitude_car: f64,
    pub amplitude_truck: f64,
    /// Standard deviation of the quasi-static pulse, seconds.
    pub qs_pulse_width_s: f64,
    pub surface_band: (f64, f64),
    /// Standard deviation of a shear-wave pulse, seconds.
    pub s_wave_width_s: f64,
}

/// Relative level of the vibration riding on the quasi-static pulse.
const SURFACE_LEVEL: f64 = 0.3;
/// Envelopes are cut at this many standard deviations.
const SUPPORT_SIGMAS: f64 = 5.0;
const SURFACE_TONES: usize = 12;
const TABLE_RATE_HZ: f64 = 4000.0;
/// Unix time 2023-06-01T00:00:00Z, the default scenario start.
pub const DEFAULT_START_NS: i64 = 1_685_577_600_000_000_000;

impl Default for Scenario {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            channel_count: 693,
            channel_spacing_m: 1.0,
            sample_rate_hz: 1000.0,
            start_time_ns: DEFAULT_START_NS,
            vehicles: Vec::new(),
            noise: Noise { white_sigma: 1e-7, harmonics: vec![(50.0, 2e-8), (100.0, 1e-8), (150.0, 5e-9)] },
            s_waves: Vec::new(),
            amplitude_car: 1e-7,
            amplitude_truck: 5e-7,
            qs_pulse_width_s: 1.5,
            surface_band: (15.0, 25.0),
            s_wave_width_s: 0.01,
        }
    }
}

impl Scenario {
    pub fn quiet(duration_s: f64, channel_count: usize) -> Self {
        Self {
            duration_s,
            channel_count,
            noise: Noise { white_sigma: 0.0, harmonics: Vec::new() },
            ..Self::default()
        }
    }

    pub fn total_rows(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    /// Channel extent used for crossing times and speeds.
    pub fn extent(&self) -> f64 {
        self.channel_count as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let inv = |m: String| Err(SimError::Invalid(m));
        if !(self.duration_s > 0.0 && self.sample_rate_hz > 0.0 && self.channel_spacing_m > 0.0) || self.channel_count < 2 {
            return inv("duration, sample rate, spacing must be positive and at least two channels".into());
        }
        if !(self.amplitude_truck > self.amplitude_car && self.amplitude_car >= 0.0) {
            return inv("truck amplitude must exceed car amplitude".into());
        }
        if !(self.qs_pulse_width_s > 0.0 && self.s_wave_width_s > 0.0 && self.noise.white_sigma >= 0.0) {
            return inv("pulse widths must be positive, white noise non-negative".into());
        }
        if !(self.surface_band.0 > 0.0 && self.surface_band.0 < self.surface_band.1 && self.surface_band.1 < self.sample_rate_hz / 2.0) {
            return inv("surface band must lie inside (0, Nyquist)".into());
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            if !(v.speed_kmh > 0.0 && v.speed_kmh.is_finite()) {
                return inv(format!("vehicle {i}: speed must be positive"));
            }
            if !(v.t_enter_s >= 0.0 && v.t_enter_s < self.duration_s) {
                return Err(SimError::EventOutOfRange(format!("vehicle {i} enters at {} s", v.t_enter_s)));
            }
        }
        for (i, w) in self.s_waves.iter().enumerate() {
            if !(w.speed_mps > 0.0) {
                return inv(format!("s-wave {i}: speed must be positive"));
            }
            if !(w.t_s >= 0.0 && w.t_s < self.duration_s) || (w.origin_channel != 0 && w.origin_channel != self.channel_count) {
                return Err(SimError::EventOutOfRange(format!("s-wave {i} at {} s from channel {}", w.t_s, w.origin_channel)));
            }
        }
        Ok(())
    }

    fn amplitude(&self, class: VehicleClass) -> f64 {
        match class {
            VehicleClass::Truck => self.amplitude_truck,
            _ => self.amplitude_car,
        }
    }

    /// Seconds from scenario start until the vehicle reaches channel `s`.
    fn arrival(&self, v: &Vehicle, s: f64) -> f64 {
        let along = match v.direction {
            Direction::Up => s,
            Direction::Down => self.extent() - s,
        };
        v.t_enter_s + along * self.channel_spacing_m * 3.6 / v.speed_kmh
    }

    fn s_wave_arrival(&self, w: &SWave, s: f64) -> f64 {
        w.t_s + (s - w.origin_channel as f64).abs() * self.channel_spacing_m / w.speed_mps
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthEvent> {
        let ns = |t: f64| self.start_time_ns + (t * 1e9).round() as i64;
        self.vehicles
            .iter()
            .map(|v| GroundTruthEvent {
                t_at_s0_ns: ns(self.arrival(v, 0.0)),
                t_at_sl_ns: ns(self.arrival(v, self.extent())),
                class: v.class,
                speed_kmh: v.speed_kmh,
                direction: v.direction,
            })
            .collect()
    }

    /// Shear-wave crossings as ground truth lines, `speed_kmh` in km/h.
    pub fn s_wave_truth(&self) -> Vec<GroundTruthEvent> {
        let ns = |t: f64| self.start_time_ns + (t * 1e9).round() as i64;
        self.s_waves
            .iter()
            .map(|w| GroundTruthEvent {
                t_at_s0_ns: ns(self.s_wave_arrival(w, 0.0)),
                t_at_sl_ns: ns(self.s_wave_arrival(w, self.extent())),
                class: VehicleClass::Unknown,
                speed_kmh: w.speed_mps * 3.6,
                direction: if w.origin_channel == 0 { Direction::Up } else { Direction::Down },
            })
            .collect()
    }

    pub fn axes(&self) -> Axes {
        Axes {
            sample_rate_hz: self.sample_rate_hz,
            channel_spacing_m: self.channel_spacing_m,
            start_time_ns: self.start_time_ns,
            channel_offset: 0,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ tag).wrapping_add(a)).wrapping_add(b)))
}

/// Unit-RMS band-limited waveform sampled on a fine grid over the
/// envelope support, read back by linear interpolation.
struct SurfaceTable {
    t0: f64,
    values: Vec<f64>,
}

impl SurfaceTable {
    fn new(band: (f64, f64), half_span: f64, rng: &mut ChaCha8Rng) -> Self {
        let tones: Vec<(f64, f64)> =
            (0..SURFACE_TONES).map(|_| (rng.gen_range(band.0..band.1), rng.gen_range(0.0..2.0 * PI))).collect();
        let norm = (2.0 / SURFACE_TONES as f64).sqrt();
        let n = (2.0 * half_span * TABLE_RATE_HZ).ceil() as usize + 2;
        let values = (0..n)
            .map(|i| {
                let t = -half_span + i as f64 / TABLE_RATE_HZ;
                norm * tones.iter().map(|(f, ph)| (2.0 * PI * f * t + ph).sin()).sum::<f64>()
            })
            .collect();
        Self { t0: -half_span, values }
    }

    fn at(&self, tau: f64) -> f64 {
        let x = (tau - self.t0) * TABLE_RATE_HZ;
        let i = x.floor();
        if i < 0.0 || i as usize + 1 >= self.values.len() {
            return 0.0;
        }
        let (i, f) = (i as usize, x - i);
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }
}

/// Samples per period shared by all harmonics on the sample grid, if small.
fn harmonic_period(harmonics: &[(f64, f64)], fs: f64) -> Option<usize> {
    (1..=4096).find(|&p| {
        harmonics.iter().all(|(f, _)| {
            let cycles = f * p as f64 / fs;
            (cycles - cycles.round()).abs() < 1e-9
        })
    })
}

/// Renders `n_rows` rows starting at `row0` of the scenario.
pub fn render(scenario: &Scenario, seed: u64, row0: usize, n_rows: usize) -> Result<Waterfall, SimError> {
    scenario.validate()?;
    let cols = scenario.channel_count;
    let fs = scenario.sample_rate_hz;
    let mut axes = scenario.axes();
    axes.start_time_ns = axes.row_time_ns(row0);
    if n_rows == 0 {
        return Ok(Waterfall::from_parts_unchecked(Vec::new(), 0, cols, axes));
    }
    // Channel-major while rendering, transposed once at the end.
    let mut cm = vec![0.0; n_rows * cols];
    let t_of = |r: usize| (row0 + r) as f64 / fs;

    // White noise, one generator per channel and one-second block.
    let sigma = scenario.noise.white_sigma;
    if sigma > 0.0 {
        let block = fs.round().max(1.0) as usize;
        let (b0, b1) = (row0 / block, (row0 + n_rows - 1) / block);
        let mut col = vec![0.0; (b1 - b0 + 1) * block];
        for c in 0..cols {
            for b in b0..=b1 {
                let mut rng = stream_rng(seed, 1, c as u64, b as u64);
                for v in &mut col[(b - b0) * block..(b - b0 + 1) * block] {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = sigma * z;
                }
            }
            let skip = row0 - b0 * block;
            cm[c * n_rows..(c + 1) * n_rows].copy_from_slice(&col[skip..skip + n_rows]);
        }
    }

    // Harmonics with a per-channel phase.
    let harmonics = &scenario.noise.harmonics;
    if !harmonics.is_empty() {
        let period = harmonic_period(harmonics, fs);
        for c in 0..cols {
            let mut rng = stream_rng(seed, 2, c as u64, 0);
            let phases: Vec<f64> = harmonics.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let value = |t: f64| harmonics.iter().zip(&phases).map(|((f, a), ph)| a * (2.0 * PI * f * t + ph).sin()).sum::<f64>();
            match period {
                Some(p) => {
                    let table: Vec<f64> = (0..p).map(|k| value(k as f64 / fs)).collect();
                    for r in 0..n_rows {
                        cm[c * n_rows + r] += table[(row0 + r) % p];
                    }
                }
                None => {
                    for r in 0..n_rows {
                        cm[c * n_rows + r] += value(t_of(r));
                    }
                }
            }
        }
    }

    // Vehicles.
    let sig = scenario.qs_pulse_width_s;
    let half = SUPPORT_SIGMAS * sig;
    for (vi, v) in scenario.vehicles.iter().enumerate() {
        let table = SurfaceTable::new(scenario.surface_band, half, &mut stream_rng(seed, 3, vi as u64, 0));
        let amp = scenario.amplitude(v.class);
        for c in 0..cols {
            let tc = scenario.arrival(v, c as f64);
            let lo = (((tc - half) * fs).ceil() as i64 - row0 as i64).max(0);
            let hi = (((tc + half) * fs).floor() as i64 - row0 as i64).min(n_rows as i64 - 1);
            for r in lo..=hi {
                let r = r as usize;
                let tau = t_of(r) - tc;
                let env = (-0.5 * (tau / sig).powi(2)).exp();
                cm[c * n_rows + r] += amp * env * (1.0 + SURFACE_LEVEL * table.at(tau));
            }
        }
    }

    // Shear waves.
    let sw = scenario.s_wave_width_s;
    for w in &scenario.s_waves {
        let half = SUPPORT_SIGMAS * sw;
        for c in 0..cols {
            let tc = scenario.s_wave_arrival(w, c as f64);
            let lo = (((tc - half) * fs).ceil() as i64 - row0 as i64).max(0);
            let hi = (((tc + half) * fs).floor() as i64 - row0 as i64).min(n_rows as i64 - 1);
            for r in lo..=hi {
                let tau = t_of(r as usize) - tc;
                cm[c * n_rows + r as usize] += w.amplitude * (-0.5 * (tau / sw).powi(2)).exp();
            }
        }
    }

    let mut data = vec![0.0; n_rows * cols];
    const TILE: usize = 64;
    for r0 in (0..n_rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for c in c0..(c0 + TILE).min(cols) {
                for r in r0..(r0 + TILE).min(n_rows) {
                    data[r * cols + c] = cm[c * n_rows + r];
                }
            }
        }
    }
    Ok(Waterfall::from_parts_unchecked(data, n_rows, cols, axes))
}

/// Whole scenario in one raster, with its ground truth.
pub fn simulate(scenario: &Scenario, seed: u64) -> Result<(Waterfall, Vec<GroundTruthEvent>), SimError> {
    let w = render(scenario, seed, 0, scenario.total_rows())?;
    Ok((w, scenario.ground_truth()))
}

pub fn write_truth(path: impl AsRef<Path>, truth: &[GroundTruthEvent]) -> Result<(), SimError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in truth {
        writeln!(f, "{}", serde_json::to_string(e).expect("plain data serializes"))?;
    }
    f.flush()?;
    Ok(())
}

/// File name of batch `index`; lexical order equals time order.
pub fn batch_name(index: usize) -> String {
    format!("batch_{index:05}.dasw")
}

/// Renders the scenario batch by batch into `dir` (atomic renames) and
/// writes `truth.ndjson`. Returns the batch paths in time order.
pub fn write_batches(scenario: &Scenario, seed: u64, dir: impl AsRef<Path>, batch_s: f64) -> Result<Vec<PathBuf>, SimError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let per = (batch_s * scenario.sample_rate_hz).round() as usize;
    if per == 0 {
        return Err(SimError::Invalid("batch length rounds to zero rows".into()));
    }
    let total = scenario.total_rows();
    let mut paths = Vec::new();
    let mut truth = scenario.ground_truth();
    truth.extend(scenario.s_wave_truth());
    write_truth(dir.join("truth.ndjson"), &truth)?;
    for (i, row0) in (0..total).step_by(per).enumerate() {
        let w = render(scenario, seed, row0, per.min(total - row0))?;
        let path = dir.join(batch_name(i));
        write_dasw_atomic(&w, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Seed for the vehicle draws of the presets; independent of the noise seed
/// so a preset always describes the same traffic.
const PRESET_SEED: u64 = 0x5EED_DA5;

pub const PRESETS: [&str; 4] = ["sparse", "rush_hour", "s_wave_test", "tuning_train"];

fn slotted_traffic(n: usize, first: f64, slot: f64, jitter: f64, truck_every: usize, rng: &mut ChaCha8Rng) -> Vec<Vehicle> {
    (0..n)
        .map(|i| Vehicle {
            t_enter_s: first + slot * i as f64 + rng.gen_range(-jitter..=jitter),
            speed_kmh: rng.gen_range(75.0..=95.0),
            direction: if rng.gen_bool(0.5) { Direction::Up } else { Direction::Down },
            class: if i % truck_every == truck_every - 1 { VehicleClass::Truck } else { VehicleClass::Car },
        })
        .collect()
}

pub fn preset(name: &str) -> Result<Scenario, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(PRESET_SEED);
    let base = Scenario::default();
    let s = match name {
        "sparse" => Scenario {
            duration_s: 600.0,
            vehicles: [40.0, 150.0, 270.0, 390.0, 500.0]
                .iter()
                .enumerate()
                .map(|(i, &t)| Vehicle {
                    t_enter_s: t,
                    speed_kmh: 80.0 + 2.5 * i as f64,
                    direction: if i % 2 == 0 { Direction::Up } else { Direction::Down },
                    class: if i == 2 { VehicleClass::Truck } else { VehicleClass::Car },
                })
                .collect(),
            ..base
        },
        "rush_hour" => Scenario { duration_s: 600.0, vehicles: slotted_traffic(20, 5.0, 28.0, 3.0, 4, &mut rng), ..base },
        "tuning_train" => {
            // Fixed directions so both directions carry a truck.
            let dirs = [Direction::Down, Direction::Up, Direction::Up, Direction::Down, Direction::Up, Direction::Down];
            let mut vehicles = slotted_traffic(6, 3.0, 14.0, 2.0, 3, &mut rng);
            for (v, d) in vehicles.iter_mut().zip(dirs) {
                v.direction = d;
            }
            Scenario { duration_s: 120.0, vehicles, ..base }
        }
        "s_wave_test" => Scenario {
            duration_s: 30.0,
            s_waves: [(5.0, 0), (15.0, 693), (25.0, 0)]
                .iter()
                .map(|&(t_s, origin_channel)| SWave { t_s, origin_channel, speed_mps: 3000.0, amplitude: 1e-6 })
                .collect(),
            ..base
        },
        other => return Err(SimError::UnknownPreset(other.to_string())),
    };
    s.validate()?;
    Ok(s)
}
