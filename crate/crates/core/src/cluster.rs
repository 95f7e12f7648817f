//! From Hough segments to one detection per vehicle.
//!
//! Segments are extended to the full channel extent, compared by the mean
//! absolute time difference between the extended lines, grouped with DBSCAN
//! and averaged. Speed and direction follow from the two crossing times;
//! class comes from the signal strength in a tube around the trajectory.

use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hough::LineSegment;
use crate::waterfall::Waterfall;
use crate::Direction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("segment has no channel extent")]
    VerticalSegment,
    #[error("lines span different extents ({0} vs {1})")]
    LengthMismatch(f64, f64),
    #[error("cannot consolidate an empty cluster")]
    EmptyCluster,
    #[error("line has zero transit time")]
    ZeroTransitTime,
    #[error("line lies outside the waterfall time range")]
    LineOutOfBounds,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// A trajectory extended over channels `0..=extent`, as its crossing times
/// at both ends. Times are seconds on whatever clock the caller uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolatedLine {
    pub t_at_s0: f64,
    pub t_at_sl: f64,
    pub extent: f64,
}

impl ExtrapolatedLine {
    pub fn new(t_at_s0: f64, t_at_sl: f64, extent: f64) -> Self {
        Self { t_at_s0, t_at_sl, extent }
    }

    /// Time at (fractional) channel `s`.
    pub fn time_at(&self, s: f64) -> f64 {
        self.t_at_s0 + (self.t_at_sl - self.t_at_s0) * s / self.extent
    }

    pub fn shifted(&self, dt: f64) -> Self {
        Self { t_at_s0: self.t_at_s0 + dt, t_at_sl: self.t_at_sl + dt, extent: self.extent }
    }

    pub fn direction(&self) -> Option<Direction> {
        let d = self.t_at_sl - self.t_at_s0;
        if d > 0.0 {
            Some(Direction::Up)
        } else if d < 0.0 {
            Some(Direction::Down)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Neighbourhood radius in seconds.
    pub eps_s: f64,
    pub min_segs: usize,
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if !(self.eps_s > 0.0) || self.min_segs < 1 {
            return Err(ClusterError::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Car,
    Truck,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub amplitude_threshold: f64,
    pub ratio_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub mean_abs_amplitude: f64,
    pub band_energy_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleDetection {
    pub id: Option<u64>,
    pub line: ExtrapolatedLine,
    pub speed_kmh: f64,
    pub direction: Direction,
    pub class: VehicleClass,
    pub mean_abs_amplitude: f64,
    pub band_energy_ratio: f64,
}

/// Extends a segment linearly to channels 0 and `extent`.
pub fn extrapolate(seg: &LineSegment, extent: f64) -> Result<ExtrapolatedLine, ClusterError> {
    let dc = seg.p2.channel - seg.p1.channel;
    if dc == 0.0 {
        return Err(ClusterError::VerticalSegment);
    }
    let slope = (seg.p2.time_s - seg.p1.time_s) / dc;
    let t0 = seg.p1.time_s - slope * seg.p1.channel;
    Ok(ExtrapolatedLine::new(t0, t0 + slope * extent, extent))
}

/// Mean of `|a(s) - b(s)|` over `s` in `[0, extent]`, in closed form.
pub fn segment_distance(a: &ExtrapolatedLine, b: &ExtrapolatedLine) -> Result<f64, ClusterError> {
    if a.extent != b.extent {
        return Err(ClusterError::LengthMismatch(a.extent, b.extent));
    }
    Ok(affine_l1_mean(a.t_at_s0 - b.t_at_s0, a.t_at_sl - b.t_at_sl))
}

/// Mean absolute value over the unit interval of the affine function with
/// end values `d0` and `d1`.
fn affine_l1_mean(d0: f64, d1: f64) -> f64 {
    if d0 * d1 >= 0.0 {
        (d0 + d1).abs() / 2.0
    } else {
        // Two triangles meeting at the root.
        (d0 * d0 + d1 * d1) / (2.0 * (d0.abs() + d1.abs()))
    }
}

/// DBSCAN over an arbitrary symmetric distance. `N(i)` includes `i`
/// itself; `i` is core when `|N(i)| >= min_segs`. Clusters are listed by
/// their smallest member; a border point joins the first cluster (in
/// discovery order) that reaches it.
pub fn dbscan_by<F: Fn(usize, usize) -> f64>(n: usize, dist: F, params: &ClusterParams) -> (Vec<Vec<usize>>, Vec<usize>) {
    let neighbours: Vec<Vec<usize>> =
        (0..n).map(|i| (0..n).filter(|&j| j == i || dist(i, j) <= params.eps_s).collect()).collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= params.min_segs).collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        if label[i].is_some() || !core[i] {
            continue;
        }
        let c = clusters.len();
        let mut members = vec![i];
        label[i] = Some(c);
        let mut queue = std::collections::VecDeque::from([i]);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if label[q].is_none() {
                    label[q] = Some(c);
                    members.push(q);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
        members.sort_unstable();
        clusters.push(members);
    }
    clusters.sort_by_key(|m| m[0]);
    let noise = (0..n).filter(|&i| label[i].is_none()).collect();
    (clusters, noise)
}

pub fn dbscan(lines: &[ExtrapolatedLine], params: &ClusterParams) -> Result<(Vec<Vec<usize>>, Vec<usize>), ClusterError> {
    params.validate()?;
    if let Some(first) = lines.first() {
        if let Some(bad) = lines.iter().find(|l| l.extent != first.extent) {
            return Err(ClusterError::LengthMismatch(first.extent, bad.extent));
        }
    }
    let d = |i: usize, j: usize| affine_l1_mean(lines[i].t_at_s0 - lines[j].t_at_s0, lines[i].t_at_sl - lines[j].t_at_sl);
    Ok(dbscan_by(lines.len(), d, params))
}

/// Endpoint-wise mean of a cluster.
pub fn consolidate(cluster: &[ExtrapolatedLine]) -> Result<ExtrapolatedLine, ClusterError> {
    let first = cluster.first().ok_or(ClusterError::EmptyCluster)?;
    let n = cluster.len() as f64;
    let t0 = cluster.iter().map(|l| l.t_at_s0).sum::<f64>() / n;
    let tl = cluster.iter().map(|l| l.t_at_sl).sum::<f64>() / n;
    Ok(ExtrapolatedLine::new(t0, tl, first.extent))
}

pub fn speed_and_direction(line: &ExtrapolatedLine, channel_spacing_m: f64) -> Result<(f64, Direction), ClusterError> {
    let dt = line.t_at_sl - line.t_at_s0;
    if dt == 0.0 || !dt.is_finite() {
        return Err(ClusterError::ZeroTransitTime);
    }
    let dir = if dt > 0.0 { Direction::Up } else { Direction::Down };
    Ok((3.6 * line.extent * channel_spacing_m / dt.abs(), dir))
}

/// Half-width of the tube around a trajectory, seconds.
const TUBE_HALF_S: f64 = 1.0;
const QUASI_STATIC_BAND: (f64, f64) = (0.0, 1.0);
const SURFACE_BAND: (f64, f64) = (15.0, 25.0);

/// Amplitude and band-energy features of the raw (undecimated) signal in a
/// +-1 s tube around `line`. Line times are seconds from the waterfall start;
/// the line's extent is mapped onto the waterfall's channels.
pub fn extract_features(raw: &Waterfall, line: &ExtrapolatedLine) -> Result<Features, ClusterError> {
    let fs = raw.sample_rate_hz();
    let (rows, cols) = (raw.rows(), raw.cols());
    let half = (TUBE_HALF_S * fs).round() as i64;
    let n_fft = (2 * half + 1) as usize;
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let df = fs / n_fft as f64;

    let (mut abs_sum, mut count) = (0.0, 0usize);
    let (mut e_low, mut e_high) = (0.0, 0.0);
    let mut inside = 0usize;
    for c in 0..cols {
        let s = c as f64 * line.extent / cols.max(1) as f64;
        let centre = (line.time_at(s) * fs).round() as i64;
        if centre >= 0 && centre < rows as i64 {
            inside += 1;
        }
        let lo = (centre - half).max(0);
        let hi = (centre + half).min(rows as i64 - 1);
        if lo > hi {
            continue;
        }
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (k, r) in (lo..=hi).enumerate() {
            let v = raw.get(r as usize, c);
            abs_sum += v.abs();
            count += 1;
            buf[k] = v;
        }
        fft.process(&mut buf, &mut spec).expect("buffer sizes come from the plan");
        for (k, z) in spec.iter().enumerate() {
            let f = k as f64 * df;
            let e = z.norm_sqr();
            if f >= QUASI_STATIC_BAND.0 && f < QUASI_STATIC_BAND.1 {
                e_low += e;
            } else if f >= SURFACE_BAND.0 && f <= SURFACE_BAND.1 {
                e_high += e;
            }
        }
    }
    if inside * 2 < cols || count == 0 {
        return Err(ClusterError::LineOutOfBounds);
    }
    let ratio = if e_low > 0.0 { e_high / e_low } else { 0.0 };
    Ok(Features { mean_abs_amplitude: abs_sum / count as f64, band_energy_ratio: ratio })
}

pub fn classify(f: &Features, params: &ClassifierParams) -> VehicleClass {
    if f.mean_abs_amplitude > params.amplitude_threshold {
        VehicleClass::Truck
    } else {
        VehicleClass::Car
    }
}

/// Threshold between consecutive sorted values that best separates the
/// labels (`true` = above). Among equally good cut points the middle one is
/// taken.
fn sweep_threshold(samples: &[(f64, bool)]) -> Option<f64> {
    let mut vals: Vec<f64> = samples.iter().map(|s| s.0).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    if vals.len() < 2 {
        return vals.first().copied();
    }
    let cuts: Vec<f64> = vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let acc = |t: f64| samples.iter().filter(|(v, above)| (*v > t) == *above).count();
    let best = cuts.iter().map(|&t| acc(t)).max()?;
    let tied: Vec<f64> = cuts.into_iter().filter(|&t| acc(t) == best).collect();
    Some(tied[tied.len() / 2])
}

/// Fits both thresholds from labelled features. Only cars and trucks take
/// part; the amplitude cut decides the class.
pub fn fit_classifier(labeled: &[(Features, VehicleClass)]) -> Result<ClassifierParams, ClusterError> {
    let used: Vec<&(Features, VehicleClass)> = labeled.iter().filter(|(_, c)| *c != VehicleClass::Unknown).collect();
    let amp: Vec<(f64, bool)> = used.iter().map(|(f, c)| (f.mean_abs_amplitude, *c == VehicleClass::Truck)).collect();
    let ratio: Vec<(f64, bool)> = used.iter().map(|(f, c)| (f.band_energy_ratio, *c == VehicleClass::Truck)).collect();
    match (sweep_threshold(&amp), sweep_threshold(&ratio)) {
        (Some(a), Some(r)) => Ok(ClassifierParams { amplitude_threshold: a, ratio_threshold: r }),
        _ => Err(ClusterError::InvalidParams("no labelled cars or trucks".into())),
    }
}
