//! Standard and progressive probabilistic Hough transforms.
//!
//! Image coordinates are `x` = channel (column) and `y` = time row. A line is
//! parameterized by its direction angle `theta` measured from the channel
//! axis and its signed offset
//!
//! ```text
//! rho = -x sin(theta) + y cos(theta)
//! ```
//!
//! which is the usual normal form `x cos(phi) + y sin(phi)` with the normal
//! angle `phi = theta + pi/2`. With this choice a trajectory of speed `v`
//! has `theta = arctan(ds * fs * 3.6 / v)`, positive for vehicles moving
//! towards higher channels, and the speed window is a plain angle interval.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waterfall::BinaryImage;
use crate::Direction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HoughError {
    #[error("invalid Hough parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoughParams {
    pub rho_res: f64,
    pub theta_res: f64,
    pub theta_window: (f64, f64),
    pub vote_threshold: usize,
    /// Euclidean length in pixels.
    pub min_line_length: f64,
    pub max_line_gap: usize,
}

impl HoughParams {
    pub fn validate(&self) -> Result<(), HoughError> {
        let (lo, hi) = self.theta_window;
        let half_pi = std::f64::consts::FRAC_PI_2;
        let problem = if !(self.rho_res > 0.0) {
            "rho_res must be positive"
        } else if !(self.theta_res > 0.0) {
            "theta_res must be positive"
        } else if !(lo < hi && lo > -half_pi && hi <= half_pi + 1e-12) {
            "theta window must satisfy -pi/2 < min < max <= pi/2"
        } else if self.vote_threshold < 2 {
            "vote_threshold must be at least 2"
        } else if !(self.min_line_length >= 2.0) {
            "min_line_length must be at least 2"
        } else {
            return Ok(());
        };
        Err(HoughError::InvalidParams(problem.to_string()))
    }
}

/// Endpoint in waterfall coordinates, time relative to the image start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPoint {
    pub channel: f64,
    pub time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub p1: SegmentPoint,
    pub p2: SegmentPoint,
    pub votes: usize,
    /// Line the endpoints lie on, in pixel units.
    pub rho: f64,
    pub theta: f64,
}

impl LineSegment {
    /// Orders the endpoints so that `p1.channel <= p2.channel`.
    pub fn new(a: SegmentPoint, b: SegmentPoint, votes: usize, rho: f64, theta: f64) -> Self {
        let (p1, p2) = if (a.channel, a.time_s) <= (b.channel, b.time_s) { (a, b) } else { (b, a) };
        Self { p1, p2, votes, rho, theta }
    }

    /// `Up` when time increases with channel, `Down` when it decreases,
    /// `None` for a horizontal or vertical segment.
    pub fn direction(&self) -> Option<Direction> {
        let dc = self.p2.channel - self.p1.channel;
        let dt = self.p2.time_s - self.p1.time_s;
        if dc == 0.0 || dt == 0.0 {
            None
        } else if dt / dc > 0.0 {
            Some(Direction::Up)
        } else {
            Some(Direction::Down)
        }
    }
}

/// Vote grid over `rho` in `[-rho_max, rho_max]` and the theta window.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulator {
    rho_res: f64,
    rho_half: usize,
    thetas: Vec<f64>,
    sin: Vec<f64>,
    cos: Vec<f64>,
    votes: Vec<u32>,
}

impl Accumulator {
    pub fn new(rows: usize, cols: usize, params: &HoughParams) -> Self {
        let diag = ((rows * rows + cols * cols) as f64).sqrt();
        let rho_half = (diag / params.rho_res).ceil() as usize;
        let (lo, hi) = params.theta_window;
        let n_theta = ((hi - lo) / params.theta_res + 1e-9).floor() as usize + 1;
        let thetas: Vec<f64> = (0..n_theta).map(|k| lo + k as f64 * params.theta_res).collect();
        Self {
            rho_res: params.rho_res,
            rho_half,
            sin: thetas.iter().map(|t| t.sin()).collect(),
            cos: thetas.iter().map(|t| t.cos()).collect(),
            thetas,
            votes: vec![0; n_theta * (2 * rho_half + 1)],
        }
    }

    pub fn n_rho(&self) -> usize {
        2 * self.rho_half + 1
    }

    pub fn n_theta(&self) -> usize {
        self.thetas.len()
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_half as f64 * self.rho_res
    }

    pub fn theta(&self, ti: usize) -> f64 {
        self.thetas[ti]
    }

    pub fn rho(&self, ri: usize) -> f64 {
        (ri as f64 - self.rho_half as f64) * self.rho_res
    }

    pub fn votes(&self, ri: usize, ti: usize) -> u32 {
        self.votes[ti * self.n_rho() + ri]
    }

    pub fn total_votes(&self) -> u64 {
        self.votes.iter().map(|&v| v as u64).sum()
    }

    pub fn rho_index(&self, rho: f64) -> usize {
        ((rho / self.rho_res).round() + self.rho_half as f64) as usize
    }

    /// Nearest theta bin to an angle, clamped to the window.
    pub fn theta_index(&self, theta: f64) -> usize {
        let res = if self.thetas.len() > 1 { self.thetas[1] - self.thetas[0] } else { 1.0 };
        (((theta - self.thetas[0]) / res).round().max(0.0) as usize).min(self.thetas.len() - 1)
    }

    #[inline]
    fn rho_bin(&self, x: usize, y: usize, ti: usize) -> usize {
        let rho = -(x as f64) * self.sin[ti] + y as f64 * self.cos[ti];
        self.rho_index(rho)
    }

    /// Adds one vote per theta bin; returns the fullest bin touched.
    fn vote(&mut self, x: usize, y: usize) -> (usize, usize, u32) {
        let n_rho = self.n_rho();
        let mut best = (0, 0, 0);
        for ti in 0..self.thetas.len() {
            let ri = self.rho_bin(x, y, ti);
            let v = &mut self.votes[ti * n_rho + ri];
            *v += 1;
            if *v > best.2 {
                best = (ri, ti, *v);
            }
        }
        best
    }

    fn unvote(&mut self, x: usize, y: usize) {
        let n_rho = self.n_rho();
        for ti in 0..self.thetas.len() {
            let ri = self.rho_bin(x, y, ti);
            self.votes[ti * n_rho + ri] -= 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub rho: f64,
    pub theta: f64,
    pub votes: u32,
    pub rho_idx: usize,
    pub theta_idx: usize,
}

/// Full voting by every foreground pixel, then 3x3 local maxima at or above
/// the vote threshold. A plateau yields one peak, its first bin in raster
/// order.
pub fn standard_hough(img: &BinaryImage, params: &HoughParams) -> Result<(Accumulator, Vec<Peak>), HoughError> {
    params.validate()?;
    let mut acc = Accumulator::new(img.rows(), img.cols(), params);
    for (x, y) in img.foreground() {
        acc.vote(x, y);
    }
    let (n_rho, n_theta) = (acc.n_rho() as isize, acc.n_theta() as isize);
    let mut peaks = Vec::new();
    for ti in 0..n_theta {
        for ri in 0..n_rho {
            let v = acc.votes(ri as usize, ti as usize);
            if (v as usize) < params.vote_threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dt in -1..=1isize {
                for dr in -1..=1isize {
                    let (t, r) = (ti + dt, ri + dr);
                    if (dt, dr) == (0, 0) || t < 0 || r < 0 || t >= n_theta || r >= n_rho {
                        continue;
                    }
                    let w = acc.votes(r as usize, t as usize);
                    let earlier = (t, r) < (ti, ri);
                    if w > v || (earlier && w == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push(Peak {
                    rho: acc.rho(ri as usize),
                    theta: acc.theta(ti as usize),
                    votes: v,
                    rho_idx: ri as usize,
                    theta_idx: ti as usize,
                });
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.votes
            .cmp(&a.votes)
            .then(a.rho.total_cmp(&b.rho))
            .then(a.theta.total_cmp(&b.theta))
    });
    Ok((acc, peaks))
}

/// Pixels met when walking the full line through `(x0, y0)` at `theta`,
/// ordered along the line and restricted to the image.
fn walk_line(x0: f64, y0: f64, theta: f64, rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut pts = Vec::new();
    if dx.abs() >= dy.abs() {
        let slope = dy / dx;
        for x in 0..cols {
            let y = (y0 + (x as f64 - x0) * slope).round();
            if y >= 0.0 && (y as usize) < rows {
                pts.push((x, y as usize));
            }
        }
    } else {
        let slope = dx / dy;
        for y in 0..rows {
            let x = (x0 + (y as f64 - y0) * slope).round();
            if x >= 0.0 && (x as usize) < cols {
                pts.push((x as usize, y));
            }
        }
    }
    pts
}

fn run_length(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Pixel state seen by a line walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Free,
    /// Foreground already claimed by an emitted line.
    Taken,
    Empty,
}

/// Longest run of free pixels along `path` with at most `max_gap` empty
/// pixels between consecutive free ones. Taken pixels neither break a run
/// nor add to its length, so a line survives being crossed by another
/// while a walk along an emitted line finds nothing. The length is the
/// end-to-end distance scaled by the share of the run that is not taken.
fn longest_run(path: &[(usize, usize)], cell: impl Fn(usize, usize) -> Cell, max_gap: usize) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    let mut start: Option<usize> = None;
    let (mut misses, mut taken, mut pending) = (0, 0, 0);
    for (i, &(px, py)) in path.iter().enumerate() {
        match cell(px, py) {
            Cell::Empty => misses += 1,
            Cell::Taken => pending += 1,
            Cell::Free => {
                match start {
                    Some(s) if misses <= max_gap => {
                        taken += pending;
                        let len = run_length(path[s], path[i]) * (1.0 - taken as f64 / (i - s + 1) as f64);
                        if best.map_or(true, |b| len > b.2) {
                            best = Some((s, i, len));
                        }
                    }
                    _ => {
                        start = Some(i);
                        taken = 0;
                        if best.is_none() {
                            best = Some((i, i, 0.0));
                        }
                    }
                }
                misses = 0;
                pending = 0;
            }
        }
    }
    best
}

/// Total least squares line through a point set: centroid and direction
/// angle in `(-pi/2, pi/2]`.
fn fit_line(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let mut theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    if theta <= -std::f64::consts::FRAC_PI_2 {
        theta += std::f64::consts::PI;
    }
    Some((mx, my, theta))
}

/// Least squares fit, then a second fit without the points whose residual
/// exceeds one pixel plus three median absolute residuals.
fn robust_fit(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let (mx, my, t) = fit_line(pts)?;
    let resid = |&(x, y): &(f64, f64)| (-(x - mx) * t.sin() + (y - my) * t.cos()).abs();
    let mut r: Vec<f64> = pts.iter().map(resid).collect();
    r.sort_by(f64::total_cmp);
    let limit = 1.0 + 3.0 * r[r.len() / 2];
    let kept: Vec<(f64, f64)> = pts.iter().copied().filter(|p| resid(p) <= limit).collect();
    fit_line(&kept).or(Some((mx, my, t)))
}

/// Widest stretch of a band crossed by the line, measured along the minor
/// axis from `(x, y)`: returns the offsets `(lo, hi)` of the last available
/// pixels on either side, each capped at `CROSS_SECTION_CAP`.
fn cross_section(x: usize, y: usize, x_major: bool, rows: usize, cols: usize, avail: impl Fn(usize, usize) -> bool) -> (i64, i64) {
    let at = |d: i64| -> Option<(usize, usize)> {
        let (qx, qy) = if x_major { (x as i64, y as i64 + d) } else { (x as i64 + d, y as i64) };
        (qx >= 0 && qy >= 0 && (qx as usize) < cols && (qy as usize) < rows).then_some((qx as usize, qy as usize))
    };
    let mut hi = 0;
    while hi < CROSS_SECTION_CAP && at(hi + 1).is_some_and(|(qx, qy)| avail(qx, qy)) {
        hi += 1;
    }
    let mut lo = 0;
    while lo > -CROSS_SECTION_CAP && at(lo - 1).is_some_and(|(qx, qy)| avail(qx, qy)) {
        lo -= 1;
    }
    (lo, hi)
}

/// Largest half-width, in pixels, a band cross-section may have.
const CROSS_SECTION_CAP: i64 = 64;

/// Progressive probabilistic Hough transform.
///
/// Foreground pixels are visited in a seeded random order (ChaCha8). Each
/// visited pixel votes; once its fullest bin reaches the threshold, the line
/// through it at that bin's angle is walked across the whole image and split
/// into runs of available pixels separated by at most `max_line_gap` misses;
/// pixels an earlier line claimed bridge a run without lengthening it.
/// The longest run is refitted by least squares through the midpoints of the
/// band cross-sections it passes and walked once more, which removes the
/// drift a coarse angle bin causes over long lines. If the final run is long
/// enough it is emitted, after which the band cross-sections along it
/// withdraw their votes and leave the pool. Collinear pieces of one line are
/// joined at the end. The emitted `rho`/`theta` describe the line the
/// endpoints lie on.
pub fn prob_hough(img: &BinaryImage, params: &HoughParams, seed: u64) -> Result<Vec<LineSegment>, HoughError> {
    params.validate()?;
    let (rows, cols) = (img.rows(), img.cols());
    let fs = img.axes().sample_rate_hz;
    let mut acc = Accumulator::new(rows, cols, params);
    let mut order = img.foreground();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // 0 = background, 1 = available, 2 = available and voted, 3 = claimed.
    let mut state: Vec<u8> = img.bits().iter().map(|&b| b as u8).collect();
    let mut out = Vec::new();

    for &(x, y) in &order {
        if state[y * cols + x] != 1 {
            continue;
        }
        state[y * cols + x] = 2;
        let (ri, ti, v) = acc.vote(x, y);
        if (v as usize) < params.vote_threshold {
            continue;
        }

        let avail = |px: usize, py: usize| matches!(state[py * cols + px], 1 | 2);
        let cell = |px: usize, py: usize| match state[py * cols + px] {
            0 => Cell::Empty,
            3 => Cell::Taken,
            _ => Cell::Free,
        };
        let mut theta = acc.theta(ti);
        // The walked line passes through the pixel itself, not the bin centre.
        let mut rho = -(x as f64) * theta.sin() + y as f64 * theta.cos();
        debug_assert!((rho - acc.rho(ri)).abs() <= 0.5 * params.rho_res + 1e-9);
        let mut path = walk_line(x as f64, y as f64, theta, rows, cols);
        let Some(mut run) = longest_run(&path, cell, params.max_line_gap) else { continue };
        // Refit through the middle of the band the run crosses: a run can
        // cut a thick band at a slight angle, its band centre cannot.
        let x_major = theta.cos().abs() >= theta.sin().abs();
        let mids: Vec<(f64, f64)> = path[run.0..=run.1]
            .iter()
            .filter(|&&(px, py)| avail(px, py))
            .map(|&(px, py)| {
                let (lo, hi) = cross_section(px, py, x_major, rows, cols, avail);
                let m = 0.5 * (lo + hi) as f64;
                if x_major { (px as f64, py as f64 + m) } else { (px as f64 + m, py as f64) }
            })
            .collect();
        if let Some((mx, my, ft)) = robust_fit(&mids) {
            let refit_path = walk_line(mx, my, ft, rows, cols);
            if let Some(r2) = longest_run(&refit_path, cell, params.max_line_gap) {
                if r2.2 >= params.min_line_length.min(run.2) {
                    run = r2;
                    path = refit_path;
                    theta = ft;
                    rho = -mx * ft.sin() + my * ft.cos();
                }
            }
        }
        let (s, e, len) = run;
        if len < params.min_line_length {
            continue;
        }
        // The band cross-section at each run pixel leaves the pool, so
        // neither rounding differences between walks nor the band's width
        // yield further copies of the same line. Each cross-section is cut
        // to the run's median half-width so a line crossing the band is not
        // swallowed along with it.
        let x_major = theta.cos().abs() >= theta.sin().abs();
        let sections: Vec<(i64, i64)> =
            path[s..=e].iter().map(|&(px, py)| cross_section(px, py, x_major, rows, cols, |qx, qy| matches!(state[qy * cols + qx], 1 | 2))).collect();
        let mut halves: Vec<i64> = sections.iter().map(|&(lo, hi)| (-lo).max(hi)).collect();
        halves.sort_unstable();
        let half = halves[halves.len() / 2].max(1);
        for (&(px, py), &(lo, hi)) in path[s..=e].iter().zip(&sections) {
            for d in lo.max(-half).min(-1)..=hi.min(half).max(1) {
                let (qx, qy) = if x_major { (px as i64, py as i64 + d) } else { (px as i64 + d, py as i64) };
                if qx < 0 || qy < 0 || qx as usize >= cols || qy as usize >= rows {
                    continue;
                }
                let idx = qy as usize * cols + qx as usize;
                if state[idx] == 2 {
                    acc.unvote(qx as usize, qy as usize);
                }
                if state[idx] != 0 {
                    state[idx] = 3;
                }
            }
        }
        let to_point = |(px, py): (usize, usize)| SegmentPoint { channel: px as f64, time_s: py as f64 / fs };
        out.push(LineSegment::new(to_point(path[s]), to_point(path[e]), v as usize, rho, theta));
    }
    Ok(merge_collinear(out, img, params))
}

/// Joins segments lying on one line whose union has no gap wider than
/// `max_line_gap` in the input image. A line cut where a crossing line
/// took its pixels comes out whole again.
fn merge_collinear(mut segs: Vec<LineSegment>, img: &BinaryImage, params: &HoughParams) -> Vec<LineSegment> {
    'scan: loop {
        for i in 0..segs.len() {
            for j in i + 1..segs.len() {
                if let Some(m) = try_merge(&segs[i], &segs[j], img, params) {
                    segs[i] = m;
                    segs.remove(j);
                    continue 'scan;
                }
            }
        }
        return segs;
    }
}

fn try_merge(a: &LineSegment, b: &LineSegment, img: &BinaryImage, params: &HoughParams) -> Option<LineSegment> {
    let d = (a.theta - b.theta).abs();
    if d.min(std::f64::consts::PI - d) > 2.0 * params.theta_res {
        return None;
    }
    let fs = img.axes().sample_rate_hz;
    let pts: Vec<(f64, f64)> = [a.p1, a.p2, b.p1, b.p2].iter().map(|p| (p.channel, (p.time_s * fs).round())).collect();
    let dist = |p: (f64, f64), q: (f64, f64)| (p.0 - q.0).hypot(p.1 - q.1);
    let mut ends = (pts[0], pts[1]);
    for i in 0..4 {
        for j in i + 1..4 {
            if dist(pts[i], pts[j]) > dist(ends.0, ends.1) {
                ends = (pts[i], pts[j]);
            }
        }
    }
    let (e1, e2) = ends;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut theta = (e2.1 - e1.1).atan2(e2.0 - e1.0);
    if theta > half_pi {
        theta -= std::f64::consts::PI;
    } else if theta <= -half_pi {
        theta += std::f64::consts::PI;
    }
    let (sin, cos) = theta.sin_cos();
    let rho = -e1.0 * sin + e1.1 * cos;
    if pts.iter().any(|p| (-p.0 * sin + p.1 * cos - rho).abs() > params.rho_res) {
        return None;
    }
    let path = walk_line(e1.0, e1.1, theta, img.rows(), img.cols());
    let at = |e: (f64, f64)| {
        let d = |&(x, y): &(usize, usize)| (x as f64 - e.0).hypot(y as f64 - e.1);
        (0..path.len()).min_by(|&i, &j| d(&path[i]).total_cmp(&d(&path[j])))
    };
    // Each piece already passed its own gap check; only the stretch between them is walked.
    let span = |p: (f64, f64), q: (f64, f64)| -> Option<(usize, usize)> {
        let (i, j) = (at(p)?, at(q)?);
        Some((i.min(j), i.max(j)))
    };
    let (sa, sb) = (span(pts[0], pts[1])?, span(pts[2], pts[3])?);
    let (first, second) = if sa.0 <= sb.0 { (sa, sb) } else { (sb, sa) };
    let mut gap = 0;
    for &(x, y) in path.iter().take(second.0).skip(first.1 + 1) {
        if img.get(x, y) {
            gap = 0;
        } else {
            gap += 1;
            if gap > params.max_line_gap {
                return None;
            }
        }
    }
    let point = |(x, y): (f64, f64)| SegmentPoint { channel: x, time_s: y / fs };
    Some(LineSegment::new(point(e1), point(e2), a.votes + b.votes, rho, theta))
}

/// Pixel-space angle of a trajectory at `speed_kmh` on a grid of `fs_hz`
/// rows per second and `ds_m` meters per channel.
pub fn speed_to_theta(speed_kmh: f64, fs_hz: f64, ds_m: f64) -> f64 {
    (ds_m * fs_hz * 3.6 / speed_kmh).atan()
}

/// Inverse of [`speed_to_theta`] for a positive angle.
pub fn theta_to_speed(theta: f64, fs_hz: f64, ds_m: f64) -> f64 {
    ds_m * fs_hz * 3.6 / theta.tan()
}

/// Angle interval covering speeds `u1 <= u2`, widened by `margin` on both
/// sides, for traffic moving towards higher channels.
pub fn theta_window_for_speeds(u1_kmh: f64, u2_kmh: f64, fs_hz: f64, ds_m: f64, margin: f64) -> (f64, f64) {
    let a = speed_to_theta(u1_kmh, fs_hz, ds_m);
    let b = speed_to_theta(u2_kmh, fs_hz, ds_m);
    (a.min(b) - margin, a.max(b) + margin)
}

/// Mirrors an `Up` window for `Down` traffic.
pub fn window_for_direction(window: (f64, f64), direction: Direction) -> (f64, f64) {
    match direction {
        Direction::Up => window,
        Direction::Down => (-window.1, -window.0),
    }
}

/// Angle step that resolves a speed change of `dv_kmh` at `speed_kmh`.
pub fn theta_res_for(speed_kmh: f64, dv_kmh: f64, fs_hz: f64, ds_m: f64) -> f64 {
    (speed_to_theta(speed_kmh, fs_hz, ds_m) - speed_to_theta(speed_kmh + dv_kmh, fs_hz, ds_m)).abs()
}
