//! Scene builders, reference implementations and the invariant suites shared
//! by the integration test targets.

#![allow(dead_code)]

use std::collections::BTreeSet;

use dastrack::cluster::{
    consolidate, dbscan, extrapolate, segment_distance, speed_and_direction, ClusterParams, ExtrapolatedLine,
};
use dastrack::evaluate::{evaluate, LossParams};
use dastrack::hough::{prob_hough, standard_hough, HoughParams, LineSegment, SegmentPoint};
use dastrack::preprocess::{
    binarize, convolve2d, convolve2d_direct, convolve2d_fft, covariance_from_speeds, low_pass, slope_angle,
    DirectionalKernelSpec, Kernel, LowPassSpec, ThresholdSpec,
};
use dastrack::simulate::{render, Noise, Scenario, Vehicle};
use dastrack::stream::TrackState;
use dastrack::tune::{optimize, split_trials, suggest, trial_rng, Dim, Scale, SearchSpace, TpeConfig, Trial};
use dastrack::waterfall::{bresenham, concat_time, decode_dasw, encode_dasw, mask_channels, Axes, BinaryImage, ChannelMask, Waterfall};
use dastrack::Direction;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 100;

pub fn runner() -> TestRunner {
    let config = Config { cases: CASES, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S, F>(strategy: S, test: F) -> Result<(), String>
where
    S: Strategy,
    S::Value: std::fmt::Debug,
    F: Fn(S::Value) -> Result<(), TestCaseError>,
{
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

pub fn axes(fs: f64) -> Axes {
    Axes { sample_rate_hz: fs, channel_spacing_m: 1.0, start_time_ns: 1_000_000_000, channel_offset: 0 }
}

pub fn random_waterfall(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fs: f64) -> Waterfall {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Waterfall::new(data, rows, cols, axes(fs)).unwrap()
}

// ---------------------------------------------------------------- oracles

/// Mean of `|d0 + (d1 - d0) s|` over `[0, 1]` by the trapezoid rule on
/// `n` equal panels, with the sign change added as an extra node so the
/// piecewise-linear integrand is integrated without a kink inside a panel.
pub fn trapezoid_l1_mean(d0: f64, d1: f64, n: usize) -> f64 {
    let f = |s: f64| (d0 + (d1 - d0) * s).abs();
    let mut nodes: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
    if d0 * d1 < 0.0 {
        nodes.push(d0 / (d0 - d1));
        nodes.sort_by(f64::total_cmp);
    }
    nodes.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (f(w[0]) + f(w[1]))).sum()
}

/// DBSCAN straight from the definitions: cores are points with at least
/// `min_segs` points (itself included) within `eps`; clusters are the
/// connected components of cores under the `eps` relation, ordered by their
/// smallest core; each non-core point with a core neighbour joins the
/// earliest such component.
pub fn reference_dbscan(d: &[Vec<f64>], eps: f64, min_segs: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = d.len();
    let near = |i: usize, j: usize| i == j || d[i][j] <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_segs).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    // Component id = its smallest core, which is also its discovery rank.
    let comp: Vec<Option<usize>> = (0..n).map(|i| core[i].then(|| root(&mut parent, i))).collect();
    let mut firsts: Vec<usize> = comp.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    firsts.sort_unstable();
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); firsts.len()];
    let rank = |c: usize| firsts.binary_search(&c).unwrap();
    let mut noise = Vec::new();
    for i in 0..n {
        let owner = match comp[i] {
            Some(c) => Some(c),
            None => (0..n).filter(|&j| core[j] && near(i, j)).map(|j| comp[j].unwrap()).min(),
        };
        match owner {
            Some(c) => clusters[rank(c)].push(i),
            None => noise.push(i),
        }
    }
    clusters.sort_by_key(|m| m[0]);
    (clusters, noise)
}

/// Pixels of the line `-x sin(theta) + y cos(theta) = rho` between the
/// endpoints `a` and `b`, one per step along the major axis.
pub fn line_pixels(rho: f64, theta: f64, a: (f64, f64), b: (f64, f64)) -> Vec<(i64, i64)> {
    let (s, c) = theta.sin_cos();
    if c.abs() >= s.abs() {
        let (x0, x1) = (a.0.min(b.0) as i64, a.0.max(b.0) as i64);
        (x0..=x1).map(|x| (x, ((rho + x as f64 * s) / c).round() as i64)).collect()
    } else {
        let (y0, y1) = (a.1.min(b.1) as i64, a.1.max(b.1) as i64);
        (y0..=y1).map(|y| (((y as f64 * c - rho) / s).round() as i64, y)).collect()
    }
}

/// Longest run of consecutive background pixels along `pixels`.
pub fn longest_gap(img: &BinaryImage, pixels: &[(i64, i64)]) -> usize {
    let (mut gap, mut worst) = (0, 0);
    for &(x, y) in pixels {
        let inside = x >= 0 && y >= 0 && (x as usize) < img.cols() && (y as usize) < img.rows();
        if inside && img.get(x as usize, y as usize) {
            gap = 0;
        } else {
            gap += 1;
            worst = worst.max(gap);
        }
    }
    worst
}

// ---------------------------------------------------------------- scenes

/// A synthetic edge image with known lines.
pub struct LineScene {
    pub img: BinaryImage,
    /// `(x, y)` of a point on the line and its direction angle.
    pub lines: Vec<(f64, f64, f64)>,
}

pub fn scene_params() -> HoughParams {
    HoughParams {
        rho_res: 1.0,
        theta_res: std::f64::consts::PI / 180.0,
        theta_window: (-1.3, 1.3),
        vote_threshold: 15,
        min_line_length: 25.0,
        max_line_gap: 3,
    }
}

/// `n_lines` straight lines crossing a `size`x`size` image through its
/// central region, pairwise at least 0.25 rad apart, plus `noise_frac` of
/// the pixels set at random.
pub fn line_scene(seed: u64, size: usize, n_lines: usize, noise_frac: f64) -> LineScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines: Vec<(f64, f64, f64)> = Vec::new();
    while lines.len() < n_lines {
        let theta = rng.gen_range(-1.2..1.2);
        if lines.iter().any(|l| (l.2 - theta).abs() < 0.25) {
            continue;
        }
        let c = size as f64;
        lines.push((rng.gen_range(0.3 * c..0.7 * c), rng.gen_range(0.3 * c..0.7 * c), theta));
    }
    let mut pixels: Vec<(usize, usize)> = Vec::new();
    let far = 4 * size as i64;
    for &(x, y, t) in &lines {
        let (dx, dy) = (t.cos(), t.sin());
        let a = ((x - far as f64 * dx).round() as i64, (y - far as f64 * dy).round() as i64);
        let b = ((x + far as f64 * dx).round() as i64, (y + far as f64 * dy).round() as i64);
        pixels.extend(
            bresenham(a.0, a.1, b.0, b.1)
                .into_iter()
                .filter(|&(px, py)| px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size)
                .map(|(px, py)| (px as usize, py as usize)),
        );
    }
    let n_noise = (noise_frac * (size * size) as f64).round() as usize;
    for _ in 0..n_noise {
        pixels.push((rng.gen_range(0..size), rng.gen_range(0..size)));
    }
    LineScene { img: BinaryImage::from_pixels(size, size, pixels), lines }
}

pub fn random_lines(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<ExtrapolatedLine> {
    (0..n)
        .map(|_| {
            let t0 = rng.gen_range(0.0..60.0);
            ExtrapolatedLine::new(t0, t0 + rng.gen_range(-40.0..40.0), extent)
        })
        .collect()
}

pub fn as_sets(clusters: &[Vec<usize>]) -> BTreeSet<BTreeSet<usize>> {
    clusters.iter().map(|c| c.iter().copied().collect()).collect()
}

/// Sum of squares centred at `c`, a convex bowl on `[-5, 5]^3`.
pub fn bowl(w: &[f64]) -> f64 {
    let c = [1.0, -2.0, 0.5];
    w.iter().zip(c).map(|(x, c)| (x - c) * (x - c)).sum()
}

pub fn bowl_space() -> SearchSpace {
    SearchSpace::new((0..3).map(|i| Dim::new(&format!("x{i}"), -5.0, 5.0, Scale::Linear)).collect()).unwrap()
}

/// Best bowl value of `budget` uniform draws.
pub fn random_search_bowl(seed: u64, budget: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..budget)
        .map(|_| bowl(&(0..3).map(|_| rng.gen_range(-5.0..=5.0)).collect::<Vec<_>>()))
        .fold(f64::INFINITY, f64::min)
}

pub fn tpe_bowl(seed: u64, budget: usize) -> f64 {
    let cfg = TpeConfig { seed, ..TpeConfig::default() };
    let (best, _) = optimize(|w: &[f64], _| Ok::<f64, String>(bowl(w)), &bowl_space(), budget, &cfg).unwrap();
    best.loss
}

fn scalar_dist(a: &f64, b: &f64) -> f64 {
    (a - b).abs()
}

// ---------------------------------------------------------------- waterfall

pub fn dasw_roundtrip() -> Result<(), String> {
    run((1usize..24, 1usize..24, any::<u64>(), 1.0f64..5000.0, any::<i64>(), 0u32..1000), |(rows, cols, seed, fs, t0, off)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| (rng.gen::<f32>() * 2e-6 - 1e-6) as f64).collect();
        let ax = Axes { sample_rate_hz: fs, channel_spacing_m: rng.gen_range(0.5..5.0), start_time_ns: t0, channel_offset: off };
        let w = Waterfall::new(data, rows, cols, ax).unwrap();
        let back = decode_dasw(&encode_dasw(&w)).unwrap();
        prop_assert_eq!(back.data(), w.data());
        prop_assert_eq!(back.axes(), w.axes());
        Ok(())
    })
}

pub fn mask_composition() -> Result<(), String> {
    run((12usize..60, 0usize..4, 0usize..4, 1usize..4, 0usize..3, any::<u64>()), |(cols, head, tail, coil_at, coil_len, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_waterfall(&mut rng, 3, cols, 10.0);
        let first = ChannelMask { head_drop: head, coil_range: (0, 0), tail_drop: 0 };
        let second = ChannelMask { head_drop: 0, coil_range: (coil_at, coil_at + coil_len), tail_drop: tail };
        let combined = ChannelMask { head_drop: head, coil_range: (head + coil_at, head + coil_at + coil_len), tail_drop: tail };
        let two = mask_channels(&mask_channels(&w, &first).unwrap(), &second).unwrap();
        let one = mask_channels(&w, &combined).unwrap();
        prop_assert_eq!(two.cols(), one.cols());
        prop_assert_eq!(two.data(), one.data());
        prop_assert_eq!(two.axes().channel_offset, one.axes().channel_offset);
        Ok(())
    })
}

pub fn concat_rows() -> Result<(), String> {
    run((1usize..30, 1usize..30, 1usize..6, any::<u64>()), |(ra, rb, cols, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_waterfall(&mut rng, ra, cols, 100.0);
        let mut b = random_waterfall(&mut rng, rb, cols, 100.0);
        b = Waterfall::new(b.data().to_vec(), rb, cols, Axes { start_time_ns: a.axes().row_time_ns(ra), ..*a.axes() }).unwrap();
        let c = concat_time(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(c.rows(), ra + rb);
        for r in 0..ra + rb {
            for col in 0..cols {
                let src = if r < ra { a.get(r, col) } else { b.get(r - ra, col) };
                prop_assert_eq!(c.get(r, col), src);
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- preprocess

pub fn low_pass_idempotent() -> Result<(), String> {
    run((16usize..300, 1usize..4, 0.5f64..45.0, any::<u64>()), |(rows, cols, fc, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_waterfall(&mut rng, rows, cols, 100.0);
        let spec = LowPassSpec::new(fc);
        let once = low_pass(&w, &spec).unwrap();
        let twice = low_pass(&once, &spec).unwrap();
        let rms = (once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / once.data().len() as f64).sqrt();
        prop_assert!(rms < 1e-9, "rms change {}", rms);
        Ok(())
    })
}

pub fn low_pass_keeps_mean() -> Result<(), String> {
    run((16usize..300, 1usize..4, 0.5f64..45.0, any::<u64>()), |(rows, cols, fc, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_waterfall(&mut rng, rows, cols, 100.0);
        let out = low_pass(&w, &LowPassSpec::new(fc)).unwrap();
        for c in 0..cols {
            let m = |x: &Waterfall| x.channel(c).iter().sum::<f64>() / rows as f64;
            prop_assert!((m(&w) - m(&out)).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn covariance_round_trip() -> Result<(), String> {
    run((5.0f64..200.0, 0.5f64..80.0, 0.5f64..40.0, any::<bool>()), |(u1, du, sigma, up)| {
        let dir = if up { Direction::Up } else { Direction::Down };
        let u2 = u1 + du;
        let cov = covariance_from_speeds(&DirectionalKernelSpec::new(u1, u2, sigma, dir)).unwrap();
        let e = cov.eigen();
        let (g1, g2) = (slope_angle(u1), slope_angle(u2));
        let gamma = 0.5 * (g1 + g2);
        let mut angle = e.axis1.1.atan2(e.axis1.0);
        if angle > std::f64::consts::FRAC_PI_2 {
            angle -= std::f64::consts::PI;
        } else if angle <= -std::f64::consts::FRAC_PI_2 {
            angle += std::f64::consts::PI;
        }
        prop_assert!((angle - dir.sign() * gamma).abs() < 1e-9, "angle {} vs {}", angle, gamma);
        let ratio = 1.0 / (g1 - gamma).tan();
        prop_assert!(((e.lambda1 / e.lambda2) / ratio - 1.0).abs() < 1e-9);
        Ok(())
    })
}

fn odd_at_most(k: usize, n: usize) -> usize {
    k.min(n - 1 + n % 2)
}

fn random_kernel(rng: &mut ChaCha8Rng, kr: usize, kc: usize) -> Kernel {
    Kernel::new((0..kr * kc).map(|_| rng.gen_range(-1.0..1.0)).collect(), kr, kc).unwrap()
}

pub fn convolution_linear() -> Result<(), String> {
    run((4usize..30, 4usize..30, 0usize..4, 0usize..4, -3.0f64..3.0, -3.0f64..3.0, any::<u64>()), |(rows, cols, hr, hc, a, b, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_waterfall(&mut rng, rows, cols, 10.0);
        let y = random_waterfall(&mut rng, rows, cols, 10.0);
        let k = random_kernel(&mut rng, odd_at_most(2 * hr + 1, rows), odd_at_most(2 * hc + 1, cols));
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = convolve2d(&Waterfall::new(mix, rows, cols, *x.axes()).unwrap(), &k).unwrap();
        let (cx, cy) = (convolve2d(&x, &k).unwrap(), convolve2d(&y, &k).unwrap());
        for i in 0..lhs.data().len() {
            prop_assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn convolution_fft_matches_direct() -> Result<(), String> {
    run((1usize..40, 1usize..40, 0usize..6, 0usize..6, any::<u64>()), |(rows, cols, hr, hc, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_waterfall(&mut rng, rows, cols, 10.0);
        let k = random_kernel(&mut rng, odd_at_most(2 * hr + 1, rows), odd_at_most(2 * hc + 1, cols));
        let (d, f) = (convolve2d_direct(&x, &k).unwrap(), convolve2d_fft(&x, &k).unwrap());
        for (p, q) in d.data().iter().zip(f.data()) {
            prop_assert!((p - q).abs() < 1e-9, "{} vs {}", p, q);
        }
        Ok(())
    })
}

pub fn binarize_monotone() -> Result<(), String> {
    run((1usize..30, 1usize..30, -1.0f64..1.0, 0.0f64..1.0, any::<u64>()), |(rows, cols, t1, dt, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_waterfall(&mut rng, rows, cols, 10.0);
        let lo = binarize(&w, &ThresholdSpec { tau: t1 });
        let hi = binarize(&w, &ThresholdSpec { tau: t1 + dt });
        prop_assert!(hi.count_ones() <= lo.count_ones());
        prop_assert!(hi.bits().iter().zip(lo.bits()).all(|(&h, &l)| !h || l));
        Ok(())
    })
}

// ---------------------------------------------------------------- hough

fn scene_strategy() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 24usize..64, 0usize..4)
}

pub fn standard_vote_total() -> Result<(), String> {
    run(scene_strategy(), |(seed, size, k)| {
        let s = line_scene(seed, size, k, 0.02);
        let p = scene_params();
        let (acc, _) = standard_hough(&s.img, &p).unwrap();
        prop_assert_eq!(acc.total_votes(), (s.img.count_ones() * acc.n_theta()) as u64);
        Ok(())
    })
}

pub fn segments_on_their_line() -> Result<(), String> {
    run(scene_strategy(), |(seed, size, k)| {
        let s = line_scene(seed, size, k, 0.02);
        let p = scene_params();
        for seg in prob_hough(&s.img, &p, seed).unwrap() {
            for q in [seg.p1, seg.p2] {
                let r = -q.channel * seg.theta.sin() + q.time_s * seg.theta.cos();
                prop_assert!((r - seg.rho).abs() <= p.rho_res, "endpoint off line by {}", (r - seg.rho).abs());
            }
        }
        Ok(())
    })
}

pub fn prob_hough_deterministic() -> Result<(), String> {
    run(scene_strategy(), |(seed, size, k)| {
        let s = line_scene(seed, size, k, 0.02);
        let a = prob_hough(&s.img, &scene_params(), seed).unwrap();
        let b = prob_hough(&s.img, &scene_params(), seed).unwrap();
        prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        Ok(())
    })
}

pub fn segments_rechecked() -> Result<(), String> {
    run(scene_strategy(), |(seed, size, k)| {
        let s = line_scene(seed, size, k, 0.02);
        let p = scene_params();
        for seg in prob_hough(&s.img, &p, seed).unwrap() {
            let a = (seg.p1.channel as i64, seg.p1.time_s as i64);
            let b = (seg.p2.channel as i64, seg.p2.time_s as i64);
            let len = ((a.0 - b.0) as f64).hypot((a.1 - b.1) as f64);
            prop_assert!(len >= p.min_line_length, "length {}", len);
            prop_assert!(s.img.get(a.0 as usize, a.1 as usize) && s.img.get(b.0 as usize, b.1 as usize));
            let path = line_pixels(seg.rho, seg.theta, (seg.p1.channel, seg.p1.time_s), (seg.p2.channel, seg.p2.time_s));
            prop_assert!(path.first() == Some(&a) || path.first() == Some(&b), "walk does not start at an endpoint");
            let gap = longest_gap(&s.img, &path);
            prop_assert!(gap <= p.max_line_gap, "gap {} in {:?}", gap, seg);
        }
        Ok(())
    })
}

pub fn segment_count_monotone() -> Result<(), String> {
    run((scene_strategy(), 2usize..30, 1usize..20), |((seed, size, k), t, dt)| {
        let s = line_scene(seed, size, k, 0.02);
        let p = HoughParams { vote_threshold: t, ..scene_params() };
        let q = HoughParams { vote_threshold: t + dt, ..scene_params() };
        let (a, b) = (prob_hough(&s.img, &p, seed).unwrap().len(), prob_hough(&s.img, &q, seed).unwrap().len());
        prop_assert!(b <= a, "threshold {} gives {} segments, {} gives {}", t, a, t + dt, b);
        Ok(())
    })
}

// ---------------------------------------------------------------- cluster

fn line_strategy() -> impl Strategy<Value = ExtrapolatedLine> {
    (-100.0f64..100.0, -100.0f64..100.0).prop_map(|(a, b)| ExtrapolatedLine::new(a, b, 693.0))
}

pub fn metric_axioms() -> Result<(), String> {
    run((line_strategy(), line_strategy(), line_strategy()), |(a, b, c)| {
        let d = |x: &ExtrapolatedLine, y: &ExtrapolatedLine| segment_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
        Ok(())
    })
}

pub fn dbscan_partition() -> Result<(), String> {
    run((any::<u64>(), 0usize..40, 0.1f64..10.0, 1usize..5), |(seed, n, eps, min_segs)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lines = random_lines(&mut rng, n, 693.0);
        let (clusters, noise) = dbscan(&lines, &ClusterParams { eps_s: eps, min_segs }).unwrap();
        let mut seen: Vec<usize> = clusters.iter().flatten().chain(&noise).copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        Ok(())
    })
}

pub fn dbscan_permutation_invariant() -> Result<(), String> {
    run((any::<u64>(), 1usize..40, 0.1f64..10.0), |(seed, n, eps)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lines = random_lines(&mut rng, n, 693.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<ExtrapolatedLine> = perm.iter().map(|&i| lines[i]).collect();
        let params = ClusterParams { eps_s: eps, min_segs: 1 };
        let (a, _) = dbscan(&lines, &params).unwrap();
        let (b, _) = dbscan(&shuffled, &params).unwrap();
        let back: Vec<Vec<usize>> = b.iter().map(|c| c.iter().map(|&i| perm[i]).collect()).collect();
        prop_assert_eq!(as_sets(&a), as_sets(&back));
        Ok(())
    })
}

pub fn consolidate_is_mean() -> Result<(), String> {
    run((any::<u64>(), 1usize..20, -1.0f64..1.0, -1.0f64..1.0), |(seed, n, d0, d1)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lines = random_lines(&mut rng, n, 693.0);
        let c = consolidate(&lines).unwrap();
        let cost = |t0: f64, tl: f64| lines.iter().map(|l| (l.t_at_s0 - t0).powi(2) + (l.t_at_sl - tl).powi(2)).sum::<f64>();
        prop_assert!(cost(c.t_at_s0, c.t_at_sl) <= cost(c.t_at_s0 + d0, c.t_at_sl + d1) + 1e-9);
        Ok(())
    })
}

pub fn extrapolation_invariant() -> Result<(), String> {
    run((0.0f64..100.0, 0.01f64..0.2, any::<bool>(), 0.0f64..600.0, 5.0f64..300.0), |(t0, pace, up, c1, len)| {
        let slope = if up { pace } else { -pace };
        let c2 = (c1 + len).min(693.0);
        let at = |c: f64| SegmentPoint { channel: c, time_s: t0 + slope * c };
        let whole = LineSegment::new(at(0.0), at(693.0), 0, 0.0, 0.0);
        let part = LineSegment::new(at(c1), at(c2), 0, 0.0, 0.0);
        let (v1, d1) = speed_and_direction(&extrapolate(&whole, 693.0).unwrap(), 1.0).unwrap();
        let (v2, d2) = speed_and_direction(&extrapolate(&part, 693.0).unwrap(), 1.0).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert!((v1 / v2 - 1.0).abs() < 1e-9);
        Ok(())
    })
}

// ---------------------------------------------------------------- evaluate

fn scalar_sets() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(0.0f64..100.0, 1..10), prop::collection::vec(0.0f64..100.0, 0..12))
}

pub fn loss_nonnegative_and_zero_iff_exact() -> Result<(), String> {
    run((scalar_sets(), any::<bool>(), any::<u64>()), |((p, q), exact, seed)| {
        let params = LossParams { alpha: 5.0, beta: 5.0 };
        let q = if exact {
            let mut q = p.clone();
            q.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            q
        } else {
            q
        };
        let r = evaluate(&p, &q, &params, scalar_dist).unwrap();
        prop_assert!(r.loss_seconds >= 0.0);
        let one_exact = r.neighborhoods.iter().enumerate().all(|(i, nb)| nb.len() == 1 && q[nb[0]] == p[i]);
        prop_assert_eq!(r.loss_seconds == 0.0, one_exact);
        if exact {
            let distinct = p.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len() == p.len();
            prop_assert!(!distinct || r.loss_seconds == 0.0);
        }
        Ok(())
    })
}

pub fn loss_monotone_in_penalties() -> Result<(), String> {
    run((scalar_sets(), 0.0f64..10.0, 0.0f64..10.0, 0.0f64..10.0), |((p, q), base, da, db)| {
        let at = |a: f64, b: f64| evaluate(&p, &q, &LossParams { alpha: a, beta: b }, scalar_dist).unwrap();
        let r0 = at(base, base);
        prop_assert!(at(base + da, base).loss_seconds >= r0.loss_seconds);
        prop_assert!(at(base, base + db).loss_seconds >= r0.loss_seconds);
        if da > 0.0 && r0.neighborhoods.iter().any(Vec::is_empty) {
            prop_assert!(at(base + da, base).loss_seconds > r0.loss_seconds);
        }
        if db > 0.0 && r0.neighborhoods.iter().any(|n| n.len() > 1) {
            prop_assert!(at(base, base + db).loss_seconds > r0.loss_seconds);
        }
        Ok(())
    })
}

pub fn loss_ignores_prediction_order() -> Result<(), String> {
    run((scalar_sets(), any::<u64>()), |((p, q), seed)| {
        let params = LossParams { alpha: 3.0, beta: 3.0 };
        let mut q2 = q.clone();
        q2.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = (evaluate(&p, &q, &params, scalar_dist).unwrap(), evaluate(&p, &q2, &params, scalar_dist).unwrap());
        prop_assert!((a.loss_seconds - b.loss_seconds).abs() <= 1e-12 * a.loss_seconds.max(1.0));
        prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
        Ok(())
    })
}

// ---------------------------------------------------------------- tune

pub fn tpe_stays_in_box() -> Result<(), String> {
    run((any::<u64>(), 1usize..30), |(seed, budget)| {
        let space = SearchSpace::new(vec![
            Dim::new("a", -2.0, 3.0, Scale::Linear),
            Dim::new("b", 1e-6, 1e-2, Scale::Log),
        ])
        .unwrap();
        let cfg = TpeConfig { seed, n_startup: 5, ..TpeConfig::default() };
        let (_, hist) = optimize(|w: &[f64], _| Ok::<f64, String>((w[0] - 1.0).powi(2) + w[1].ln().abs()), &space, budget, &cfg).unwrap();
        prop_assert_eq!(hist.len(), budget);
        prop_assert!(hist.iter().all(|t| space.contains(&t.params)));
        Ok(())
    })
}

pub fn tpe_best_improves_with_budget() -> Result<(), String> {
    run((any::<u64>(), 2usize..20, 1usize..15), |(seed, b1, extra)| {
        let cfg = TpeConfig { seed, n_startup: 4, ..TpeConfig::default() };
        let f = |w: &[f64], _| Ok::<f64, String>(bowl(w));
        let (best1, h1) = optimize(f, &bowl_space(), b1, &cfg).unwrap();
        let (best2, h2) = optimize(f, &bowl_space(), b1 + extra, &cfg).unwrap();
        prop_assert_eq!(&h2[..b1], &h1[..]);
        prop_assert!(best2.loss <= best1.loss);
        Ok(())
    })
}

pub fn suggest_deterministic() -> Result<(), String> {
    run((any::<u64>(), 0usize..30), |(seed, n)| {
        let space = bowl_space();
        let cfg = TpeConfig { seed, ..TpeConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let history: Vec<Trial> = (0..n)
            .map(|index| {
                let params: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
                Trial { index, loss: bowl(&params), params, seed: 0 }
            })
            .collect();
        let a = suggest(&history, &space, &cfg, &mut trial_rng(seed, n));
        let b = suggest(&history, &space, &cfg, &mut trial_rng(seed, n));
        prop_assert_eq!(a, b);
        Ok(())
    })
}

pub fn split_is_partition() -> Result<(), String> {
    run((prop::collection::vec(0.0f64..100.0, 1..50), 0.01f64..0.99), |(losses, gamma)| {
        let history: Vec<Trial> = losses.iter().enumerate().map(|(index, &loss)| Trial { index, params: vec![0.0], loss, seed: 0 }).collect();
        let (good, poor) = split_trials(&history, gamma).unwrap();
        prop_assert_eq!(good.len() + poor.len(), history.len());
        let distinct = losses.iter().map(|l| l.to_bits()).collect::<BTreeSet<_>>().len() == losses.len();
        if distinct && !poor.is_empty() {
            let g = good.iter().map(|t| t.loss).fold(f64::NEG_INFINITY, f64::max);
            let p = poor.iter().map(|t| t.loss).fold(f64::INFINITY, f64::min);
            prop_assert!(g <= p);
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- simulate

fn small_scenario(t_enter: f64, speed: f64, up: bool, truck: bool) -> Scenario {
    Scenario {
        duration_s: 2.0,
        channel_count: 8,
        sample_rate_hz: 200.0,
        vehicles: vec![Vehicle {
            t_enter_s: t_enter,
            speed_kmh: speed,
            direction: if up { Direction::Up } else { Direction::Down },
            class: if truck { dastrack::cluster::VehicleClass::Truck } else { dastrack::cluster::VehicleClass::Car },
        }],
        noise: Noise { white_sigma: 1e-7, harmonics: vec![(50.0, 2e-8)] },
        ..Scenario::default()
    }
}

pub fn simulator_deterministic() -> Result<(), String> {
    run((0.0f64..1.5, 5.0f64..120.0, any::<bool>(), any::<bool>(), any::<u64>(), 1usize..399), |(t, v, up, truck, seed, split)| {
        let s = small_scenario(t, v, up, truck);
        let a = render(&s, seed, 0, 400).unwrap();
        let b = render(&s, seed, 0, 400).unwrap();
        prop_assert_eq!(a.data(), b.data());
        let joined = concat_time(&[render(&s, seed, 0, split).unwrap(), render(&s, seed, split, 400 - split).unwrap()]).unwrap();
        prop_assert_eq!(joined.data(), a.data());
        Ok(())
    })
}

pub fn truth_slope_exact() -> Result<(), String> {
    run((0.0f64..100.0, 5.0f64..200.0, any::<bool>(), 10usize..1000, 0.5f64..5.0), |(t, v, up, channels, ds)| {
        let mut s = small_scenario(t, v, up, false);
        s.channel_count = channels;
        s.channel_spacing_m = ds;
        s.duration_s = 200.0;
        let g = s.ground_truth()[0];
        let transit_ns = (g.t_at_sl_ns - g.t_at_s0_ns) as f64;
        let expect = channels as f64 * ds * 3.6 / v * 1e9;
        prop_assert!((transit_ns.abs() - expect).abs() <= 1.0, "{} vs {}", transit_ns, expect);
        prop_assert_eq!(transit_ns > 0.0, up);
        Ok(())
    })
}

// ---------------------------------------------------------------- stream

pub fn track_ids_unique_and_increasing() -> Result<(), String> {
    run((any::<u64>(), 1usize..20), |(seed, windows)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tracks = TrackState::default();
        let mut seen: BTreeSet<u64> = BTreeSet::new();
        let mut last_new: Option<u64> = None;
        for w in 0..windows {
            let n = rng.gen_range(0..6);
            let dets: Vec<(ExtrapolatedLine, Direction)> = (0..n)
                .map(|_| {
                    let t0 = w as f64 * 10.0 + rng.gen_range(0.0..60.0);
                    let up = rng.gen_bool(0.5);
                    let dt = rng.gen_range(25.0..35.0);
                    let line = if up { ExtrapolatedLine::new(t0, t0 + dt, 693.0) } else { ExtrapolatedLine::new(t0 + dt, t0, 693.0) };
                    (line, if up { Direction::Up } else { Direction::Down })
                })
                .collect();
            let ids = tracks.assign(&dets, 5.0, (w as i64 + 6) * 10_000_000_000, 120_000_000_000);
            prop_assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), ids.len(), "duplicate id in one window");
            for id in ids {
                if seen.insert(id) {
                    prop_assert!(last_new.map_or(true, |l| id > l));
                    last_new = Some(id);
                }
            }
        }
        Ok(())
    })
}

/// Every invariant suite, by name.
pub fn all_invariants() -> Vec<(&'static str, fn() -> Result<(), String>)> {
    vec![
        ("dasw round trip", dasw_roundtrip),
        ("mask composition", mask_composition),
        ("concat rows", concat_rows),
        ("low-pass idempotent", low_pass_idempotent),
        ("low-pass keeps mean", low_pass_keeps_mean),
        ("covariance round trip", covariance_round_trip),
        ("convolution linear", convolution_linear),
        ("convolution fft matches direct", convolution_fft_matches_direct),
        ("binarize monotone", binarize_monotone),
        ("standard vote total", standard_vote_total),
        ("segments on their line", segments_on_their_line),
        ("prob hough deterministic", prob_hough_deterministic),
        ("segments recheck against image", segments_rechecked),
        ("segment count monotone in threshold", segment_count_monotone),
        ("metric axioms", metric_axioms),
        ("dbscan partition", dbscan_partition),
        ("dbscan permutation invariant", dbscan_permutation_invariant),
        ("consolidate is mean", consolidate_is_mean),
        ("extrapolation invariant", extrapolation_invariant),
        ("loss zero iff exact", loss_nonnegative_and_zero_iff_exact),
        ("loss monotone in penalties", loss_monotone_in_penalties),
        ("loss ignores prediction order", loss_ignores_prediction_order),
        ("tpe stays in box", tpe_stays_in_box),
        ("tpe best improves with budget", tpe_best_improves_with_budget),
        ("suggest deterministic", suggest_deterministic),
        ("split is partition", split_is_partition),
        ("simulator deterministic", simulator_deterministic),
        ("truth slope exact", truth_slope_exact),
        ("track ids unique and increasing", track_ids_unique_and_increasing),
    ]
}
