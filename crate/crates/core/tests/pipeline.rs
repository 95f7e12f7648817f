use dastrack::cluster::{extract_features, ExtrapolatedLine, VehicleClass};
use dastrack::config::PipelineConfig;
use dastrack::preprocess::{preprocess_pipeline, ThresholdSpec};
use dastrack::simulate::{simulate, Scenario, Vehicle};
use dastrack::waterfall::BinaryImage;
use dastrack::Direction;

fn one_vehicle(speed_kmh: f64, direction: Direction, class: VehicleClass) -> Scenario {
    let mut s = Scenario { duration_s: 60.0, channel_count: 300, ..Scenario::default() };
    s.vehicles.push(Vehicle { t_enter_s: 10.0, speed_kmh, direction, class });
    s
}

/// Crossing time of the single vehicle at each channel, seconds from the start.
fn truth_times(s: &Scenario) -> Vec<f64> {
    let line = truth_line(s);
    (0..s.channel_count).map(|c| line.t_at_s0 + (line.t_at_sl - line.t_at_s0) * c as f64 / s.extent()).collect()
}

fn truth_line(s: &Scenario) -> ExtrapolatedLine {
    let g = s.ground_truth()[0];
    let start = s.start_time_ns as f64 * 1e-9;
    ExtrapolatedLine::new(g.t_at_s0_ns as f64 * 1e-9 - start, g.t_at_sl_ns as f64 * 1e-9 - start, s.extent())
}

/// Foreground pixels within 2 channels of each `(channel, row)` and the
/// number of channels with at least one.
fn near_track(img: &BinaryImage, rows: impl Iterator<Item = (usize, i64)>) -> (usize, usize) {
    let (mut channels, mut pixels) = (0, 0);
    for (c, y) in rows {
        if y < 0 || y as usize >= img.rows() {
            continue;
        }
        let hits = (c.saturating_sub(2)..=(c + 2).min(img.cols() - 1)).filter(|&x| img.get(x, y as usize)).count();
        pixels += hits;
        channels += (hits > 0) as usize;
    }
    (channels, pixels)
}

fn rows_at(times: &[f64], rate_hz: f64, shift_s: f64) -> impl Iterator<Item = (usize, i64)> + '_ {
    times.iter().enumerate().map(move |(c, &t)| (c, ((t + shift_s) * rate_hz).round() as i64))
}

/// Pixels within 2 channels of the truth over the leading pulse width.
fn leading_band(img: &BinaryImage, times: &[f64], rate_hz: f64, width_s: f64) -> usize {
    let steps = (width_s * rate_hz).round() as i64;
    (0..=steps).map(|k| near_track(img, rows_at(times, rate_hz, -(k as f64) / rate_hz)).1).sum()
}

#[test]
fn foreground_within_two_channels_of_truth() {
    let s = one_vehicle(85.0, Direction::Up, VehicleClass::Car);
    let (raw, _) = simulate(&s, 1).unwrap();
    let cfg = PipelineConfig::default();
    let img = preprocess_pipeline(&raw, &cfg, Direction::Up).unwrap();
    let (channels, _) = near_track(&img, rows_at(&truth_times(&s), cfg.decimate_hz, 0.0));
    assert!(channels * 10 >= 7 * s.channel_count, "{channels}/{} channels", s.channel_count);
}

#[test]
fn foreground_follows_rising_edge() {
    let s = one_vehicle(85.0, Direction::Up, VehicleClass::Car);
    let (raw, _) = simulate(&s, 1).unwrap();
    let cfg = PipelineConfig::default();
    let img = preprocess_pipeline(&raw, &cfg, Direction::Up).unwrap();
    let times = truth_times(&s);
    let best = (0..=(s.qs_pulse_width_s * cfg.decimate_hz) as i64)
        .map(|k| near_track(&img, rows_at(&times, cfg.decimate_hz, -(k as f64) / cfg.decimate_hz)).0)
        .max()
        .unwrap();
    assert!(best * 10 >= 7 * s.channel_count, "{best}/{} channels", s.channel_count);
}

#[test]
fn opposite_kernel_keeps_fewer_track_pixels() {
    let cfg = PipelineConfig::default();
    for dir in Direction::BOTH {
        let s = one_vehicle(85.0, dir, VehicleClass::Car);
        let (raw, _) = simulate(&s, 2).unwrap();
        let times = truth_times(&s);
        let opposite = if dir == Direction::Up { Direction::Down } else { Direction::Up };
        let matched = leading_band(&preprocess_pipeline(&raw, &cfg, dir).unwrap(), &times, cfg.decimate_hz, s.qs_pulse_width_s);
        let other = leading_band(&preprocess_pipeline(&raw, &cfg, opposite).unwrap(), &times, cfg.decimate_hz, s.qs_pulse_width_s);
        assert!(other < matched, "{dir:?}: matched {matched}, opposite {other}");
    }
}

#[test]
fn foreground_shrinks_with_threshold() {
    let s = one_vehicle(85.0, Direction::Up, VehicleClass::Truck);
    let (raw, _) = simulate(&s, 3).unwrap();
    let counts: Vec<usize> = [1e-8, 2e-8, 3e-8]
        .iter()
        .map(|&tau| {
            let cfg = PipelineConfig { threshold: ThresholdSpec { tau }, ..PipelineConfig::default() };
            preprocess_pipeline(&raw, &cfg, Direction::Up).unwrap().count_ones()
        })
        .collect();
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
}

#[test]
fn trucks_are_louder_than_cars() {
    let mut louder = 0;
    for seed in 0..100 {
        let amp = |class| {
            let mut s = one_vehicle(85.0, Direction::Up, class);
            s.duration_s = 20.0;
            s.channel_count = 100;
            s.vehicles[0].t_enter_s = 4.0;
            let (raw, _) = simulate(&s, seed).unwrap();
            extract_features(&raw, &truth_line(&s)).unwrap().mean_abs_amplitude
        };
        louder += (amp(VehicleClass::Truck) > amp(VehicleClass::Car)) as usize;
    }
    assert!(louder >= 95, "{louder}/100");
}
