//! One window through the whole chain: mask, low-pass and decimate, then per
//! direction smooth, Sobel, threshold, Hough, extrapolate, cluster and
//! measure.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cluster::{
    classify, consolidate, dbscan, extract_features, extrapolate, speed_and_direction, ClusterError, ExtrapolatedLine,
    VehicleClass, VehicleDetection,
};
use crate::config::PipelineConfig;
use crate::evaluate::{evaluate_lines, EvalError, GroundTruthEvent, LineScore};
use crate::hough::{prob_hough, HoughError, LineSegment};
use crate::preprocess::{edge_stages, LowBand, LowPassSpec, PreprocessError};
use crate::tune::{Dim, Scale, SearchSpace};
use crate::waterfall::{export_binary_pgm, export_pgm, export_ppm_overlay, mask_channels, ChannelMask, Waterfall, WaterfallError};
use crate::Direction;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Waterfall(#[from] WaterfallError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Hough(#[from] HoughError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Where and under which name to write per-stage images.
#[derive(Debug, Clone)]
pub struct StageDump {
    pub dir: PathBuf,
    pub prefix: String,
}

impl StageDump {
    fn path(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{}_{stage}", self.prefix))
    }
}

/// Detections of one window. Line times are absolute Unix seconds.
#[derive(Debug, Clone, Default)]
pub struct WindowResult {
    pub detections: Vec<VehicleDetection>,
    /// Hough segments per direction, times relative to the window start.
    pub segments: Vec<(Direction, LineSegment)>,
}

/// Applies the channel mask unless it keeps everything.
pub fn apply_mask(raw: &Waterfall, mask: &ChannelMask) -> Result<Option<Waterfall>, WaterfallError> {
    if *mask == ChannelMask::identity() {
        Ok(None)
    } else {
        mask_channels(raw, mask).map(Some)
    }
}

/// Runs the full chain on a raw window.
pub fn detect(raw: &Waterfall, cfg: &PipelineConfig, dump: Option<&StageDump>) -> Result<WindowResult, DetectError> {
    let masked = apply_mask(raw, &cfg.mask)?;
    let raw = masked.as_ref().unwrap_or(raw);
    let band = LowBand::analyze(raw, cfg.lpf.cutoff_hz)?;
    let low = band.reconstruct(cfg.lpf.cutoff_hz, cfg.decimate_hz)?;
    if let Some(d) = dump {
        export_pgm(&low, d.path("lowpass.pgm"), 1.0, 99.0)?;
    }
    detect_low(&low, Some(raw), cfg, dump)
}

/// Chain from an already low-passed, decimated raster. `raw` (same channels,
/// original rate) is used for classification features when given.
pub fn detect_low(
    low: &Waterfall,
    raw: Option<&Waterfall>,
    cfg: &PipelineConfig,
    dump: Option<&StageDump>,
) -> Result<WindowResult, DetectError> {
    let extent = low.cols() as f64;
    let start_s = low.start_time_ns() as f64 * 1e-9;
    let mut out = WindowResult::default();
    for dir in Direction::BOTH {
        let stages = edge_stages(low, cfg, dir)?;
        let params = cfg.hough.params(low.cols(), low.sample_rate_hz(), low.channel_spacing_m(), dir);
        let segs = prob_hough(&stages.binary, &params, cfg.seed)?;
        if let Some(d) = dump {
            export_pgm(&stages.smoothed, d.path(&format!("{dir}_smoothed.pgm")), 1.0, 99.0)?;
            export_pgm(&stages.gradient, d.path(&format!("{dir}_sobel.pgm")), 0.0, 99.5)?;
            export_binary_pgm(&stages.binary, d.path(&format!("{dir}_binary.pgm")))?;
            export_ppm_overlay(low, &segs, d.path(&format!("{dir}_hough.ppm")))?;
        }
        let lines: Vec<ExtrapolatedLine> = segs
            .iter()
            .filter(|s| s.direction() == Some(dir))
            .filter_map(|s| extrapolate(s, extent).ok())
            .collect();
        out.segments.extend(segs.iter().map(|s| (dir, *s)));
        let (clusters, _noise) = dbscan(&lines, &cfg.cluster)?;
        for members in clusters {
            let group: Vec<ExtrapolatedLine> = members.iter().map(|&i| lines[i]).collect();
            let line = consolidate(&group)?;
            let (speed_kmh, direction) = speed_and_direction(&line, low.channel_spacing_m())?;
            let (class, amp, ratio) = match raw.map(|r| extract_features(r, &line)) {
                Some(Ok(f)) => (classify(&f, &cfg.classifier), f.mean_abs_amplitude, f.band_energy_ratio),
                _ => (VehicleClass::Unknown, f64::NAN, f64::NAN),
            };
            out.detections.push(VehicleDetection {
                id: None,
                line: line.shifted(start_s),
                speed_kmh,
                direction,
                class,
                mean_abs_amplitude: amp,
                band_energy_ratio: ratio,
            });
        }
    }
    out.detections.sort_by(|a, b| a.line.t_at_s0.min(a.line.t_at_sl).total_cmp(&b.line.t_at_s0.min(b.line.t_at_sl)));
    Ok(out)
}

/// Search box for the three tuned parameters: cutoff, threshold and
/// clustering radius.
pub fn standard_space() -> SearchSpace {
    SearchSpace::new(vec![
        Dim::new("lpf.cutoff_hz", 0.1, 2.0, Scale::Linear),
        Dim::new("threshold.tau", 1e-9, 1e-7, Scale::Log),
        Dim::new("cluster.eps_s", 0.05, 10.0, Scale::Log),
    ])
    .expect("static bounds are valid")
}

/// Copies a point of [`standard_space`] into a configuration.
pub fn apply_point(cfg: &PipelineConfig, w: &[f64]) -> PipelineConfig {
    let mut c = *cfg;
    c.lpf = LowPassSpec::new(w[0]);
    c.threshold.tau = w[1];
    c.cluster.eps_s = w[2];
    c
}

pub fn config_point(cfg: &PipelineConfig) -> Vec<f64> {
    vec![cfg.lpf.cutoff_hz, cfg.threshold.tau, cfg.cluster.eps_s]
}

/// A training recording kept as its low band so each trial only pays for
/// the inverse transform at its own cutoff.
pub struct TuningSet {
    band: LowBand,
    truth: Vec<(ExtrapolatedLine, Direction)>,
}

impl TuningSet {
    pub fn new(raw: &Waterfall, truth: &[GroundTruthEvent], mask: &ChannelMask, max_cutoff_hz: f64) -> Result<Self, DetectError> {
        let masked = apply_mask(raw, mask)?;
        let raw = masked.as_ref().unwrap_or(raw);
        let extent = raw.cols() as f64;
        Ok(Self {
            band: LowBand::analyze(raw, max_cutoff_hz)?,
            truth: truth.iter().map(|t| (t.line(extent), t.direction)).collect(),
        })
    }

    pub fn score(&self, cfg: &PipelineConfig) -> Result<(LineScore, Vec<VehicleDetection>), DetectError> {
        let low = self.band.reconstruct(cfg.lpf.cutoff_hz, cfg.decimate_hz)?;
        let dets = detect_low(&low, None, cfg, None)?.detections;
        let pred: Vec<(ExtrapolatedLine, Direction)> = dets.iter().map(|d| (d.line, d.direction)).collect();
        Ok((evaluate_lines(&self.truth, &pred, &cfg.loss)?, dets))
    }

    pub fn loss(&self, cfg: &PipelineConfig) -> Result<f64, DetectError> {
        Ok(self.score(cfg)?.0.loss_seconds)
    }
}

/// Creates `dir` for stage dumps and returns the dump handle.
pub fn stage_dump(dir: &Path, prefix: &str) -> std::io::Result<StageDump> {
    std::fs::create_dir_all(dir)?;
    Ok(StageDump { dir: dir.to_path_buf(), prefix: prefix.to_string() })
}
