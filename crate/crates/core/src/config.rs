//! Pipeline configuration and its flat `key = value` text form.
//!
//! Keys are dotted paths into the configuration (`hough.vote_threshold`,
//! `lpf.cutoff_hz`). Values are JSON literals (`0.5`, `null`, `[36, 49]`);
//! anything that does not parse as JSON is taken as a string. Lines starting
//! with `#` are comments.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cluster::{ClassifierParams, ClusterParams};
use crate::evaluate::LossParams;
use crate::hough::{speed_to_theta, theta_res_for, window_for_direction, HoughParams};
use crate::preprocess::{DirectionalKernelSpec, LowPassSpec, ThresholdSpec};
use crate::waterfall::ChannelMask;
use crate::Direction;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Speed band and spread of the directional smoothing kernels; the
/// direction is filled in per pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelShape {
    pub u1_kmh: f64,
    pub u2_kmh: f64,
    pub sigma_s_m: f64,
    pub extent_sigmas: f64,
}

impl KernelShape {
    pub fn spec(&self, direction: Direction) -> DirectionalKernelSpec {
        DirectionalKernelSpec {
            u1_kmh: self.u1_kmh,
            u2_kmh: self.u2_kmh,
            sigma_s_m: self.sigma_s_m,
            direction,
            extent_sigmas: self.extent_sigmas,
        }
    }
}

/// Hough settings in physical terms; resolved to pixel parameters once the
/// image grid is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoughSettings {
    pub rho_res: f64,
    /// Angle step in radians; `None` derives it from the speed accuracy.
    pub theta_res: Option<f64>,
    pub speed_accuracy_kmh: f64,
    pub reference_speed_kmh: f64,
    /// Speed range searched, km/h.
    pub speed_min_kmh: f64,
    pub speed_max_kmh: f64,
    pub theta_margin: f64,
    /// `None` means half the minimum line length.
    pub vote_threshold: Option<usize>,
    /// Minimum line length as a fraction of the channel count.
    pub min_line_frac: f64,
    /// Maximum gap as a fraction of the channel count.
    pub max_gap_frac: f64,
}

impl HoughSettings {
    pub fn params(&self, cols: usize, fs_hz: f64, ds_m: f64, direction: Direction) -> HoughParams {
        let theta_res = self
            .theta_res
            .unwrap_or_else(|| theta_res_for(self.reference_speed_kmh, self.speed_accuracy_kmh, fs_hz, ds_m));
        let lo = speed_to_theta(self.speed_max_kmh, fs_hz, ds_m) - self.theta_margin;
        let hi = speed_to_theta(self.speed_min_kmh, fs_hz, ds_m) + self.theta_margin;
        let min_len = (self.min_line_frac * cols as f64).max(2.0);
        HoughParams {
            rho_res: self.rho_res,
            theta_res,
            theta_window: window_for_direction((lo.max(1e-6), hi.min(std::f64::consts::FRAC_PI_2)), direction),
            vote_threshold: self.vote_threshold.unwrap_or((min_len / 2.0).round() as usize).max(2),
            min_line_length: min_len,
            max_line_gap: (self.max_gap_frac * cols as f64).round() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mask: ChannelMask,
    pub lpf: LowPassSpec,
    pub decimate_hz: f64,
    pub kernel: KernelShape,
    pub threshold: ThresholdSpec,
    pub hough: HoughSettings,
    pub cluster: ClusterParams,
    pub classifier: ClassifierParams,
    pub loss: LossParams,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mask: ChannelMask::identity(),
            lpf: LowPassSpec::new(0.5),
            decimate_hz: 8.0,
            kernel: KernelShape { u1_kmh: 80.0, u2_kmh: 90.0, sigma_s_m: 10.0, extent_sigmas: 3.0 },
            threshold: ThresholdSpec { tau: 2e-8 },
            hough: HoughSettings {
                rho_res: 1.0,
                theta_res: None,
                speed_accuracy_kmh: 0.1,
                reference_speed_kmh: 85.0,
                speed_min_kmh: 50.0,
                speed_max_kmh: 150.0,
                theta_margin: 0.0,
                vote_threshold: None,
                min_line_frac: 0.7,
                max_gap_frac: 0.2,
            },
            cluster: ClusterParams { eps_s: 5.0, min_segs: 1 },
            classifier: ClassifierParams { amplitude_threshold: 1.6e-7, ratio_threshold: 1.0 },
            loss: LossParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Profile for shear waves crossing the bridge at around 3000 m/s.
    pub fn s_wave() -> Self {
        let base = Self::default();
        Self {
            lpf: LowPassSpec::new(40.0),
            decimate_hz: 250.0,
            kernel: KernelShape { u1_kmh: 9000.0, u2_kmh: 13000.0, sigma_s_m: 1.0, extent_sigmas: 3.0 },
            hough: HoughSettings {
                speed_accuracy_kmh: 50.0,
                reference_speed_kmh: 10800.0,
                speed_min_kmh: 7000.0,
                speed_max_kmh: 16000.0,
                ..base.hough
            },
            threshold: ThresholdSpec { tau: 2e-7 },
            cluster: ClusterParams { eps_s: 0.05, min_segs: 1 },
            ..base
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.lpf.cutoff_hz > 0.0) {
            return bad("lpf.cutoff_hz must be positive");
        }
        if !(self.decimate_hz >= 2.0 * self.lpf.cutoff_hz) {
            return bad("decimate_hz must be at least twice lpf.cutoff_hz");
        }
        if !(self.kernel.u1_kmh > 0.0 && self.kernel.u1_kmh < self.kernel.u2_kmh) {
            return bad("kernel speeds must satisfy 0 < u1 < u2");
        }
        if !(self.kernel.sigma_s_m > 0.0 && self.kernel.extent_sigmas >= 1.0) {
            return bad("kernel.sigma_s_m must be positive and extent_sigmas at least 1");
        }
        if !(self.threshold.tau > 0.0) {
            return bad("threshold.tau must be positive");
        }
        let h = &self.hough;
        if !(h.rho_res > 0.0 && h.speed_min_kmh > 0.0 && h.speed_min_kmh < h.speed_max_kmh) {
            return bad("hough speeds must satisfy 0 < min < max and rho_res > 0");
        }
        if !(h.min_line_frac > 0.0 && h.max_gap_frac >= 0.0) || h.theta_res.is_some_and(|t| !(t > 0.0)) {
            return bad("hough line fractions and theta_res must be positive");
        }
        if !(self.cluster.eps_s > 0.0 && self.cluster.min_segs >= 1) {
            return bad("cluster.eps_s must be positive and min_segs at least 1");
        }
        if !(self.classifier.amplitude_threshold > 0.0 && self.classifier.ratio_threshold > 0.0) {
            return bad("classifier thresholds must be positive");
        }
        if !(self.loss.alpha >= 0.0 && self.loss.beta >= 0.0) {
            return bad("loss penalties must be non-negative");
        }
        Ok(())
    }

    /// Flat `key = value` listing of every setting.
    pub fn to_kv_string(&self) -> String {
        let mut lines = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut lines);
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sets one dotted key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let slot = key
            .split('.')
            .try_fold(&mut tree, |node, part| node.get_mut(part))
            .filter(|slot| !slot.is_object())
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        *slot = serde_json::from_str(value.trim()).unwrap_or_else(|_| Value::String(value.trim().to_string()));
        *self = serde_json::from_value(tree).map_err(|e| ConfigError::BadValue { key: key.to_string(), message: e.to_string() })?;
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut cfg = PipelineConfig::s_wave();
        cfg.mask = ChannelMask::astfjord();
        cfg.hough.vote_threshold = Some(120);
        let text = cfg.to_kv_string();
        assert!(text.contains("hough.vote_threshold = 120"));
        assert_eq!(PipelineConfig::from_kv(&text).unwrap(), cfg);
    }

    #[test]
    fn set_and_errors() {
        let mut cfg = PipelineConfig::default();
        cfg.set("threshold.tau", "3e-8").unwrap();
        assert_eq!(cfg.threshold.tau, 3e-8);
        cfg.set("hough.theta_res", "null").unwrap();
        assert!(matches!(cfg.set("hough.nope", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("hough", "1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("cluster.min_segs", "abc"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(PipelineConfig::from_kv("lpf.cutoff_hz = 5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(PipelineConfig::from_kv("just words"), Err(ConfigError::Syntax { line: 1 })));
    }

    #[test]
    fn hough_params_resolve() {
        let cfg = PipelineConfig::default();
        let up = cfg.hough.params(693, 8.0, 1.0, Direction::Up);
        let down = cfg.hough.params(693, 8.0, 1.0, Direction::Down);
        assert!((up.min_line_length - 485.1).abs() < 1e-9);
        assert_eq!(up.vote_threshold, 243);
        assert_eq!(up.max_line_gap, 139);
        assert_eq!(down.theta_window, (-up.theta_window.1, -up.theta_window.0));
        assert!(up.validate().is_ok() && down.validate().is_ok());
    }
}
