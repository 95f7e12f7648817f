//! Raw strain rate to binary edge image: low-pass, decimate, directional
//! smoothing, rectified Sobel, threshold.

mod convolve;
mod kernel;
mod lowpass;
mod sobel;

use thiserror::Error;

pub use convolve::{convolve2d, convolve2d_direct, convolve2d_fft};
pub use kernel::{
    build_kernel, build_kernel_from_cov, covariance_from_axis, covariance_from_speeds, slope_angle, Covariance2,
    DirectionalKernelSpec, Eigen2, Kernel,
};
pub use lowpass::{decimate, low_pass, low_pass_decimate, LowBand, LowPassSpec};
pub use sobel::{binarize, sobel_rectified_magnitude, ThresholdSpec, SOBEL_S, SOBEL_T};

use crate::config::PipelineConfig;
use crate::waterfall::{BinaryImage, Waterfall};
use crate::Direction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("cutoff {cutoff_hz} Hz must lie in (0, {}) for {sample_rate_hz} Hz data", sample_rate_hz / 2.0)]
    CutoffAboveNyquist { cutoff_hz: f64, sample_rate_hz: f64 },
    #[error("cutoff {cutoff_hz} Hz exceeds the retained band (max {max_hz} Hz)")]
    CutoffAboveBand { cutoff_hz: f64, max_hz: f64 },
    #[error("cannot decimate {source_hz} Hz to {target_hz} Hz by an integer factor")]
    NonIntegerFactor { source_hz: f64, target_hz: f64 },
    #[error("speed range collapses to a single speed ({0} km/h)")]
    DegenerateSpeedRange(f64),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("kernel {kernel:?} larger than image {image:?}")]
    KernelLargerThanImage { kernel: (usize, usize), image: (usize, usize) },
    #[error("image {rows}x{cols} too small for a 3x3 operator")]
    ImageTooSmall { rows: usize, cols: usize },
}

/// Intermediate rasters of the direction-specific stages, kept for stage
/// dumps and diagnostics.
#[derive(Debug, Clone)]
pub struct EdgeStages {
    pub smoothed: Waterfall,
    pub gradient: Waterfall,
    pub binary: BinaryImage,
}

/// Directional smoothing, rectified Sobel and threshold on an already
/// low-passed and decimated raster.
pub fn edge_stages(low: &Waterfall, cfg: &PipelineConfig, direction: Direction) -> Result<EdgeStages, PreprocessError> {
    let spec = cfg.kernel.spec(direction);
    let kernel = build_kernel(&spec, low.channel_spacing_m(), 1.0 / low.sample_rate_hz())?;
    let smoothed = convolve2d(low, &kernel)?;
    let gradient = sobel_rectified_magnitude(&smoothed)?;
    let binary = binarize(&gradient, &cfg.threshold);
    Ok(EdgeStages { smoothed, gradient, binary })
}

/// The full five-stage chain for one travel direction.
pub fn preprocess_pipeline(w: &Waterfall, cfg: &PipelineConfig, direction: Direction) -> Result<BinaryImage, PreprocessError> {
    let low = low_pass_decimate(w, &cfg.lpf, cfg.decimate_hz)?;
    Ok(edge_stages(&low, cfg, direction)?.binary)
}
