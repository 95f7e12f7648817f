//! Direction-selective Gaussian smoothing kernels.
//!
//! A vehicle at speed `u` km/h traces `t = s · 3.6 / u` in (meters, seconds),
//! i.e. a line at angle `arctan(3.6 / u)` to the channel axis. The kernel's
//! covariance is built so its long principal axis follows the mean angle of
//! a speed range and its elongation is set by how wide that range is.

use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::Direction;

/// Speed band, spatial spread and truncation of a directional kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalKernelSpec {
    pub u1_kmh: f64,
    pub u2_kmh: f64,
    pub sigma_s_m: f64,
    pub direction: Direction,
    pub extent_sigmas: f64,
}

impl DirectionalKernelSpec {
    pub fn new(u1_kmh: f64, u2_kmh: f64, sigma_s_m: f64, direction: Direction) -> Self {
        Self { u1_kmh, u2_kmh, sigma_s_m, direction, extent_sigmas: 3.0 }
    }

    fn validate(&self) -> Result<(), PreprocessError> {
        let ok = self.u1_kmh > 0.0
            && self.u1_kmh <= self.u2_kmh
            && self.u2_kmh.is_finite()
            && self.sigma_s_m > 0.0
            && self.extent_sigmas >= 1.0;
        if !ok {
            return Err(PreprocessError::InvalidKernel(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Symmetric 2x2 covariance over (space in m, time in s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance2 {
    pub s_ss: f64,
    pub s_st: f64,
    pub s_tt: f64,
}

/// Eigen-structure of a [`Covariance2`]: `lambda1 >= lambda2`, with `axis1`
/// the unit eigenvector of `lambda1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigen2 {
    pub lambda1: f64,
    pub lambda2: f64,
    pub axis1: (f64, f64),
    pub axis2: (f64, f64),
}

impl Covariance2 {
    pub fn det(&self) -> f64 {
        self.s_ss * self.s_tt - self.s_st * self.s_st
    }

    pub fn is_positive_definite(&self) -> bool {
        self.s_ss > 0.0 && self.det() > 0.0
    }

    pub fn eigen(&self) -> Eigen2 {
        let half_tr = 0.5 * (self.s_ss + self.s_tt);
        let half_diff = 0.5 * (self.s_ss - self.s_tt);
        let radius = half_diff.hypot(self.s_st);
        let lambda1 = half_tr + radius;
        // det / lambda1 avoids cancellation for very elongated kernels.
        let lambda2 = if lambda1 > 0.0 { self.det() / lambda1 } else { half_tr - radius };
        let angle = if self.s_st == 0.0 && half_diff == 0.0 { 0.0 } else { 0.5 * self.s_st.atan2(half_diff) };
        let (sin, cos) = angle.sin_cos();
        Eigen2 { lambda1, lambda2, axis1: (cos, sin), axis2: (-sin, cos) }
    }

    fn inverse(&self) -> (f64, f64, f64) {
        let d = self.det();
        (self.s_tt / d, -self.s_st / d, self.s_ss / d)
    }
}

/// Covariance with a given spatial variance, one (unnormalized) eigenvector
/// and eigenvalue ratio `k = lambda_along / lambda_across`.
pub fn covariance_from_axis(sigma_ss: f64, axis: (f64, f64), k: f64) -> Covariance2 {
    let norm = axis.0.hypot(axis.1);
    let (a, b) = (axis.0 / norm, axis.1 / norm);
    let denom = k * a * a + b * b;
    Covariance2 {
        s_ss: sigma_ss,
        s_st: sigma_ss * a * b * (k - 1.0) / denom,
        s_tt: sigma_ss * (k * b * b + a * a) / denom,
    }
}

/// Trajectory angle of speed `u_kmh` in (meters, seconds).
pub fn slope_angle(u_kmh: f64) -> f64 {
    (3.6 / u_kmh).atan()
}

pub fn covariance_from_speeds(spec: &DirectionalKernelSpec) -> Result<Covariance2, PreprocessError> {
    spec.validate()?;
    if spec.u1_kmh == spec.u2_kmh {
        return Err(PreprocessError::DegenerateSpeedRange(spec.u1_kmh));
    }
    let gamma1 = slope_angle(spec.u1_kmh);
    let gamma2 = slope_angle(spec.u2_kmh);
    let gamma = 0.5 * (gamma1 + gamma2);
    let k = 1.0 / (gamma1 - gamma).tan();
    let mut cov = covariance_from_axis(spec.sigma_s_m * spec.sigma_s_m, (1.0, gamma.tan()), k);
    if spec.direction == Direction::Down {
        cov.s_st = -cov.s_st;
    }
    Ok(cov)
}

/// Odd-sized 2-D filter, indexed `[row][col]` with rows along time.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Kernel {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self, PreprocessError> {
        if rows % 2 == 0 || cols % 2 == 0 || data.len() != rows * cols {
            return Err(PreprocessError::InvalidKernel(format!("kernel must be odd-sized, got {rows}x{cols}")));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn identity() -> Self {
        Self { data: vec![1.0], rows: 1, cols: 1 }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Samples the Gaussian density of `cov` on a `(ds_m, dt_s)` grid, keeping
/// only points within `extent_sigmas` along both principal axes, and
/// normalizes to unit sum.
pub fn build_kernel_from_cov(cov: &Covariance2, extent_sigmas: f64, ds_m: f64, dt_s: f64) -> Result<Kernel, PreprocessError> {
    if !(ds_m > 0.0 && dt_s > 0.0) {
        return Err(PreprocessError::InvalidKernel(format!("grid spacing ({ds_m}, {dt_s})")));
    }
    if !cov.is_positive_definite() {
        return Err(PreprocessError::InvalidKernel(format!("covariance not positive definite: {cov:?}")));
    }
    let eig = cov.eigen();
    let r1 = extent_sigmas * eig.lambda1.sqrt();
    let r2 = extent_sigmas * eig.lambda2.sqrt();
    let reach_s = r1 * eig.axis1.0.abs() + r2 * eig.axis2.0.abs();
    let reach_t = r1 * eig.axis1.1.abs() + r2 * eig.axis2.1.abs();
    let half_c = (reach_s / ds_m + 1e-9).floor() as usize;
    let half_r = (reach_t / dt_s + 1e-9).floor() as usize;
    let (rows, cols) = (2 * half_r + 1, 2 * half_c + 1);

    let (i_ss, i_st, i_tt) = cov.inverse();
    let norm = 1.0 / (2.0 * std::f64::consts::PI * cov.det().sqrt());
    let tol = 1e-12;
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        let t = (i as f64 - half_r as f64) * dt_s;
        for j in 0..cols {
            let s = (j as f64 - half_c as f64) * ds_m;
            let p1 = s * eig.axis1.0 + t * eig.axis1.1;
            let p2 = s * eig.axis2.0 + t * eig.axis2.1;
            if p1.abs() > r1 * (1.0 + tol) || p2.abs() > r2 * (1.0 + tol) {
                continue;
            }
            let q = s * s * i_ss + 2.0 * s * t * i_st + t * t * i_tt;
            data[i * cols + j] = norm * (-0.5 * q).exp();
        }
    }
    let total: f64 = data.iter().sum();
    if !(total > 0.0) {
        return Err(PreprocessError::InvalidKernel("kernel has no mass on the grid".into()));
    }
    data.iter_mut().for_each(|v| *v /= total);
    Kernel::new(data, rows, cols)
}

pub fn build_kernel(spec: &DirectionalKernelSpec, ds_m: f64, dt_s: f64) -> Result<Kernel, PreprocessError> {
    let cov = covariance_from_speeds(spec)?;
    build_kernel_from_cov(&cov, spec.extent_sigmas, ds_m, dt_s)
}
