//! Ideal low-pass filtering and decimation along the time axis.
//!
//! The filter is a brick wall: every frequency bin above the cutoff is
//! zeroed. Because only a few dozen bins survive for sub-hertz cutoffs, the
//! production path keeps just those bins ([`LowBand`]) and reconstructs the
//! decimated rows directly, which makes re-filtering at another cutoff
//! nearly free during parameter tuning.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::waterfall::{Axes, Waterfall};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowPassSpec {
    pub cutoff_hz: f64,
}

impl LowPassSpec {
    pub fn new(cutoff_hz: f64) -> Self {
        Self { cutoff_hz }
    }

    fn validate(&self, sample_rate_hz: f64) -> Result<(), PreprocessError> {
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < sample_rate_hz / 2.0) {
            return Err(PreprocessError::CutoffAboveNyquist { cutoff_hz: self.cutoff_hz, sample_rate_hz });
        }
        Ok(())
    }
}

/// Highest bin index kept for a cutoff: bins with `k·fs/N <= f_c`.
fn last_kept_bin(cutoff_hz: f64, n: usize, fs: f64) -> usize {
    let k = (cutoff_hz * n as f64 / fs + 1e-9).floor() as usize;
    k.min(n / 2)
}

fn forward_plan(n: usize) -> Arc<dyn RealToComplex<f64>> {
    RealFftPlanner::<f64>::new().plan_fft_forward(n)
}

/// Brick-wall low-pass, channel by channel. Output has the input's shape.
pub fn low_pass(w: &Waterfall, spec: &LowPassSpec) -> Result<Waterfall, PreprocessError> {
    spec.validate(w.sample_rate_hz())?;
    let (n, cols) = (w.rows(), w.cols());
    if n < 2 {
        return Ok(w.clone());
    }
    let keep = last_kept_bin(spec.cutoff_hz, n, w.sample_rate_hz());
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut input = fwd.make_input_vec();
    let mut spectrum = fwd.make_output_vec();
    let mut scratch = fwd.make_scratch_vec();
    let mut iscratch = inv.make_scratch_vec();
    let mut out = vec![0.0; n * cols];
    let scale = 1.0 / n as f64;
    for c in 0..cols {
        for (r, v) in input.iter_mut().enumerate() {
            *v = w.get(r, c);
        }
        fwd.process_with_scratch(&mut input, &mut spectrum, &mut scratch).expect("fft length");
        for bin in spectrum.iter_mut().skip(keep + 1) {
            *bin = Complex::new(0.0, 0.0);
        }
        spectrum[0].im = 0.0;
        if n % 2 == 0 {
            let last = spectrum.len() - 1;
            spectrum[last].im = 0.0;
        }
        inv.process_with_scratch(&mut spectrum, &mut input, &mut iscratch).expect("ifft length");
        for (r, v) in input.iter().enumerate() {
            out[r * cols + c] = v * scale;
        }
    }
    Ok(w.with_data(out))
}

fn decimation_factor(source_hz: f64, target_hz: f64) -> Result<usize, PreprocessError> {
    let ratio = source_hz / target_hz;
    let factor = ratio.round();
    if !(target_hz > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 * ratio.max(1.0) {
        return Err(PreprocessError::NonIntegerFactor { source_hz, target_hz });
    }
    Ok(factor as usize)
}

/// Keeps every `fs/target`-th row starting at row 0. The caller is
/// responsible for having low-passed to at most `target/2` beforehand.
pub fn decimate(w: &Waterfall, target_hz: f64) -> Result<Waterfall, PreprocessError> {
    let factor = decimation_factor(w.sample_rate_hz(), target_hz)?;
    if factor == 1 {
        return Ok(w.clone());
    }
    let rows = w.rows().div_ceil(factor);
    let mut data = Vec::with_capacity(rows * w.cols());
    for r in (0..w.rows()).step_by(factor) {
        data.extend_from_slice(w.row(r));
    }
    let axes = Axes { sample_rate_hz: target_hz, ..*w.axes() };
    Ok(Waterfall::from_parts_unchecked(data, rows, w.cols(), axes))
}

/// The retained low-frequency half-spectrum of every channel of a raster.
#[derive(Debug, Clone)]
pub struct LowBand {
    /// `bins[c][k]` is bin `k` of channel `c`, for `k <= max_bin`.
    bins: Vec<Vec<Complex<f64>>>,
    n: usize,
    axes: Axes,
}

impl LowBand {
    /// Transforms every channel and keeps bins up to `max_cutoff_hz`.
    pub fn analyze(w: &Waterfall, max_cutoff_hz: f64) -> Result<Self, PreprocessError> {
        LowPassSpec::new(max_cutoff_hz).validate(w.sample_rate_hz())?;
        let (n, cols) = (w.rows(), w.cols());
        let keep = last_kept_bin(max_cutoff_hz, n, w.sample_rate_hz());
        let fwd = forward_plan(n);
        let mut scratch = fwd.make_scratch_vec();
        let mut spectrum = fwd.make_output_vec();
        let mut bins = Vec::with_capacity(cols);

        // Transpose in column blocks so the time-major source is read
        // sequentially.
        const BLOCK: usize = 16;
        let mut buffers: Vec<Vec<f64>> = (0..BLOCK).map(|_| vec![0.0; n]).collect();
        let data = w.data();
        for c0 in (0..cols).step_by(BLOCK) {
            let width = BLOCK.min(cols - c0);
            for r in 0..n {
                let row = &data[r * cols + c0..r * cols + c0 + width];
                for (b, &v) in row.iter().enumerate() {
                    buffers[b][r] = v;
                }
            }
            for buf in buffers.iter_mut().take(width) {
                fwd.process_with_scratch(buf, &mut spectrum, &mut scratch).expect("fft length");
                bins.push(spectrum[..=keep].to_vec());
            }
        }
        Ok(Self { bins, n, axes: *w.axes() })
    }

    pub fn cols(&self) -> usize {
        self.bins.len()
    }

    pub fn source_rows(&self) -> usize {
        self.n
    }

    pub fn axes(&self) -> &Axes {
        &self.axes
    }

    /// Highest cutoff this band can reconstruct.
    pub fn max_cutoff_hz(&self) -> f64 {
        (self.bins[0].len() - 1) as f64 * self.axes.sample_rate_hz / self.n as f64
    }

    /// Low-passes at `cutoff_hz` and decimates to `target_hz`, producing the
    /// same rows `decimate(low_pass(w))` would.
    pub fn reconstruct(&self, cutoff_hz: f64, target_hz: f64) -> Result<Waterfall, PreprocessError> {
        let fs = self.axes.sample_rate_hz;
        LowPassSpec::new(cutoff_hz).validate(fs)?;
        let factor = decimation_factor(fs, target_hz)?;
        let keep = last_kept_bin(cutoff_hz, self.n, fs);
        if keep + 1 > self.bins[0].len() {
            return Err(PreprocessError::CutoffAboveBand { cutoff_hz, max_hz: self.max_cutoff_hz() });
        }
        let n = self.n;
        let m = n.div_ceil(factor);
        let cols = self.cols();
        let mut out = vec![0.0; m * cols];
        let scale = 1.0 / n as f64;

        if n % factor == 0 && 2 * keep < m {
            // Sampling every factor-th point of an N-point band-limited
            // signal is an M-point inverse transform of the same bins.
            let mut planner = RealFftPlanner::<f64>::new();
            let inv = planner.plan_fft_inverse(m);
            let mut spec = inv.make_input_vec();
            let mut series = inv.make_output_vec();
            let mut scratch = inv.make_scratch_vec();
            for (c, bins) in self.bins.iter().enumerate() {
                spec.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
                spec[..=keep].copy_from_slice(&bins[..=keep]);
                spec[0].im = 0.0;
                inv.process_with_scratch(&mut spec, &mut series, &mut scratch).expect("ifft length");
                for (r, v) in series.iter().enumerate() {
                    out[r * cols + c] = v * scale;
                }
            }
        } else {
            let (cos_t, sin_t): (Vec<f64>, Vec<f64>) =
                (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).sin_cos()).map(|(s, c)| (c, s)).unzip();
            for (c, bins) in self.bins.iter().enumerate() {
                for r in 0..m {
                    let step = (r * factor) % n;
                    let mut acc = bins[0].re;
                    let mut idx = 0usize;
                    for z in &bins[1..=keep] {
                        idx = (idx + step) % n;
                        acc += 2.0 * (z.re * cos_t[idx] - z.im * sin_t[idx]);
                    }
                    out[r * cols + c] = acc * scale;
                }
            }
        }
        let axes = Axes { sample_rate_hz: target_hz, ..self.axes };
        Ok(Waterfall::from_parts_unchecked(out, m, cols, axes))
    }
}

/// Fused low-pass and decimation.
pub fn low_pass_decimate(w: &Waterfall, spec: &LowPassSpec, target_hz: f64) -> Result<Waterfall, PreprocessError> {
    decimation_factor(w.sample_rate_hz(), target_hz)?;
    LowBand::analyze(w, spec.cutoff_hz)?.reconstruct(spec.cutoff_hz, target_hz)
}
