//! Same-size 2-D convolution with edge replication.
//!
//! Small kernels run as a direct sum. Large ones (the directional smoothing
//! kernels are a few thousand taps) go through a 2-D FFT of the padded
//! image; the padding is chosen so the circular wrap never reaches an
//! output sample.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::kernel::Kernel;
use super::PreprocessError;
use crate::waterfall::Waterfall;

/// Kernels with more taps than this use the FFT path.
const DIRECT_MAX_TAPS: usize = 121;

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn check(w: &Waterfall, k: &Kernel) -> Result<(), PreprocessError> {
    if k.rows() > w.rows() || k.cols() > w.cols() {
        return Err(PreprocessError::KernelLargerThanImage {
            kernel: (k.rows(), k.cols()),
            image: (w.rows(), w.cols()),
        });
    }
    Ok(())
}

pub fn convolve2d(w: &Waterfall, k: &Kernel) -> Result<Waterfall, PreprocessError> {
    check(w, k)?;
    if k.rows() * k.cols() <= DIRECT_MAX_TAPS {
        Ok(direct(w, k))
    } else {
        Ok(via_fft(w, k))
    }
}

/// Direct-sum path, exposed for comparison against the FFT path.
pub fn convolve2d_direct(w: &Waterfall, k: &Kernel) -> Result<Waterfall, PreprocessError> {
    check(w, k)?;
    Ok(direct(w, k))
}

/// FFT path, exposed for comparison against the direct path.
pub fn convolve2d_fft(w: &Waterfall, k: &Kernel) -> Result<Waterfall, PreprocessError> {
    check(w, k)?;
    Ok(via_fft(w, k))
}

fn direct(w: &Waterfall, k: &Kernel) -> Waterfall {
    let (rows, cols) = (w.rows(), w.cols());
    let (hr, hc) = ((k.rows() / 2) as isize, (k.cols() / 2) as isize);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for i in 0..k.rows() {
                let rr = clamp_index(r as isize - (i as isize - hr), rows);
                let src = w.row(rr);
                for j in 0..k.cols() {
                    let cc = clamp_index(c as isize - (j as isize - hc), cols);
                    acc += k.get(i, j) * src[cc];
                }
            }
            out[r * cols + c] = acc;
        }
    }
    w.with_data(out)
}

/// Smallest integer >= n whose only prime factors are 2, 3, 5 and 7.
fn smooth_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut x = m;
        for p in [2, 3, 5, 7] {
            while x % p == 0 {
                x /= p;
            }
        }
        if x == 1 {
            return m;
        }
        m += 1;
    }
}

struct Plan2d {
    rows: usize,
    cols: usize,
    row_fft: std::sync::Arc<dyn Fft<f64>>,
    col_fft: std::sync::Arc<dyn Fft<f64>>,
}

impl Plan2d {
    fn new(rows: usize, cols: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
        } else {
            (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
        };
        Self { rows, cols, row_fft, col_fft }
    }

    /// In-place 2-D transform of a row-major buffer.
    fn run(&self, buf: &mut [Complex<f64>]) {
        self.row_fft.process(buf);
        let mut t = transpose(buf, self.rows, self.cols);
        self.col_fft.process(&mut t);
        buf.copy_from_slice(&transpose(&t, self.cols, self.rows));
    }
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut dst = vec![Complex::new(0.0, 0.0); src.len()];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    dst
}

fn via_fft(w: &Waterfall, k: &Kernel) -> Waterfall {
    let (rows, cols) = (w.rows(), w.cols());
    let (hr, hc) = (k.rows() / 2, k.cols() / 2);
    // Replicated padding of hr/hc on every side; out(r, c) is then the
    // circular convolution at (r + 2hr, c + 2hc), whose support stays
    // inside the padded image.
    let (pr, pc) = (rows + 2 * hr, cols + 2 * hc);
    let (nr, nc) = (smooth_size(pr), smooth_size(pc));
    let zero = Complex::new(0.0, 0.0);

    let mut img = vec![zero; nr * nc];
    for y in 0..pr {
        let src = w.row(clamp_index(y as isize - hr as isize, rows));
        let dst = &mut img[y * nc..y * nc + pc];
        for (x, d) in dst.iter_mut().enumerate() {
            *d = Complex::new(src[clamp_index(x as isize - hc as isize, cols)], 0.0);
        }
    }
    let mut ker = vec![zero; nr * nc];
    for i in 0..k.rows() {
        for j in 0..k.cols() {
            ker[i * nc + j] = Complex::new(k.get(i, j), 0.0);
        }
    }

    let fwd = Plan2d::new(nr, nc, false);
    fwd.run(&mut img);
    fwd.run(&mut ker);
    for (a, b) in img.iter_mut().zip(&ker) {
        *a *= b;
    }
    Plan2d::new(nr, nc, true).run(&mut img);

    let scale = 1.0 / (nr * nc) as f64;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &img[(r + 2 * hr) * nc + 2 * hc..];
        for c in 0..cols {
            out[r * cols + c] = src[c].re * scale;
        }
    }
    w.with_data(out)
}
