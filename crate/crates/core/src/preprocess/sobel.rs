//! Rectified Sobel gradient magnitude and thresholding.
//!
//! Gradients follow the derivative-positive convention: a value that grows
//! with channel index (or with time) gives a positive response. Only
//! positive responses are kept before the magnitude is formed, which keeps
//! the rising edge of a passing vehicle's quasi-static pulse and drops the
//! falling one.

use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::waterfall::{BinaryImage, Waterfall};

/// Spatial kernel: columns (channels) left to right.
pub const SOBEL_S: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Temporal kernel: rows (time) top to bottom.
pub const SOBEL_T: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub tau: f64,
}

pub fn sobel_rectified_magnitude(w: &Waterfall) -> Result<Waterfall, PreprocessError> {
    let (rows, cols) = (w.rows(), w.cols());
    if rows < 3 || cols < 3 {
        return Err(PreprocessError::ImageTooSmall { rows, cols });
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let up = w.row(r.saturating_sub(1));
        let mid = w.row(r);
        let down = w.row((r + 1).min(rows - 1));
        for c in 0..cols {
            let l = c.saturating_sub(1);
            let rr = (c + 1).min(cols - 1);
            let gs = (up[rr] - up[l]) + 2.0 * (mid[rr] - mid[l]) + (down[rr] - down[l]);
            let gt = (down[l] + 2.0 * down[c] + down[rr]) - (up[l] + 2.0 * up[c] + up[rr]);
            let (is, it) = (gs.max(0.0), gt.max(0.0));
            out[r * cols + c] = (is * is + it * it).sqrt();
        }
    }
    Ok(w.with_data(out))
}

/// Foreground where the value is strictly above `tau`.
pub fn binarize(w: &Waterfall, spec: &ThresholdSpec) -> BinaryImage {
    let bits = w.data().iter().map(|&v| v > spec.tau).collect();
    BinaryImage::new(bits, w.rows(), w.cols(), *w.axes())
}
