//! Vehicle detection on bridge-mounted distributed acoustic sensing data.
//!
//! A strain-rate waterfall (channels along the fiber, samples in time) is
//! turned into a binary edge image, straight trajectories are pulled out with
//! a probabilistic Hough transform, duplicate segments are merged by DBSCAN
//! under a mean-absolute-time-difference metric, and each merged line yields
//! a crossing time, speed, direction and class. The same chain runs offline,
//! inside a parameter tuner, and in a real-time engine fed by 10 s batch
//! files.
//!
//! Module map:
//!
//! * [`waterfall`]: raster type, DASW container, masking, concatenation, image export
//! * [`preprocess`]: low-pass, decimation, directional smoothing, Sobel, threshold
//! * [`hough`]: standard and probabilistic Hough transforms
//! * [`cluster`]: extrapolation, line metric, DBSCAN, speed and classification
//! * [`evaluate`]: penalized matching loss against ground truth
//! * [`tune`]: Tree-structured Parzen Estimator
//! * [`simulate`]: synthetic waterfalls with exact ground truth
//! * [`stream`]: window assembly, cross-window identity, sinks, directory watch
//! * [`config`] and [`detect`]: the pipeline configuration and its composition

pub mod cluster;
pub mod config;
pub mod detect;
pub mod evaluate;
pub mod hough;
pub mod preprocess;
pub mod simulate;
pub mod stream;
pub mod tune;
pub mod waterfall;

use serde::{Deserialize, Serialize};

/// Travel direction along the fiber. `Up` means channel index increases
/// with time, so the trajectory has a positive time-per-channel slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Up, Direction::Down];

    /// +1 for `Up`, -1 for `Down`.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Up => 1.0,
            Direction::Down => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
