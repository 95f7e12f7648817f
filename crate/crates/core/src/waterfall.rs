//! DAS rasters: the in-memory [`Waterfall`], the DASW v1 container, channel
//! masking, time concatenation and 8-bit image export.
//!
//! Layout is row-major with one row per time sample and one column per
//! channel, so appending a batch in time is a contiguous copy.
//!
//! # DASW v1
//!
//! All fields little-endian:
//!
//! | offset | type  | field              |
//! |--------|-------|--------------------|
//! | 0      | [u8;4]| magic `"DASW"`     |
//! | 4      | u16   | version (= 1)      |
//! | 6      | u16   | reserved (= 0)     |
//! | 8      | u32   | channel_count      |
//! | 12     | u32   | sample_count       |
//! | 16     | f64   | sample_rate_hz     |
//! | 24     | f64   | channel_spacing_m  |
//! | 32     | i64   | start_time_unix_ns |
//! | 40     | u32   | channel_offset     |
//! | 44     | f32[] | samples, time-major|
//!
//! Other containers (HDF5 from the interrogator, for instance) can be
//! supported by writing an adapter that produces a [`Waterfall`].

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::hough::LineSegment;

/// Magic bytes at the start of every DASW file.
pub const DASW_MAGIC: &[u8; 4] = b"DASW";
/// The only container version this crate reads and writes.
pub const DASW_VERSION: u16 = 1;
/// Size of the fixed DASW v1 header in bytes.
pub const DASW_HEADER_LEN: usize = 44;

#[derive(Debug, Error)]
pub enum WaterfallError {
    #[error("bad magic: expected \"DASW\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported DASW version {0}")]
    VersionUnsupported(u16),
    #[error("truncated payload: header declares {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("non-finite sample at row {row}, channel {channel}")]
    NonFiniteSample { row: usize, channel: usize },
    #[error("channel mask out of bounds for {channels} channels: {reason}")]
    MaskOutOfBounds { channels: usize, reason: String },
    #[error("gap between batches: expected start {expected_ns} ns, got {actual_ns} ns")]
    GapDetected { expected_ns: i64, actual_ns: i64 },
    #[error("batch metadata mismatch: {0}")]
    MetadataMismatch(String),
    #[error("invalid waterfall: {0}")]
    Invalid(String),
    #[error("invalid export range: {0}")]
    InvalidRange(String),
    #[error("I/O failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Axis metadata shared by every raster derived from one acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axes {
    pub sample_rate_hz: f64,
    pub channel_spacing_m: f64,
    pub start_time_ns: i64,
    /// Index of the first physical channel held in column 0.
    pub channel_offset: u32,
}

impl Axes {
    /// Sample period in nanoseconds (may be fractional for odd rates).
    pub fn period_ns(&self) -> f64 {
        1e9 / self.sample_rate_hz
    }

    /// Absolute time of `row`, computed from the row index directly so no
    /// rounding error accumulates over long recordings.
    pub fn row_time_ns(&self, row: usize) -> i64 {
        self.start_time_ns + (row as f64 * 1e9 / self.sample_rate_hz).round() as i64
    }
}

/// Strain-rate raster: `rows` time samples by `cols` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Waterfall {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
    axes: Axes,
}

impl Waterfall {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize, axes: Axes) -> Result<Self, WaterfallError> {
        if rows == 0 || cols == 0 {
            return Err(WaterfallError::Invalid(format!("empty raster {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(WaterfallError::Invalid(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !(axes.sample_rate_hz > 0.0 && axes.sample_rate_hz.is_finite()) {
            return Err(WaterfallError::Invalid(format!("sample rate {}", axes.sample_rate_hz)));
        }
        if !(axes.channel_spacing_m > 0.0 && axes.channel_spacing_m.is_finite()) {
            return Err(WaterfallError::Invalid(format!(
                "channel spacing {}",
                axes.channel_spacing_m
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(WaterfallError::NonFiniteSample { row: i / cols, channel: i % cols });
        }
        Ok(Self { data, rows, cols, axes })
    }

    pub fn zeros(rows: usize, cols: usize, axes: Axes) -> Result<Self, WaterfallError> {
        Self::new(vec![0.0; rows * cols], rows, cols, axes)
    }

    /// Builds a raster with the same axes as `self` from new data of the same
    /// shape. Used by stages that transform values but not geometry.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { data, rows: self.rows, cols: self.cols, axes: self.axes }
    }

    pub(crate) fn from_parts_unchecked(data: Vec<f64>, rows: usize, cols: usize, axes: Axes) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, axes }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn axes(&self) -> &Axes {
        &self.axes
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.axes.sample_rate_hz
    }

    pub fn channel_spacing_m(&self) -> f64 {
        self.axes.channel_spacing_m
    }

    pub fn start_time_ns(&self) -> i64 {
        self.axes.start_time_ns
    }

    /// Time just past the last row, i.e. the start time of a contiguous
    /// successor batch.
    pub fn end_time_ns(&self) -> i64 {
        self.axes.row_time_ns(self.rows)
    }

    pub fn duration_s(&self) -> f64 {
        self.rows as f64 / self.axes.sample_rate_hz
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Copies one channel out as a time series.
    pub fn channel(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + col]).collect()
    }

    /// Sub-raster of rows `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self, WaterfallError> {
        if len == 0 || start + len > self.rows {
            return Err(WaterfallError::Invalid(format!(
                "row slice [{start}, {}) outside 0..{}",
                start + len,
                self.rows
            )));
        }
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        let axes = Axes { start_time_ns: self.axes.row_time_ns(start), ..self.axes };
        Ok(Self { data, rows: len, cols: self.cols, axes })
    }
}

/// Binary foreground image with the geometry of the raster it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryImage {
    bits: Vec<bool>,
    rows: usize,
    cols: usize,
    axes: Axes,
}

impl BinaryImage {
    pub fn new(bits: Vec<bool>, rows: usize, cols: usize, axes: Axes) -> Self {
        assert_eq!(bits.len(), rows * cols, "bit buffer does not match dimensions");
        Self { bits, rows, cols, axes }
    }

    /// Convenience constructor for tests and synthetic scenes: 1 Hz rows,
    /// 1 m channels.
    pub fn from_pixels(rows: usize, cols: usize, pixels: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut bits = vec![false; rows * cols];
        for (x, y) in pixels {
            if x < cols && y < rows {
                bits[y * cols + x] = true;
            }
        }
        let axes = Axes { sample_rate_hz: 1.0, channel_spacing_m: 1.0, start_time_ns: 0, channel_offset: 0 };
        Self { bits, rows, cols, axes }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn axes(&self) -> &Axes {
        &self.axes
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Pixel lookup in image coordinates (x = channel column, y = time row).
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.cols + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground pixels as `(x, y)` in row-major scan order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i % self.cols, i / self.cols))
            .collect()
    }
}

/// Columns to drop: spare fiber at both ends plus a coil in the middle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct ChannelMask {
    pub head_drop: usize,
    /// Half-open `[start, end)` range of column indices; empty when
    /// `start == end`.
    pub coil_range: (usize, usize),
    pub tail_drop: usize,
}

impl ChannelMask {
    pub fn identity() -> Self {
        Self::default()
    }

    /// The Åstfjord bridge layout: 36 spare channels at the head, a 22
    /// channel coil at 365..387 and 49 spare channels at the tail, leaving
    /// 693 of 800 channels.
    pub fn astfjord() -> Self {
        Self { head_drop: 36, coil_range: (365, 387), tail_drop: 49 }
    }

    fn validate(&self, channels: usize) -> Result<(), WaterfallError> {
        let fail = |reason: String| Err(WaterfallError::MaskOutOfBounds { channels, reason });
        let (cs, ce) = self.coil_range;
        if cs > ce {
            return fail(format!("coil range [{cs}, {ce}) is reversed"));
        }
        if ce > channels {
            return fail(format!("coil range end {ce} past last channel"));
        }
        if self.head_drop + self.tail_drop > channels {
            return fail(format!("head {} + tail {} drops everything", self.head_drop, self.tail_drop));
        }
        if self.kept(channels).is_empty() {
            return fail("no channels survive".into());
        }
        Ok(())
    }

    /// Indices of the columns that survive, in order.
    pub fn kept(&self, channels: usize) -> Vec<usize> {
        let (cs, ce) = self.coil_range;
        let tail_start = channels.saturating_sub(self.tail_drop);
        (self.head_drop..tail_start).filter(|c| !(cs..ce).contains(c)).collect()
    }
}

pub fn mask_channels(w: &Waterfall, mask: &ChannelMask) -> Result<Waterfall, WaterfallError> {
    mask.validate(w.cols)?;
    let kept = mask.kept(w.cols);
    if kept.len() == w.cols {
        return Ok(w.clone());
    }
    let mut data = Vec::with_capacity(w.rows * kept.len());
    for r in 0..w.rows {
        let row = w.row(r);
        data.extend(kept.iter().map(|&c| row[c]));
    }
    let axes = Axes { channel_offset: w.axes.channel_offset + kept[0] as u32, ..w.axes };
    Ok(Waterfall::from_parts_unchecked(data, w.rows, kept.len(), axes))
}

/// Joins contiguous batches in time. Each batch must start where its
/// predecessor ends, to within half a sample period.
pub fn concat_time(batches: &[Waterfall]) -> Result<Waterfall, WaterfallError> {
    let first = batches
        .first()
        .ok_or_else(|| WaterfallError::Invalid("no batches to concatenate".into()))?;
    if batches.len() == 1 {
        return Ok(first.clone());
    }
    let half_period = first.axes.period_ns() / 2.0;
    for pair in batches.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.cols != b.cols {
            return Err(WaterfallError::MetadataMismatch(format!("channel count {} vs {}", a.cols, b.cols)));
        }
        if a.axes.sample_rate_hz != b.axes.sample_rate_hz {
            return Err(WaterfallError::MetadataMismatch(format!(
                "sample rate {} vs {}",
                a.axes.sample_rate_hz, b.axes.sample_rate_hz
            )));
        }
        if a.axes.channel_spacing_m != b.axes.channel_spacing_m || a.axes.channel_offset != b.axes.channel_offset {
            return Err(WaterfallError::MetadataMismatch("channel geometry differs".into()));
        }
        let expected = a.end_time_ns();
        let actual = b.axes.start_time_ns;
        if ((actual - expected) as f64).abs() > half_period {
            return Err(WaterfallError::GapDetected { expected_ns: expected, actual_ns: actual });
        }
    }
    let rows: usize = batches.iter().map(|b| b.rows).sum();
    let mut data = Vec::with_capacity(rows * first.cols);
    for b in batches {
        data.extend_from_slice(&b.data);
    }
    Ok(Waterfall::from_parts_unchecked(data, rows, first.cols, first.axes))
}

/// Serializes to the DASW v1 layout. Samples are stored as `f32`.
pub fn encode_dasw(w: &Waterfall) -> Vec<u8> {
    let mut buf = Vec::with_capacity(DASW_HEADER_LEN + w.data.len() * 4);
    buf.extend_from_slice(DASW_MAGIC);
    buf.extend_from_slice(&DASW_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(w.cols as u32).to_le_bytes());
    buf.extend_from_slice(&(w.rows as u32).to_le_bytes());
    buf.extend_from_slice(&w.axes.sample_rate_hz.to_le_bytes());
    buf.extend_from_slice(&w.axes.channel_spacing_m.to_le_bytes());
    buf.extend_from_slice(&w.axes.start_time_ns.to_le_bytes());
    buf.extend_from_slice(&w.axes.channel_offset.to_le_bytes());
    for &v in &w.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_dasw(bytes: &[u8]) -> Result<Waterfall, WaterfallError> {
    if bytes.len() < 4 {
        return Err(WaterfallError::TruncatedPayload { expected: DASW_HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != DASW_MAGIC {
        return Err(WaterfallError::BadMagic(magic));
    }
    if bytes.len() < DASW_HEADER_LEN {
        return Err(WaterfallError::TruncatedPayload { expected: DASW_HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u16_at(4);
    if version != DASW_VERSION {
        return Err(WaterfallError::VersionUnsupported(version));
    }
    let cols = u32_at(8) as usize;
    let rows = u32_at(12) as usize;
    let axes = Axes {
        sample_rate_hz: f64_at(16),
        channel_spacing_m: f64_at(24),
        start_time_ns: i64::from_le_bytes(bytes[32..40].try_into().unwrap()),
        channel_offset: u32_at(40),
    };
    let expected = DASW_HEADER_LEN as u64 + rows as u64 * cols as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(WaterfallError::TruncatedPayload { expected, actual: bytes.len() as u64 });
    }
    let data: Vec<f64> = bytes[DASW_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Waterfall::new(data, rows, cols, axes)
}

pub fn read_dasw(path: impl AsRef<Path>) -> Result<Waterfall, WaterfallError> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_dasw(&bytes)
}

pub fn write_dasw(w: &Waterfall, path: impl AsRef<Path>) -> Result<(), WaterfallError> {
    let mut f = BufWriter::new(File::create(path.as_ref())?);
    f.write_all(&encode_dasw(w))?;
    f.flush()?;
    Ok(())
}

/// Writes to `<path>.tmp` and renames into place, so directory watchers
/// never observe a partial file.
pub fn write_dasw_atomic(w: &Waterfall, path: impl AsRef<Path>) -> Result<(), WaterfallError> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    write_dasw(w, &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Linear-interpolated percentile of unsorted values (`pct` in 0..=100).
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Maps amplitudes to 0..=255 between two percentiles. A degenerate range
/// (constant image) maps everything to 0.
pub fn to_gray(w: &Waterfall, clip_lo_pct: f64, clip_hi_pct: f64) -> Result<Vec<u8>, WaterfallError> {
    if !(0.0..100.0).contains(&clip_lo_pct) || !(clip_lo_pct < clip_hi_pct && clip_hi_pct <= 100.0) {
        return Err(WaterfallError::InvalidRange(format!("clip {clip_lo_pct}..{clip_hi_pct}")));
    }
    let mut sorted = w.data.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile(&sorted, clip_lo_pct);
    let hi = percentile(&sorted, clip_hi_pct);
    let span = hi - lo;
    Ok(w.data
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect())
}

/// Binary PGM (P5), maxval 255.
pub fn export_pgm(w: &Waterfall, path: impl AsRef<Path>, clip_lo_pct: f64, clip_hi_pct: f64) -> Result<(), WaterfallError> {
    let gray = to_gray(w, clip_lo_pct, clip_hi_pct)?;
    let mut f = BufWriter::new(File::create(path.as_ref())?);
    write!(f, "P5\n{} {}\n255\n", w.cols, w.rows)?;
    f.write_all(&gray)?;
    f.flush()?;
    Ok(())
}

/// Binary image as PGM: foreground white.
pub fn export_binary_pgm(b: &BinaryImage, path: impl AsRef<Path>) -> Result<(), WaterfallError> {
    let mut f = BufWriter::new(File::create(path.as_ref())?);
    write!(f, "P5\n{} {}\n255\n", b.cols, b.rows)?;
    let bytes: Vec<u8> = b.bits.iter().map(|&v| if v { 255 } else { 0 }).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Integer Bresenham line from `(x0, y0)` to `(x1, y1)`, endpoints included.
pub fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// RGB overlay: 0..100 percentile grayscale with segments drawn in pure red.
pub fn render_overlay(w: &Waterfall, segments: &[LineSegment]) -> Result<Vec<u8>, WaterfallError> {
    let gray = to_gray(w, 0.0, 100.0)?;
    let mut rgb: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g]).collect();
    let fs = w.axes.sample_rate_hz;
    for seg in segments {
        let to_px = |c: f64, t: f64| (c.round() as i64, (t * fs).round() as i64);
        let (x0, y0) = to_px(seg.p1.channel, seg.p1.time_s);
        let (x1, y1) = to_px(seg.p2.channel, seg.p2.time_s);
        for (x, y) in bresenham(x0, y0, x1, y1) {
            if x >= 0 && y >= 0 && (x as usize) < w.cols && (y as usize) < w.rows {
                let i = 3 * (y as usize * w.cols + x as usize);
                rgb[i..i + 3].copy_from_slice(&[255, 0, 0]);
            }
        }
    }
    Ok(rgb)
}

/// Binary PPM (P6), maxval 255, segments in red over the grayscale raster.
pub fn export_ppm_overlay(w: &Waterfall, segments: &[LineSegment], path: impl AsRef<Path>) -> Result<(), WaterfallError> {
    let rgb = render_overlay(w, segments)?;
    let mut f = BufWriter::new(File::create(path.as_ref())?);
    write!(f, "P6\n{} {}\n255\n", w.cols, w.rows)?;
    f.write_all(&rgb)?;
    f.flush()?;
    Ok(())
}
