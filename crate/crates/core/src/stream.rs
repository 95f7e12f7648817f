//! Real-time engine: window assembly from arriving batch files, per-window
//! detection, id hand-over between overlapping windows, and record sinks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{segment_distance, ExtrapolatedLine, VehicleClass, VehicleDetection};
use crate::config::PipelineConfig;
use crate::detect::{detect, StageDump};
use crate::waterfall::{concat_time, read_dasw, Waterfall, WaterfallError};
use crate::Direction;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid stream configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Waterfall(#[from] WaterfallError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("watcher: {0}")]
    Watch(#[from] notify::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StreamError + '_ {
    move |source| StreamError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SinkSpec {
    Ndjson { path: PathBuf },
    Http { endpoint: String, dead_letter: PathBuf },
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub watch_dir: PathBuf,
    pub batch_gap_s: f64,
    pub batch_duration_s: f64,
    pub eps_dedup_s: f64,
    pub sinks: Vec<SinkSpec>,
    pub pipeline: PipelineConfig,
}

impl StreamConfig {
    /// 10 s hop over 60 s windows, dedup radius equal to the cluster radius.
    pub fn new(watch_dir: impl Into<PathBuf>, pipeline: PipelineConfig) -> Self {
        Self {
            watch_dir: watch_dir.into(),
            batch_gap_s: 10.0,
            batch_duration_s: 60.0,
            eps_dedup_s: pipeline.cluster.eps_s,
            sinks: Vec::new(),
            pipeline,
        }
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let bad = |m: &str| Err(StreamError::Config(m.to_string()));
        if !(self.batch_gap_s > 0.0) {
            return bad("batch_gap_s must be positive");
        }
        if !(self.batch_duration_s >= self.batch_gap_s) {
            return bad("batch_duration_s must be at least batch_gap_s");
        }
        if !(self.eps_dedup_s > 0.0) {
            return bad("eps_dedup_s must be positive");
        }
        self.pipeline.validate().map_err(|e| StreamError::Config(e.to_string()))
    }

    /// Checks that gap and duration are whole multiples of the file period.
    pub fn check_period(&self, file_period_s: f64) -> Result<(), StreamError> {
        let multiple = |x: f64| {
            let k = (x / file_period_s).round();
            k >= 1.0 && (x - k * file_period_s).abs() < 1e-6 * x.max(1.0)
        };
        if multiple(self.batch_gap_s) && multiple(self.batch_duration_s) {
            Ok(())
        } else {
            Err(StreamError::Config(format!(
                "gap {} s and duration {} s must be multiples of the {file_period_s} s file period",
                self.batch_gap_s, self.batch_duration_s
            )))
        }
    }
}

/// One assembled window.
#[derive(Debug, Clone)]
pub struct Window {
    pub id: u64,
    pub data: Waterfall,
}

/// Collects contiguous batches and releases a window whenever the buffer
/// spans `duration` and `gap` has passed since the previous window's end.
#[derive(Debug)]
pub struct WindowAssembler {
    gap_ns: i64,
    duration_ns: i64,
    buffer: VecDeque<Waterfall>,
    last_emit_end_ns: Option<i64>,
    next_window_id: u64,
    warnings: u64,
}

impl WindowAssembler {
    pub fn new(gap_s: f64, duration_s: f64) -> Self {
        Self {
            gap_ns: (gap_s * 1e9).round() as i64,
            duration_ns: (duration_s * 1e9).round() as i64,
            buffer: VecDeque::new(),
            last_emit_end_ns: None,
            next_window_id: 0,
            warnings: 0,
        }
    }

    /// Late, duplicate and incompatible files ignored so far.
    pub fn warnings(&self) -> u64 {
        self.warnings
    }

    pub fn buffered_span_ns(&self) -> i64 {
        match (self.buffer.front(), self.buffer.back()) {
            (Some(a), Some(b)) => b.end_time_ns() - a.start_time_ns(),
            _ => 0,
        }
    }

    pub fn push(&mut self, batch: Waterfall) -> Result<Option<Window>, WaterfallError> {
        if let Some(last) = self.buffer.back() {
            let half = (5e8 / batch.sample_rate_hz()) as i64;
            let expected = last.end_time_ns();
            let same_layout = last.cols() == batch.cols()
                && last.sample_rate_hz() == batch.sample_rate_hz()
                && last.channel_spacing_m() == batch.channel_spacing_m();
            if batch.start_time_ns() < expected - half {
                log::warn!("ignoring late or duplicate batch starting at {} ns", batch.start_time_ns());
                self.warnings += 1;
                return Ok(None);
            }
            if !same_layout {
                log::warn!("batch layout changed, restarting the buffer");
                self.warnings += 1;
                self.buffer.clear();
                self.last_emit_end_ns = None;
            } else if batch.start_time_ns() > expected + half {
                log::warn!("gap of {} ns before batch, restarting the buffer", batch.start_time_ns() - expected);
                self.buffer.clear();
                self.last_emit_end_ns = None;
            }
        }
        self.buffer.push_back(batch);
        while self.buffer.len() > 1 && self.buffered_span_ns() - self.buffer[0].duration_ns() >= self.duration_ns {
            self.buffer.pop_front();
        }
        let end = self.buffer.back().map_or(0, Waterfall::end_time_ns);
        let tol = self.buffer.back().map_or(0, |b| (5e8 / b.sample_rate_hz()) as i64);
        let full = self.buffered_span_ns() >= self.duration_ns - tol;
        let due = self.last_emit_end_ns.map_or(true, |e| end - e >= self.gap_ns - tol);
        if full && due {
            self.emit().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Releases whatever newer data the buffer holds as a final, possibly
    /// short, window.
    pub fn finish(&mut self) -> Result<Option<Window>, WaterfallError> {
        let end = self.buffer.back().map(Waterfall::end_time_ns);
        match (end, self.last_emit_end_ns) {
            (Some(end), Some(e)) if end <= e => Ok(None),
            (Some(_), _) => self.emit().map(Some),
            (None, _) => Ok(None),
        }
    }

    fn emit(&mut self) -> Result<Window, WaterfallError> {
        let data = concat_time(self.buffer.make_contiguous())?;
        self.last_emit_end_ns = Some(data.end_time_ns());
        let id = self.next_window_id;
        self.next_window_id += 1;
        Ok(Window { id, data })
    }
}

trait DurationNs {
    fn duration_ns(&self) -> i64;
}

impl DurationNs for Waterfall {
    fn duration_ns(&self) -> i64 {
        self.end_time_ns() - self.start_time_ns()
    }
}

/// Output record of one vehicle seen in one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: u64,
    pub t_enter_unix_ns: i64,
    pub t_exit_unix_ns: i64,
    pub direction: Direction,
    pub speed_kmh: f64,
    pub class: VehicleClass,
    pub window_id: u64,
    pub detected_at_unix_ns: i64,
    pub latency_ms: f64,
}

impl DetectionRecord {
    /// Line in absolute Unix seconds over `extent` channels.
    pub fn line(&self, extent: f64) -> ExtrapolatedLine {
        let (enter, exit) = (self.t_enter_unix_ns as f64 * 1e-9, self.t_exit_unix_ns as f64 * 1e-9);
        match self.direction {
            Direction::Up => ExtrapolatedLine::new(enter, exit, extent),
            Direction::Down => ExtrapolatedLine::new(exit, enter, extent),
        }
    }
}

/// One record per id, each time and the speed being the median over that
/// id's records. Ordered by id.
pub fn collapse_by_id(records: &[DetectionRecord]) -> Vec<DetectionRecord> {
    let mut groups: BTreeMap<u64, Vec<&DetectionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.id).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let med_i = |f: &dyn Fn(&DetectionRecord) -> i64| {
                let mut v: Vec<i64> = g.iter().map(|r| f(r)).collect();
                v.sort_unstable();
                let n = v.len();
                if n % 2 == 1 { v[n / 2] } else { v[n / 2 - 1] + (v[n / 2] - v[n / 2 - 1]) / 2 }
            };
            let mut speeds: Vec<f64> = g.iter().map(|r| r.speed_kmh).collect();
            speeds.sort_by(f64::total_cmp);
            let n = speeds.len();
            let speed = if n % 2 == 1 { speeds[n / 2] } else { 0.5 * (speeds[n / 2 - 1] + speeds[n / 2]) };
            let last = g[g.len() - 1];
            DetectionRecord {
                t_enter_unix_ns: med_i(&|r| r.t_enter_unix_ns),
                t_exit_unix_ns: med_i(&|r| r.t_exit_unix_ns),
                speed_kmh: speed,
                ..last.clone()
            }
        })
        .collect()
}

/// Source of `detected_at` stamps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// System time at emission.
    Wall,
    /// End time of the window's data, which makes replays reproducible.
    DataTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track {
    pub line: ExtrapolatedLine,
    pub direction: Direction,
    pub last_seen_ns: i64,
}

/// Live vehicle ids and the lines they were last seen on.
#[derive(Debug, Clone, Default)]
pub struct TrackState {
    pub active: BTreeMap<u64, Track>,
    pub next_id: u64,
    pub retired: BTreeSet<u64>,
}

impl TrackState {
    /// Matches this window's detections to live tracks of the same
    /// direction, closest pair first (ties go to the lower id), within
    /// `eps_s`. Returns one id per detection; unmatched detections get fresh
    /// ids in input order. Tracks unseen for longer than `retain_ns` before
    /// `now_ns` are retired afterwards.
    pub fn assign(&mut self, dets: &[(ExtrapolatedLine, Direction)], eps_s: f64, now_ns: i64, retain_ns: i64) -> Vec<u64> {
        let mut pairs: Vec<(f64, u64, usize)> = Vec::new();
        for (i, (line, dir)) in dets.iter().enumerate() {
            for (&id, t) in &self.active {
                if t.direction != *dir {
                    continue;
                }
                if let Ok(d) = segment_distance(line, &t.line) {
                    if d <= eps_s {
                        pairs.push((d, id, i));
                    }
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut ids: Vec<Option<u64>> = vec![None; dets.len()];
        let mut taken = BTreeSet::new();
        for (_, id, i) in pairs {
            if ids[i].is_none() && !taken.contains(&id) {
                ids[i] = Some(id);
                taken.insert(id);
            }
        }
        let ids: Vec<u64> = ids
            .into_iter()
            .map(|id| {
                id.unwrap_or_else(|| {
                    let id = self.next_id;
                    self.next_id += 1;
                    id
                })
            })
            .collect();
        for (&id, (line, dir)) in ids.iter().zip(dets) {
            self.active.insert(id, Track { line: *line, direction: *dir, last_seen_ns: now_ns });
        }
        let stale: Vec<u64> = self.active.iter().filter(|(_, t)| now_ns - t.last_seen_ns > retain_ns).map(|(&id, _)| id).collect();
        for id in stale {
            self.active.remove(&id);
            self.retired.insert(id);
        }
        ids
    }
}

fn now_unix_ns() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as i64)
}

/// Turns a window's detections into records, assigning ids through `tracks`.
pub fn records_for_window(
    detections: &[VehicleDetection],
    window_id: u64,
    window_end_ns: i64,
    tracks: &mut TrackState,
    eps_s: f64,
    retain_ns: i64,
    detected_at_ns: i64,
) -> Vec<DetectionRecord> {
    let lines: Vec<(ExtrapolatedLine, Direction)> = detections.iter().map(|d| (d.line, d.direction)).collect();
    let ids = tracks.assign(&lines, eps_s, window_end_ns, retain_ns);
    detections
        .iter()
        .zip(ids)
        .map(|(d, id)| {
            let (enter, exit) = match d.direction {
                Direction::Up => (d.line.t_at_s0, d.line.t_at_sl),
                Direction::Down => (d.line.t_at_sl, d.line.t_at_s0),
            };
            let (enter, exit) = ((enter * 1e9).round() as i64, (exit * 1e9).round() as i64);
            DetectionRecord {
                id,
                t_enter_unix_ns: enter,
                t_exit_unix_ns: exit,
                direction: d.direction,
                speed_kmh: d.speed_kmh,
                class: d.class,
                window_id,
                detected_at_unix_ns: detected_at_ns,
                latency_ms: ((detected_at_ns - enter.max(exit)) as f64 * 1e-6).max(0.0),
            }
        })
        .collect()
}

pub trait Sink {
    fn write(&mut self, records: &[DetectionRecord]) -> Result<(), StreamError>;
}

/// Appends one JSON object per line and syncs after each window.
pub struct NdjsonSink {
    path: PathBuf,
    file: File,
}

impl NdjsonSink {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StreamError> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { path, file })
    }
}

fn to_ndjson(records: &[DetectionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

impl Sink for NdjsonSink {
    fn write(&mut self, records: &[DetectionRecord]) -> Result<(), StreamError> {
        if records.is_empty() {
            return Ok(());
        }
        self.file.write_all(to_ndjson(records).as_bytes()).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }
}

/// POSTs each window's records as a JSON array. After `attempts` failures
/// the records go to the dead-letter file instead.
pub struct HttpSink {
    endpoint: String,
    dead_letter: PathBuf,
    agent: ureq::Agent,
    pub attempts: u32,
    pub backoff: Duration,
    dead_lettered: u64,
}

impl HttpSink {
    pub fn new(endpoint: impl Into<String>, dead_letter: impl Into<PathBuf>) -> Self {
        Self {
            endpoint: endpoint.into(),
            dead_letter: dead_letter.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(10)).build(),
            attempts: 3,
            backoff: Duration::from_millis(200),
            dead_lettered: 0,
        }
    }

    /// Records written to the dead-letter file so far.
    pub fn dead_lettered(&self) -> u64 {
        self.dead_lettered
    }
}

impl Sink for HttpSink {
    fn write(&mut self, records: &[DetectionRecord]) -> Result<(), StreamError> {
        if records.is_empty() {
            return Ok(());
        }
        let body = serde_json::to_string(records).expect("records serialize");
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.agent.post(&self.endpoint).set("Content-Type", "application/json").send_string(&body) {
                Ok(_) => return Ok(()),
                Err(e) => log::warn!("POST {} attempt {} failed: {e}", self.endpoint, attempt + 1),
            }
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.dead_letter).map_err(io_err(&self.dead_letter))?;
        f.write_all(to_ndjson(records).as_bytes()).map_err(io_err(&self.dead_letter))?;
        f.sync_data().map_err(io_err(&self.dead_letter))?;
        self.dead_lettered += records.len() as u64;
        Ok(())
    }
}

pub fn open_sink(spec: &SinkSpec) -> Result<Box<dyn Sink>, StreamError> {
    Ok(match spec {
        SinkSpec::Ndjson { path } => Box::new(NdjsonSink::open(path)?),
        SinkSpec::Http { endpoint, dead_letter } => Box::new(HttpSink::new(endpoint.clone(), dead_letter.clone())),
    })
}

/// Counters kept by [`StreamEngine`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamStats {
    pub files: u64,
    pub windows: u64,
    pub skipped_windows: u64,
    pub records: u64,
    pub ignored_files: u64,
    pub total_processing: Duration,
    pub max_processing: Duration,
}

impl StreamStats {
    pub fn mean_processing(&self) -> Duration {
        if self.windows == 0 {
            Duration::ZERO
        } else {
            self.total_processing / self.windows as u32
        }
    }
}

/// Ingestion, processing and emission in one sequence: each batch goes into
/// the assembler, each released window is processed before the next batch is
/// taken, so windows complete in order.
pub struct StreamEngine {
    cfg: StreamConfig,
    assembler: WindowAssembler,
    tracks: TrackState,
    sinks: Vec<Box<dyn Sink>>,
    clock: Clock,
    dump: Option<StageDump>,
    stats: StreamStats,
    check_period: bool,
}

impl StreamEngine {
    pub fn new(cfg: StreamConfig, clock: Clock) -> Result<Self, StreamError> {
        cfg.validate()?;
        let sinks = cfg.sinks.iter().map(open_sink).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            assembler: WindowAssembler::new(cfg.batch_gap_s, cfg.batch_duration_s),
            cfg,
            tracks: TrackState::default(),
            sinks,
            clock,
            dump: None,
            stats: StreamStats::default(),
            check_period: false,
        })
    }

    /// Adds a sink beyond those named in the configuration.
    pub fn add_sink(&mut self, sink: Box<dyn Sink>) {
        self.sinks.push(sink);
    }

    /// Writes per-stage images of every window under `dir`.
    pub fn dump_stages(&mut self, dir: impl Into<PathBuf>) {
        self.dump = Some(StageDump { dir: dir.into(), prefix: String::new() });
    }

    pub fn stats(&self) -> StreamStats {
        StreamStats { ignored_files: self.assembler.warnings(), ..self.stats }
    }

    pub fn tracks(&self) -> &TrackState {
        &self.tracks
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    /// Makes the next batch verify that gap and duration are multiples of
    /// its length. Live watching needs this; offline slicing does not.
    pub fn require_period_check(&mut self) {
        self.check_period = true;
    }

    /// Reads one batch file. A read failure drops the file and the buffer
    /// continues after a gap.
    pub fn on_file(&mut self, path: &Path) -> Result<Vec<DetectionRecord>, StreamError> {
        match read_dasw(path) {
            Ok(w) => self.on_batch(w),
            Err(e) => {
                log::error!("skipping {}: {e}", path.display());
                self.stats.ignored_files += 1;
                Ok(Vec::new())
            }
        }
    }

    pub fn on_batch(&mut self, batch: Waterfall) -> Result<Vec<DetectionRecord>, StreamError> {
        if self.check_period {
            self.cfg.check_period(batch.duration_s())?;
            self.check_period = false;
        }
        self.stats.files += 1;
        match self.assembler.push(batch)? {
            Some(w) => self.process_window(&w),
            None => Ok(Vec::new()),
        }
    }

    /// Flushes the data buffered since the last window.
    pub fn finish(&mut self) -> Result<Vec<DetectionRecord>, StreamError> {
        match self.assembler.finish()? {
            Some(w) => self.process_window(&w),
            None => Ok(Vec::new()),
        }
    }

    pub fn process_window(&mut self, window: &Window) -> Result<Vec<DetectionRecord>, StreamError> {
        let started = Instant::now();
        let dump = self.dump.as_ref().map(|d| StageDump { dir: d.dir.clone(), prefix: format!("w{:06}", window.id) });
        if let Some(d) = &dump {
            std::fs::create_dir_all(&d.dir).map_err(io_err(&d.dir))?;
        }
        let detections = match detect(&window.data, &self.cfg.pipeline, dump.as_ref()) {
            Ok(r) => r.detections,
            Err(e) => {
                log::error!("window {} skipped: {e}", window.id);
                self.stats.skipped_windows += 1;
                Vec::new()
            }
        };
        let end_ns = window.data.end_time_ns();
        let detected_at = match self.clock {
            Clock::Wall => now_unix_ns(),
            Clock::DataTime => end_ns,
        };
        let retain_ns = (2.0 * self.cfg.batch_duration_s * 1e9) as i64;
        let records = records_for_window(&detections, window.id, end_ns, &mut self.tracks, self.cfg.eps_dedup_s, retain_ns, detected_at);
        for s in &mut self.sinks {
            if let Err(e) = s.write(&records) {
                log::error!("sink failed: {e}");
            }
        }
        let took = started.elapsed();
        self.stats.windows += 1;
        self.stats.records += records.len() as u64;
        self.stats.total_processing += took;
        self.stats.max_processing = self.stats.max_processing.max(took);
        if took.as_secs_f64() > self.cfg.batch_gap_s {
            log::warn!("window {} took {:.1} s, longer than the {} s gap; later windows queue", window.id, took.as_secs_f64(), self.cfg.batch_gap_s);
        }
        log::info!("window {}: {} records in {:.2} s", window.id, records.len(), took.as_secs_f64());
        Ok(records)
    }
}

fn is_batch_file(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "dasw")
}

/// `*.dasw` files in `dir`, sorted by name.
pub fn list_batches(dir: &Path) -> Result<Vec<PathBuf>, StreamError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_batch_file(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Feeds existing files in name order and flushes the tail.
pub fn replay(engine: &mut StreamEngine, files: &[PathBuf]) -> Result<Vec<DetectionRecord>, StreamError> {
    let mut out = Vec::new();
    for f in files {
        out.extend(engine.on_file(f)?);
    }
    out.extend(engine.finish()?);
    Ok(out)
}

/// Processes the files already in the watch directory, then every `*.dasw`
/// renamed or written into it, until `stop` is set. The buffered tail is
/// flushed on stop.
pub fn watch(engine: &mut StreamEngine, stop: &AtomicBool) -> Result<u64, StreamError> {
    use notify::{EventKind, RecursiveMode, Watcher};
    let dir = engine.config().watch_dir.clone();
    let (tx, rx) = mpsc::channel();
    let mut watcher = notify::recommended_watcher(move |ev: notify::Result<notify::Event>| {
        let _ = tx.send(ev);
    })?;
    watcher.watch(&dir, RecursiveMode::NonRecursive)?;
    engine.require_period_check();
    let mut seen: BTreeSet<PathBuf> = BTreeSet::new();
    let mut emitted = 0u64;
    for f in list_batches(&dir)? {
        seen.insert(f.clone());
        emitted += engine.on_file(&f)?.len() as u64;
    }
    while !stop.load(Ordering::SeqCst) {
        let ev = match rx.recv_timeout(Duration::from_millis(200)) {
            Ok(Ok(ev)) => ev,
            Ok(Err(e)) => {
                log::warn!("watch error: {e}");
                continue;
            }
            Err(mpsc::RecvTimeoutError::Timeout) => continue,
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        };
        if !matches!(ev.kind, EventKind::Create(_) | EventKind::Modify(notify::event::ModifyKind::Name(_))) {
            continue;
        }
        let mut fresh: Vec<PathBuf> = ev.paths.into_iter().filter(|p| is_batch_file(p) && p.exists() && !seen.contains(p)).collect();
        fresh.sort();
        for f in fresh {
            seen.insert(f.clone());
            emitted += engine.on_file(&f)?.len() as u64;
        }
    }
    emitted += engine.finish()?.len() as u64;
    Ok(emitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waterfall::Axes;

    fn batch(k: i64, secs: f64) -> Waterfall {
        let fs = 10.0;
        let rows = (secs * fs) as usize;
        let axes = Axes { sample_rate_hz: fs, channel_spacing_m: 1.0, start_time_ns: k * (secs * 1e9) as i64, channel_offset: 0 };
        Waterfall::zeros(rows, 4, axes).unwrap()
    }

    fn feed(gap: f64, dur: f64, n: i64) -> Vec<(i64, i64)> {
        let mut a = WindowAssembler::new(gap, dur);
        (0..n)
            .filter_map(|k| a.push(batch(k, 10.0)).unwrap())
            .map(|w| (w.data.start_time_ns() / 10_000_000_000, w.data.end_time_ns() / 10_000_000_000))
            .collect()
    }

    #[test]
    fn sixth_file_completes_first_window() {
        assert!(feed(10.0, 60.0, 5).is_empty());
        assert_eq!(feed(10.0, 60.0, 6), vec![(0, 6)]);
    }

    #[test]
    fn consecutive_windows_overlap_by_fifty_seconds() {
        assert_eq!(feed(10.0, 60.0, 7), vec![(0, 6), (1, 7)]);
    }

    #[test]
    fn equal_gap_and_duration_window_per_file() {
        assert_eq!(feed(10.0, 10.0, 3), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn wider_gap_skips_files() {
        assert_eq!(feed(20.0, 60.0, 9), vec![(0, 6), (2, 8)]);
    }

    #[test]
    fn late_and_duplicate_files_counted() {
        let mut a = WindowAssembler::new(10.0, 30.0);
        a.push(batch(0, 10.0)).unwrap();
        a.push(batch(1, 10.0)).unwrap();
        assert!(a.push(batch(1, 10.0)).unwrap().is_none());
        assert!(a.push(batch(0, 10.0)).unwrap().is_none());
        assert_eq!(a.warnings(), 2);
        assert!(a.push(batch(2, 10.0)).unwrap().is_some());
    }

    #[test]
    fn missing_file_restarts_buffer() {
        let mut a = WindowAssembler::new(10.0, 30.0);
        for k in [0, 1, 3, 4] {
            assert!(a.push(batch(k, 10.0)).unwrap().is_none());
        }
        let w = a.push(batch(5, 10.0)).unwrap().unwrap();
        assert_eq!(w.data.start_time_ns(), 30_000_000_000);
    }

    #[test]
    fn finish_flushes_partial_window_once() {
        let mut a = WindowAssembler::new(10.0, 60.0);
        a.push(batch(0, 10.0)).unwrap();
        a.push(batch(1, 10.0)).unwrap();
        let w = a.finish().unwrap().unwrap();
        assert_eq!(w.data.rows(), 200);
        assert!(a.finish().unwrap().is_none());
    }

    fn line(t0: f64, tl: f64) -> ExtrapolatedLine {
        ExtrapolatedLine::new(t0, tl, 693.0)
    }

    #[test]
    fn tracks_keep_ids_across_windows() {
        let mut ts = TrackState::default();
        let a = ts.assign(&[(line(100.0, 130.0), Direction::Up), (line(140.0, 110.0), Direction::Down)], 2.0, 0, 120);
        assert_eq!(a, vec![0, 1]);
        let b = ts.assign(&[(line(140.3, 110.2), Direction::Down), (line(100.5, 130.4), Direction::Up)], 2.0, 10, 120);
        assert_eq!(b, vec![1, 0]);
    }

    #[test]
    fn direction_partitions_matching() {
        let mut ts = TrackState::default();
        ts.assign(&[(line(100.0, 130.0), Direction::Up)], 2.0, 0, 120);
        let ids = ts.assign(&[(line(100.0, 130.0), Direction::Down)], 2.0, 10, 120);
        assert_eq!(ids, vec![1]);
    }

    #[test]
    fn closest_pair_wins_and_one_track_per_window() {
        let mut ts = TrackState::default();
        ts.assign(&[(line(100.0, 130.0), Direction::Up)], 2.0, 0, 120);
        let ids = ts.assign(&[(line(101.0, 131.0), Direction::Up), (line(100.2, 130.2), Direction::Up)], 2.0, 10, 120);
        assert_eq!(ids, vec![1, 0]);
    }

    #[test]
    fn stale_tracks_retire() {
        let mut ts = TrackState::default();
        ts.assign(&[(line(100.0, 130.0), Direction::Up)], 2.0, 0, 120);
        ts.assign(&[], 2.0, 121, 120);
        assert!(ts.active.is_empty());
        assert!(ts.retired.contains(&0));
        let ids = ts.assign(&[(line(100.0, 130.0), Direction::Up)], 2.0, 122, 120);
        assert_eq!(ids, vec![1]);
    }

    fn record(id: u64, enter: i64, exit: i64, v: f64) -> DetectionRecord {
        DetectionRecord {
            id,
            t_enter_unix_ns: enter,
            t_exit_unix_ns: exit,
            direction: Direction::Up,
            speed_kmh: v,
            class: VehicleClass::Car,
            window_id: 0,
            detected_at_unix_ns: exit,
            latency_ms: 0.0,
        }
    }

    #[test]
    fn record_field_names() {
        let v: serde_json::Value = serde_json::to_value(record(3, 1, 2, 80.0)).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            ["class", "detected_at_unix_ns", "direction", "id", "latency_ms", "speed_kmh", "t_enter_unix_ns", "t_exit_unix_ns", "window_id"]
        );
        assert_eq!(v["direction"], "up");
        assert_eq!(v["class"], "car");
    }

    #[test]
    fn collapse_takes_medians() {
        let rs = [record(0, 10, 40, 80.0), record(1, 5, 9, 70.0), record(0, 12, 41, 82.0), record(0, 11, 43, 90.0)];
        let c = collapse_by_id(&rs);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].t_enter_unix_ns, c[0].t_exit_unix_ns, c[0].speed_kmh), (11, 41, 82.0));
        assert_eq!(c[1].id, 1);
    }

    #[test]
    fn record_line_roundtrip() {
        let mut r = record(0, 10_000_000_000, 40_000_000_000, 83.0);
        assert_eq!(r.line(693.0), line(10.0, 40.0));
        r.direction = Direction::Down;
        assert_eq!(r.line(693.0), line(40.0, 10.0));
    }

    #[test]
    fn config_invariants() {
        let mut c = StreamConfig::new("/tmp", PipelineConfig::default());
        assert!(c.validate().is_ok());
        assert_eq!(c.eps_dedup_s, c.pipeline.cluster.eps_s);
        assert!(c.check_period(10.0).is_ok());
        assert!(c.check_period(7.0).is_err());
        c.batch_duration_s = 5.0;
        assert!(c.validate().is_err());
    }
}
