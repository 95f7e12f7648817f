//! `dastrack`: simulate, process, watch, tune and evaluate.

mod summary;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dastrack::config::{ConfigError, PipelineConfig};
use dastrack::detect::{apply_point, config_point, standard_space, TuningSet};
use dastrack::evaluate::{evaluate_lines, read_truth, EvalError, LossParams};
use dastrack::simulate::{preset, write_batches, Scenario, SimError, PRESETS};
use dastrack::stream::{
    collapse_by_id, list_batches, watch, Clock, DetectionRecord, HttpSink, NdjsonSink, StreamConfig, StreamEngine, StreamError,
};
use dastrack::tune::{optimize_from, read_history, write_history, TpeConfig, TuneError};
use dastrack::waterfall::{concat_time, read_dasw, Waterfall, WaterfallError};
use serde_json::json;

use summary::{render_table, summarize};

#[derive(Debug)]
enum CliError {
    Io(String),
    Config(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Config(m) | CliError::Internal(m) => m,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<WaterfallError> for CliError {
    fn from(e: WaterfallError) -> Self {
        match e {
            WaterfallError::IoFailure(_) => CliError::Io(e.to_string()),
            WaterfallError::BadMagic(_)
            | WaterfallError::VersionUnsupported(_)
            | WaterfallError::TruncatedPayload { .. }
            | WaterfallError::NonFiniteSample { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(_) => CliError::Io(e.to_string()),
            SimError::Waterfall(w) => w.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::Io { .. } => CliError::Io(e.to_string()),
            StreamError::Waterfall(w) => w.into(),
            StreamError::Config(_) => CliError::Config(e.to_string()),
            StreamError::Watch(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<TuneError> for CliError {
    fn from(e: TuneError) -> Self {
        match e {
            TuneError::Io(_) => CliError::Io(e.to_string()),
            TuneError::MalformedHistory { .. } | TuneError::InvalidSpace(_) | TuneError::InvalidConfig(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "dastrack", version, about = "Vehicle trajectories from DAS strain-rate waterfalls")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Pipeline settings as `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (simulate, process, watch, tune) or report file (eval).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Writes per-stage images of every window here.
    #[arg(long, global = true, value_name = "DIR")]
    dump_stages: Option<PathBuf>,
    /// Only warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Single setting override, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Starting point before --config and --set.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Vehicles)]
    profile: Profile,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Vehicles,
    SWave,
}

#[derive(Args)]
struct WindowArgs {
    /// Seconds between window emissions.
    #[arg(long, default_value_t = 10.0)]
    gap: f64,
    /// Window length in seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Radius for carrying ids across windows; defaults to cluster.eps_s.
    #[arg(long)]
    eps_dedup: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Data,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a preset or scenario file into DASW batches plus truth.ndjson.
    Simulate {
        #[arg(long, conflicts_with = "scenario")]
        preset: Option<String>,
        /// Scenario as JSON.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        batch_s: f64,
    },
    /// Run the pipeline over DASW files or directories of them.
    Process {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        window: WindowArgs,
    },
    /// Process batches as they are renamed into a directory, until SIGINT/SIGTERM.
    Watch {
        dir: PathBuf,
        #[command(flatten)]
        window: WindowArgs,
        /// POST each window's records here as a JSON array.
        #[arg(long)]
        http: Option<String>,
        /// Records the HTTP endpoint refused; defaults to <out>/dead_letter.ndjson.
        #[arg(long)]
        dead_letter: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ClockArg::Wall)]
        clock: ClockArg,
    },
    /// Search cutoff, threshold and cluster radius against labelled data.
    Tune {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Defaults to truth.ndjson next to the first input.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        budget: usize,
        /// Continue from <out>/history.ndjson.
        #[arg(long)]
        resume: bool,
    },
    /// Score records against truth.
    Eval {
        records: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Channel extent both line sets are measured over.
        #[arg(long, default_value_t = 693.0)]
        extent: f64,
    },
}

fn load_config(c: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match c.profile {
        Profile::Vehicles => PipelineConfig::default(),
        Profile::SWave => PipelineConfig::s_wave(),
    };
    if let Some(p) = &c.config {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        cfg.apply_kv(&text)?;
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf, CliError> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("dastrack_out"));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_batches(p)?);
        } else if p.exists() {
            files.push(p.clone());
        } else {
            return Err(CliError::Io(format!("{}: no such file or directory", p.display())));
        }
    }
    if files.is_empty() {
        return Err(CliError::Io("no .dasw input files".into()));
    }
    Ok(files)
}

fn stream_config(dir: PathBuf, cfg: PipelineConfig, w: &WindowArgs) -> StreamConfig {
    let mut s = StreamConfig::new(dir, cfg);
    s.batch_gap_s = w.gap;
    s.batch_duration_s = w.duration;
    if let Some(e) = w.eps_dedup {
        s.eps_dedup_s = e;
    }
    s
}

fn fresh_file(path: &Path) -> Result<(), CliError> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(path)(e)),
        _ => Ok(()),
    }
}

fn cmd_simulate(c: &Common, preset_name: Option<&str>, scenario: Option<&Path>, batch_s: f64) -> Result<(), CliError> {
    let out = c.out.clone().ok_or_else(|| CliError::Config("simulate needs --out".into()))?;
    let sc: Scenario = match (preset_name, scenario) {
        (Some(name), _) => preset(name)?,
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        (None, None) => return Err(CliError::Config(format!("give --preset ({}) or --scenario", PRESETS.join(", ")))),
    };
    let seed = c.seed.unwrap_or(0);
    let paths = write_batches(&sc, seed, &out, batch_s)?;
    log::info!("wrote {} batches and truth.ndjson to {}", paths.len(), out.display());
    Ok(())
}

fn cmd_process(c: &Common, inputs: &[PathBuf], window: &WindowArgs) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let files = expand_inputs(inputs)?;
    let out = out_dir(c)?;
    let records_path = out.join("records.ndjson");
    fresh_file(&records_path)?;
    let scfg = stream_config(out.clone(), cfg, window);
    let mut engine = StreamEngine::new(scfg, Clock::DataTime)?;
    engine.add_sink(Box::new(NdjsonSink::open(&records_path)?));
    if let Some(d) = &c.dump_stages {
        engine.dump_stages(d);
    }
    let mut records = Vec::new();
    for f in &files {
        let w = read_dasw(f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
        for part in slices(&w, window.gap)? {
            records.extend(engine.on_batch(part)?);
        }
    }
    records.extend(engine.finish()?);
    report(c, &out, &records, &engine, &cfg)
}

/// Splits a long file into pieces of `gap_s` so windows can advance inside it.
fn slices(w: &Waterfall, gap_s: f64) -> Result<Vec<Waterfall>, CliError> {
    let per = ((gap_s * w.sample_rate_hz()).round() as usize).max(1);
    if w.rows() <= per {
        return Ok(vec![w.clone()]);
    }
    (0..w.rows()).step_by(per).map(|r| w.slice_rows(r, per.min(w.rows() - r)).map_err(CliError::from)).collect()
}

fn report(c: &Common, out: &Path, records: &[DetectionRecord], engine: &StreamEngine, cfg: &PipelineConfig) -> Result<(), CliError> {
    let s = summarize(records);
    let st = engine.stats();
    let doc = json!({
        "summary": s,
        "stream": {
            "files": st.files,
            "windows": st.windows,
            "skipped_windows": st.skipped_windows,
            "ignored_files": st.ignored_files,
            "mean_window_s": st.mean_processing().as_secs_f64(),
            "max_window_s": st.max_processing.as_secs_f64(),
        },
        "config": cfg.to_kv_string(),
    });
    write_json(&out.join("summary.json"), &doc)?;
    if !c.quiet {
        print!("{}", render_table(&s));
        println!("{} windows, mean {:.2} s per window", st.windows, st.mean_processing().as_secs_f64());
    }
    Ok(())
}

fn cmd_watch(c: &Common, dir: &Path, window: &WindowArgs, http: Option<&str>, dead_letter: Option<&Path>, clock: ClockArg) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    if !dir.is_dir() {
        return Err(CliError::Config(format!("watch directory {} does not exist", dir.display())));
    }
    let out = out_dir(c)?;
    let scfg = stream_config(dir.to_path_buf(), cfg, window);
    let clock = match clock {
        ClockArg::Wall => Clock::Wall,
        ClockArg::Data => Clock::DataTime,
    };
    let mut engine = StreamEngine::new(scfg, clock)?;
    engine.add_sink(Box::new(NdjsonSink::open(out.join("records.ndjson"))?));
    if let Some(url) = http {
        let dl = dead_letter.map(Path::to_path_buf).unwrap_or_else(|| out.join("dead_letter.ndjson"));
        engine.add_sink(Box::new(HttpSink::new(url, dl)));
    }
    if let Some(d) = &c.dump_stages {
        engine.dump_stages(d);
    }
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).map_err(|e| CliError::Internal(e.to_string()))?;
    log::info!("watching {}", dir.display());
    let n = watch(&mut engine, &stop)?;
    let st = engine.stats();
    log::info!("stopped after {} windows, {n} records, {} files ignored", st.windows, st.ignored_files);
    Ok(())
}

fn cmd_tune(c: &Common, inputs: &[PathBuf], truth: Option<&Path>, budget: usize, resume: bool) -> Result<(), CliError> {
    let base = load_config(c)?;
    let files = expand_inputs(inputs)?;
    let truth_path = match truth {
        Some(p) => p.to_path_buf(),
        None => {
            let first = &inputs[0];
            let dir = if first.is_dir() { first.clone() } else { first.parent().unwrap_or(Path::new(".")).to_path_buf() };
            dir.join("truth.ndjson")
        }
    };
    let truth = read_truth(&truth_path)?;
    let parts = files.iter().map(read_dasw).collect::<Result<Vec<_>, _>>()?;
    let raw = concat_time(&parts)?;
    drop(parts);
    let space = standard_space();
    let set = TuningSet::new(&raw, &truth, &base.mask, space.dims[0].upper).map_err(|e| CliError::Config(e.to_string()))?;
    drop(raw);
    let out = out_dir(c)?;
    let history_path = out.join("history.ndjson");
    let mut history = if resume && history_path.exists() { read_history(&history_path, &space)? } else { Vec::new() };
    let tpe = TpeConfig { seed: base.seed, ..TpeConfig::default() };
    let default_loss = set.loss(&base).map_err(|e| CliError::Internal(e.to_string()))?;
    log::info!("default configuration loss {default_loss:.4} at {:?}", config_point(&base));
    // One trial per call so the history on disk is never behind by more
    // than the trial in flight.
    while history.len() < budget {
        let next = history.len() + 1;
        let (_, h) = optimize_from(std::mem::take(&mut history), |w: &[f64], _| set.loss(&apply_point(&base, w)), &space, next, &tpe)?;
        history = h;
        write_history(&history_path, &space, &history)?;
        let t = &history[history.len() - 1];
        log::info!("trial {}: loss {:.4} at {:?}", t.index, t.loss, t.params);
    }
    let best = history
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)))
        .cloned()
        .ok_or_else(|| CliError::Config("budget must be at least 1".into()))?;
    let tuned = apply_point(&base, &best.params);
    std::fs::write(out.join("best.conf"), tuned.to_kv_string()).map_err(io_err(&out.join("best.conf")))?;
    let doc = json!({
        "default_loss": default_loss,
        "best_loss": best.loss,
        "best_trial": best.index,
        "best_params": space.dims.iter().zip(&best.params).map(|(d, v)| (d.name.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
        "trials": history.len(),
    });
    write_json(&out.join("tune.json"), &doc)?;
    if !c.quiet {
        println!("default loss {default_loss:.4}, best loss {:.4} (trial {})", best.loss, best.index);
    }
    Ok(())
}

fn cmd_eval(c: &Common, records: &Path, truth: &Path, alpha: Option<f64>, beta: Option<f64>, extent: f64) -> Result<(), CliError> {
    let cfg = load_config(c)?;
    let params = LossParams { alpha: alpha.unwrap_or(cfg.loss.alpha), beta: beta.unwrap_or(cfg.loss.beta) };
    let f = std::fs::File::open(records).map_err(io_err(records))?;
    let mut recs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(records))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| CliError::Config(format!("{} line {}: {e}", records.display(), i + 1)))?;
        recs.push(r);
    }
    let truth: Vec<_> = read_truth(truth)?.iter().map(|t| (t.line(extent), t.direction)).collect();
    let pred: Vec<_> = collapse_by_id(&recs).iter().map(|r| (r.line(extent), r.direction)).collect();
    let score = evaluate_lines(&truth, &pred, &params)?;
    let doc = json!({ "loss": score.loss_seconds, "tp": score.tp, "fp": score.fp, "fn": score.fn_ });
    if let Some(p) = &c.out {
        write_json(p, &doc)?;
    }
    println!("{doc}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    match &cli.cmd {
        Cmd::Simulate { preset, scenario, batch_s } => cmd_simulate(c, preset.as_deref(), scenario.as_deref(), *batch_s),
        Cmd::Process { inputs, window } => cmd_process(c, inputs, window),
        Cmd::Watch { dir, window, http, dead_letter, clock } => {
            cmd_watch(c, dir, window, http.as_deref(), dead_letter.as_deref(), *clock)
        }
        Cmd::Tune { inputs, truth, budget, resume } => cmd_tune(c, inputs, truth.as_deref(), *budget, *resume),
        Cmd::Eval { records, truth, alpha, beta, extent } => cmd_eval(c, records, truth, *alpha, *beta, *extent),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp_millis().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
