//! Tree-structured Parzen Estimator over a box of continuous parameters.
//!
//! Past trials are split at a loss quantile into a good and a poor set.
//! Each set is modelled by a product over dimensions of truncated Gaussian
//! mixtures, candidates are drawn from the good model, and the candidate
//! with the highest good/poor density ratio is evaluated next.
//!
//! Each trial draws from its own ChaCha8 stream keyed by `(seed, index)`,
//! so a run resumed from a saved history proposes exactly what the
//! uninterrupted run would have.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("empty trial history")]
    EmptyHistory,
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid TPE configuration: {0}")]
    InvalidConfig(String),
    #[error("trial {index}: {message}")]
    Objective { index: usize, message: String },
    #[error("trial {index}: non-finite loss")]
    NonFiniteLoss { index: usize },
    #[error("history line {line}: {message}")]
    MalformedHistory { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
}

impl Dim {
    pub fn new(name: &str, lower: f64, upper: f64, scale: Scale) -> Self {
        Self { name: name.to_string(), lower, upper, scale }
    }

    fn to_z(&self, x: f64) -> f64 {
        match self.scale {
            Scale::Linear => x,
            Scale::Log => x.ln(),
        }
    }

    fn from_z(&self, z: f64) -> f64 {
        let x = match self.scale {
            Scale::Linear => z,
            Scale::Log => z.exp(),
        };
        x.clamp(self.lower, self.upper)
    }

    fn z_bounds(&self) -> (f64, f64) {
        (self.to_z(self.lower), self.to_z(self.upper))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dim>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self, TuneError> {
        if dims.is_empty() {
            return Err(TuneError::InvalidSpace("no dimensions".into()));
        }
        for d in &dims {
            if !(d.lower < d.upper) || !d.lower.is_finite() || !d.upper.is_finite() {
                return Err(TuneError::InvalidSpace(format!("{}: lower must be below upper", d.name)));
            }
            if d.scale == Scale::Log && d.lower <= 0.0 {
                return Err(TuneError::InvalidSpace(format!("{}: log scale needs a positive lower bound", d.name)));
            }
        }
        Ok(Self { dims })
    }

    pub fn contains(&self, w: &[f64]) -> bool {
        w.len() == self.dims.len() && self.dims.iter().zip(w).all(|(d, &x)| x >= d.lower && x <= d.upper)
    }

    fn uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| {
                let (a, b) = d.z_bounds();
                d.from_z(rng.gen_range(a..=b))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub params: Vec<f64>,
    pub loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self { gamma: 0.15, n_startup: 10, n_candidates: 24, seed: 0 }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), TuneError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) || self.n_startup < 2 || self.n_candidates < 1 {
            return Err(TuneError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Good set: the `ceil(gamma * N)` lowest losses (at least one, and at most
/// `N - 1` so the poor set is never empty when `N >= 2`). Equal losses keep
/// trial order.
pub fn split_trials(history: &[Trial], gamma: f64) -> Result<(Vec<&Trial>, Vec<&Trial>), TuneError> {
    if history.is_empty() {
        return Err(TuneError::EmptyHistory);
    }
    let n = history.len();
    let mut sorted: Vec<&Trial> = history.iter().collect();
    sorted.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
    let mut n_good = ((gamma * n as f64).ceil() as usize).max(1);
    if n >= 2 {
        n_good = n_good.min(n - 1);
    }
    let poor = sorted.split_off(n_good);
    Ok((sorted, poor))
}

const G_FLOOR: f64 = 1e-12;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Per-dimension truncated Gaussian mixture in transformed coordinates.
#[derive(Debug, Clone)]
struct Mixture1 {
    centres: Vec<f64>,
    h: f64,
    lo: f64,
    hi: f64,
    /// Mass of each component inside `[lo, hi]`.
    mass: Vec<f64>,
}

impl Mixture1 {
    fn new(centres: Vec<f64>, lo: f64, hi: f64, n_dims: usize) -> Self {
        let n = centres.len() as f64;
        let mean = centres.iter().sum::<f64>() / n;
        let var = if centres.len() > 1 {
            centres.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let scott = n.powf(-1.0 / (n_dims as f64 + 4.0)) * var.sqrt();
        // Small mixtures keep a wide floor so the search does not collapse
        // onto its first good points.
        let h = scott.max((hi - lo) / (1.0 + n).min(100.0));
        let mass = centres
            .iter()
            .map(|&c| (std_normal_cdf((hi - c) / h) - std_normal_cdf((lo - c) / h)).max(1e-300))
            .collect();
        Self { centres, h, lo, hi, mass }
    }

    fn pdf(&self, z: f64) -> f64 {
        if z < self.lo || z > self.hi {
            return 0.0;
        }
        let norm = 1.0 / (self.h * (2.0 * std::f64::consts::PI).sqrt());
        let s: f64 = self
            .centres
            .iter()
            .zip(&self.mass)
            .map(|(&c, &m)| {
                let u = (z - c) / self.h;
                norm * (-0.5 * u * u).exp() / m
            })
            .sum();
        s / self.centres.len() as f64
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let c = self.centres[rng.gen_range(0..self.centres.len())];
        let normal = Normal::new(c, self.h).expect("bandwidth is positive");
        for _ in 0..1000 {
            let z = normal.sample(rng);
            if z >= self.lo && z <= self.hi {
                return z;
            }
        }
        c.clamp(self.lo, self.hi)
    }
}

/// Parzen density over the search box, in the original coordinates.
#[derive(Debug, Clone)]
pub struct Kde {
    dims: Vec<(Dim, Mixture1)>,
}

impl Kde {
    pub fn new(points: &[&[f64]], space: &SearchSpace) -> Self {
        let d = space.dims.len();
        let dims = space
            .dims
            .iter()
            .enumerate()
            .map(|(k, dim)| {
                let (lo, hi) = dim.z_bounds();
                let centres = points.iter().map(|p| dim.to_z(p[k])).collect();
                (dim.clone(), Mixture1::new(centres, lo, hi, d))
            })
            .collect();
        Self { dims }
    }

    pub fn pdf(&self, w: &[f64]) -> f64 {
        self.dims
            .iter()
            .zip(w)
            .map(|((dim, m), &x)| {
                let jac = match dim.scale {
                    Scale::Linear => 1.0,
                    Scale::Log => 1.0 / x,
                };
                m.pdf(dim.to_z(x)) * jac
            })
            .product()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.dims.iter().map(|(dim, m)| dim.from_z(m.sample(rng))).collect()
    }
}

pub fn kde_pdf(points: &[&[f64]], space: &SearchSpace, query: &[f64]) -> f64 {
    Kde::new(points, space).pdf(query)
}

/// Next point to evaluate. Uniform in the (log-transformed) box until the
/// history holds `n_startup` trials.
pub fn suggest<R: Rng>(history: &[Trial], space: &SearchSpace, config: &TpeConfig, rng: &mut R) -> Vec<f64> {
    if history.len() < config.n_startup {
        return space.uniform(rng);
    }
    let (good, poor) = split_trials(history, config.gamma).expect("history is non-empty");
    let pts = |s: &[&Trial]| s.iter().map(|t| t.params.clone()).collect::<Vec<_>>();
    let (gp, pp) = (pts(&good), pts(&poor));
    let l = Kde::new(&gp.iter().map(Vec::as_slice).collect::<Vec<_>>(), space);
    let g = Kde::new(&pp.iter().map(Vec::as_slice).collect::<Vec<_>>(), space);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..config.n_candidates {
        let w = l.sample(rng);
        let score = l.pdf(&w) / g.pdf(&w).max(G_FLOOR);
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, w));
        }
    }
    best.expect("n_candidates >= 1").1
}

/// Generator for trial `index` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Seed handed to the objective for trial `index`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    trial_rng(seed, index).gen()
}

/// Extends `history` to `budget` trials in total and returns the best one.
/// The objective receives the point and a per-trial seed.
pub fn optimize_from<F, E>(
    mut history: Vec<Trial>,
    mut objective: F,
    space: &SearchSpace,
    budget: usize,
    config: &TpeConfig,
) -> Result<(Trial, Vec<Trial>), TuneError>
where
    F: FnMut(&[f64], u64) -> Result<f64, E>,
    E: std::fmt::Display,
{
    config.validate()?;
    if budget == 0 {
        return Err(TuneError::InvalidConfig("budget must be at least 1".into()));
    }
    while history.len() < budget {
        let index = history.len();
        let mut rng = trial_rng(config.seed, index);
        let seed: u64 = rng.gen();
        let w = suggest(&history, space, config, &mut rng);
        let loss = objective(&w, seed).map_err(|e| TuneError::Objective { index, message: e.to_string() })?;
        if !loss.is_finite() {
            return Err(TuneError::NonFiniteLoss { index });
        }
        log::debug!("trial {index}: loss {loss:.4} at {w:?}");
        history.push(Trial { index, params: w, loss, seed });
    }
    let best = history
        .iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)))
        .cloned()
        .ok_or(TuneError::EmptyHistory)?;
    Ok((best, history))
}

pub fn optimize<F, E>(objective: F, space: &SearchSpace, budget: usize, config: &TpeConfig) -> Result<(Trial, Vec<Trial>), TuneError>
where
    F: FnMut(&[f64], u64) -> Result<f64, E>,
    E: std::fmt::Display,
{
    optimize_from(Vec::new(), objective, space, budget, config)
}

#[derive(Serialize, Deserialize)]
struct TrialLine {
    index: usize,
    params: serde_json::Map<String, serde_json::Value>,
    loss: f64,
    seed: u64,
}

pub fn trial_to_json(t: &Trial, space: &SearchSpace) -> String {
    let params = space.dims.iter().zip(&t.params).map(|(d, &v)| (d.name.clone(), serde_json::json!(v))).collect();
    serde_json::to_string(&TrialLine { index: t.index, params, loss: t.loss, seed: t.seed }).expect("plain data serializes")
}

pub fn write_history(path: impl AsRef<Path>, space: &SearchSpace, trials: &[Trial]) -> Result<(), TuneError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trials {
        writeln!(f, "{}", trial_to_json(t, space))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>, space: &SearchSpace) -> Result<Vec<Trial>, TuneError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| TuneError::MalformedHistory { line: i + 1, message };
        let tl: TrialLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let params = space
            .dims
            .iter()
            .map(|d| tl.params.get(&d.name).and_then(|v| v.as_f64()).ok_or_else(|| bad(format!("missing {}", d.name))))
            .collect::<Result<Vec<f64>, _>>()?;
        if tl.index != out.len() {
            return Err(bad(format!("expected index {}, found {}", out.len(), tl.index)));
        }
        out.push(Trial { index: tl.index, params, loss: tl.loss, seed: tl.seed });
    }
    Ok(out)
}
