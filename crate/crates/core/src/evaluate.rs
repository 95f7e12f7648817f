//! Penalized matching loss between ground truth and predictions.
//!
//! Every prediction is attached to its nearest truth (lowest truth index on
//! ties). A truth with no prediction costs `alpha`; otherwise it costs the
//! distance to its closest prediction plus `beta` for each extra one. The
//! loss is the mean cost over truths.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{segment_distance, ExtrapolatedLine, VehicleClass};
use crate::Direction;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground truth ({predictions} predictions are all false positives)")]
    EmptyTruth { predictions: usize },
    #[error("line {line}: {source}")]
    MalformedTruth { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// False-negative penalty, seconds.
    pub alpha: f64,
    /// False-positive penalty, seconds.
    pub beta: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { alpha: 5.0, beta: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    /// Prediction indices attached to each truth.
    pub neighborhoods: Vec<Vec<usize>>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub loss_seconds: f64,
}

/// One crossing from the simulator or a labelled survey.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub t_at_s0_ns: i64,
    #[serde(rename = "t_at_sL_ns")]
    pub t_at_sl_ns: i64,
    pub class: VehicleClass,
    pub speed_kmh: f64,
    pub direction: Direction,
}

impl GroundTruthEvent {
    pub fn line(&self, extent: f64) -> ExtrapolatedLine {
        ExtrapolatedLine::new(self.t_at_s0_ns as f64 * 1e-9, self.t_at_sl_ns as f64 * 1e-9, extent)
    }
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthEvent>, EvalError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::MalformedTruth { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn assign_neighborhoods<P, Q, D>(p: &[P], q: &[Q], dist: D) -> Result<Vec<Vec<usize>>, EvalError>
where
    D: Fn(&P, &Q) -> f64,
{
    if p.is_empty() {
        return if q.is_empty() { Ok(Vec::new()) } else { Err(EvalError::EmptyTruth { predictions: q.len() }) };
    }
    let mut sets = vec![Vec::new(); p.len()];
    for (j, qj) in q.iter().enumerate() {
        let mut best = (0, dist(&p[0], qj));
        for (i, pi) in p.iter().enumerate().skip(1) {
            let d = dist(pi, qj);
            if d < best.1 {
                best = (i, d);
            }
        }
        sets[best.0].push(j);
    }
    Ok(sets)
}

pub fn evaluate<P, Q, D>(p: &[P], q: &[Q], params: &LossParams, dist: D) -> Result<MatchReport, EvalError>
where
    D: Fn(&P, &Q) -> f64,
{
    if p.is_empty() {
        return Err(EvalError::EmptyTruth { predictions: q.len() });
    }
    let sets = assign_neighborhoods(p, q, &dist)?;
    let mut total = 0.0;
    for (i, s) in sets.iter().enumerate() {
        total += if s.is_empty() {
            params.alpha
        } else {
            let nearest = s.iter().map(|&j| dist(&p[i], &q[j])).fold(f64::INFINITY, f64::min);
            nearest + params.beta * (s.len() - 1) as f64
        };
    }
    let (tp, fp, fn_) = counts(&sets);
    Ok(MatchReport { neighborhoods: sets, tp, fp, fn_, loss_seconds: total / p.len() as f64 })
}

pub fn loss<P, Q, D>(p: &[P], q: &[Q], params: &LossParams, dist: D) -> Result<f64, EvalError>
where
    D: Fn(&P, &Q) -> f64,
{
    Ok(evaluate(p, q, params, dist)?.loss_seconds)
}

fn counts(sets: &[Vec<usize>]) -> (usize, usize, usize) {
    let tp = sets.iter().filter(|s| !s.is_empty()).count();
    let fp = sets.iter().map(|s| s.len().saturating_sub(1)).sum();
    (tp, fp, sets.len() - tp)
}

/// `(tp, fp, fn)` of a report.
pub fn detection_counts(report: &MatchReport) -> (usize, usize, usize) {
    counts(&report.neighborhoods)
}

/// Totals of a direction-partitioned line evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineScore {
    pub loss_seconds: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl LineScore {
    pub fn recall(&self) -> f64 {
        let n = self.tp + self.fn_;
        if n == 0 { 1.0 } else { self.tp as f64 / n as f64 }
    }

    pub fn precision(&self) -> f64 {
        let n = self.tp + self.fp;
        if n == 0 { 1.0 } else { self.tp as f64 / n as f64 }
    }
}

/// Line loss evaluated separately per travel direction, so an up-bound
/// prediction can never stand in for a down-bound truth. The per-direction
/// losses are combined weighted by truth count; predictions in a direction
/// without truth each add `beta` to the total before averaging.
pub fn evaluate_lines(
    truth: &[(ExtrapolatedLine, Direction)],
    pred: &[(ExtrapolatedLine, Direction)],
    params: &LossParams,
) -> Result<LineScore, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth { predictions: pred.len() });
    }
    let dist = |a: &ExtrapolatedLine, b: &ExtrapolatedLine| segment_distance(a, b).unwrap_or(f64::INFINITY);
    let mut score = LineScore { loss_seconds: 0.0, tp: 0, fp: 0, fn_: 0 };
    let mut total = 0.0;
    for dir in Direction::BOTH {
        let p: Vec<ExtrapolatedLine> = truth.iter().filter(|t| t.1 == dir).map(|t| t.0).collect();
        let q: Vec<ExtrapolatedLine> = pred.iter().filter(|t| t.1 == dir).map(|t| t.0).collect();
        if p.is_empty() {
            score.fp += q.len();
            total += params.beta * q.len() as f64;
            continue;
        }
        let r = evaluate(&p, &q, params, dist)?;
        total += r.loss_seconds * p.len() as f64;
        score.tp += r.tp;
        score.fp += r.fp;
        score.fn_ += r.fn_;
    }
    score.loss_seconds = total / truth.len() as f64;
    Ok(score)
}
