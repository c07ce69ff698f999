use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_seed, Rng};

use super::forest::{expected_improvement, Forest, ForestConfig};
use super::space::{HyperPoint, ParamSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub n_init: usize,
    pub n_iter: usize,
    /// Random candidates scored by expected improvement in each guided round.
    pub candidates: usize,
    pub forest: ForestConfig,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            n_init: 32,
            n_iter: 64,
            candidates: 1000,
            forest: ForestConfig::default(),
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.forest.validate()?;
        if self.n_init + self.n_iter == 0 {
            return Err(Error::Config("tuning budget is zero".into()));
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidate pool is empty".into()));
        }
        Ok(())
    }

    pub fn budget(&self) -> usize {
        self.n_init + self.n_iter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialPhase {
    Random,
    Guided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub phase: TrialPhase,
    pub point: HyperPoint,
    /// Lower is better; absent for failed trials.
    pub fitness: Option<f64>,
    pub status: TrialStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_improvement: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn ok_fitness(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Ok => self.fitness,
            TrialStatus::Failed => None,
        }
    }
}

/// One line of a history file: a header with the tuner settings, then one
/// line per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum HistoryLine {
    Header { config: TuneConfig, space: ParamSpace },
    Trial(TrialRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub best: TrialRecord,
    pub history: Vec<TrialRecord>,
}

impl TuneOutcome {
    pub fn n_failed(&self) -> usize {
        self.history.iter().filter(|t| t.status == TrialStatus::Failed).count()
    }
}

pub fn read_history(path: &Path) -> Result<(TuneConfig, ParamSpace, Vec<TrialRecord>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: HistoryLine =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        match parsed {
            HistoryLine::Header { config, space } if header.is_none() => header = Some((config, space)),
            HistoryLine::Header { .. } => return Err(Error::format(path, "repeated header")),
            HistoryLine::Trial(t) => trials.push(t),
        }
    }
    let (config, space) = header.ok_or_else(|| Error::format(path, "missing header line"))?;
    Ok((config, space, trials))
}

fn append_line(path: &Path, line: &HistoryLine) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = serde_json::to_string(line)?;
    s.push('\n');
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn best_record(history: &[TrialRecord]) -> Option<&TrialRecord> {
    history
        .iter()
        .filter_map(|t| t.ok_fitness().map(|f| (f, t)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.trial.cmp(&b.1.trial)))
        .map(|(_, t)| t)
}

/// Next point to evaluate: random during the initial phase (or while fewer
/// than two trials succeeded), otherwise the EI maximiser over a random pool.
fn suggest(space: &ParamSpace, config: &TuneConfig, history: &[TrialRecord]) -> Result<(TrialPhase, HyperPoint, Option<f64>)> {
    let t = history.len();
    let mut rng = Rng::new(hash_seed(&[config.seed, t as u64]));
    let ok: Vec<(&TrialRecord, f64)> = history.iter().filter_map(|r| r.ok_fitness().map(|f| (r, f))).collect();
    if t < config.n_init || ok.len() < 2 {
        return Ok((TrialPhase::Random, space.random_point(&mut rng), None));
    }
    let x: Vec<Vec<f64>> = ok.iter().map(|(r, _)| space.encode(&r.point)).collect();
    let y: Vec<f64> = ok.iter().map(|(_, f)| *f).collect();
    let best = y.iter().copied().fold(f64::INFINITY, f64::min);
    let forest = Forest::fit(&x, &y, &config.forest, hash_seed(&[config.seed, t as u64, 1]))?;
    let mut chosen: Option<(f64, HyperPoint)> = None;
    for _ in 0..config.candidates {
        let p = space.random_point(&mut rng);
        let (m, s) = forest.predict(&space.encode(&p));
        let ei = expected_improvement(m, s, best);
        if chosen.as_ref().is_none_or(|(e, _)| ei > *e) {
            chosen = Some((ei, p));
        }
    }
    let (ei, p) = chosen.expect("pool is non-empty");
    Ok((TrialPhase::Guided, p, Some(ei)))
}

/// Sequential model-based tuning. Every trial is appended to `history_path`
/// when given; with `resume`, trials already in that file are kept and the
/// run continues where it stopped. Objective errors and non-finite values
/// are recorded as failed trials.
pub fn tune<F>(
    mut objective: F,
    space: &ParamSpace,
    config: &TuneConfig,
    history_path: Option<&Path>,
    resume: bool,
) -> Result<TuneOutcome>
where
    F: FnMut(&HyperPoint) -> Result<f64>,
{
    config.validate()?;
    let mut history = Vec::new();
    match history_path {
        Some(path) if resume && path.exists() => {
            let (c, s, trials) = read_history(path)?;
            if c != *config || s != *space {
                return Err(Error::Config(format!(
                    "history {} was written with different tuner settings",
                    path.display()
                )));
            }
            if trials.iter().enumerate().any(|(i, t)| t.trial != i || !space.contains(&t.point)) {
                return Err(Error::format(path, "trial records out of order or outside the space"));
            }
            history = trials;
        }
        Some(path) => {
            if path.exists() {
                std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
            }
            append_line(
                path,
                &HistoryLine::Header {
                    config: *config,
                    space: space.clone(),
                },
            )?;
        }
        None => {}
    }
    while history.len() < config.budget() {
        let (phase, point, ei) = suggest(space, config, &history)?;
        let (fitness, status, error) = match objective(&point) {
            Ok(f) if f.is_finite() => (Some(f), TrialStatus::Ok, None),
            Ok(f) => (None, TrialStatus::Failed, Some(format!("non-finite fitness {f}"))),
            Err(e) => (None, TrialStatus::Failed, Some(e.to_string())),
        };
        if let Some(e) = &error {
            log::warn!("trial {} failed: {e}", history.len());
        }
        let rec = TrialRecord {
            trial: history.len(),
            phase,
            point,
            fitness,
            status,
            expected_improvement: ei,
            error,
        };
        if let Some(path) = history_path {
            append_line(path, &HistoryLine::Trial(rec.clone()))?;
        }
        history.push(rec);
    }
    let best = best_record(&history)
        .cloned()
        .ok_or_else(|| Error::Tuner(format!("all {} trials failed", history.len())))?;
    Ok(TuneOutcome { best, history })
}

/// Pure random search with the same budget, for comparison.
pub fn random_search<F>(mut objective: F, space: &ParamSpace, budget: usize, seed: u64) -> Result<TuneOutcome>
where
    F: FnMut(&HyperPoint) -> Result<f64>,
{
    let config = TuneConfig {
        n_init: budget,
        n_iter: 0,
        seed,
        ..TuneConfig::default()
    };
    tune(&mut objective, space, &config, None, false)
}
