//! Partial pre-training: the language model is trained for exactly `n`
//! epochs (n = 0..=n_max) before transfer, to relate how far it was trained
//! to how well the caption generator does.
//!
//! While no overfitting has been seen for a repeat, every epoch must improve
//! validation perplexity; a violating run is restarted with a fresh seed up
//! to `attempts` times. When all attempts fail at some `n`, the last attempt
//! is kept (terminated before epoch `n`), `n` is recorded as the overfitting
//! point, and larger `n` train without the requirement.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::capgen::TransferMode;
use crate::error::{Error, Result};
use crate::hyperopt::TrialStatus;
use crate::rng::{hash_seed, hash_str};
use crate::text::corpus::subsample_size;

use super::grid::{
    caption_trial, grid_language_model, lm_seed, sample_seed, trial_seed, write_results_csv, CaptionFields,
    ExperimentConfig, ExperimentData, Ledger, LmOutcome, RowType,
};
use super::pipeline::LmSchedule;

pub const PARTIAL_LEDGER_FILE: &str = "partial_ledger.jsonl";
pub const PARTIAL_RESULTS_FILE: &str = "partial.csv";

fn default_n_max() -> usize {
    15
}
fn default_attempts() -> usize {
    5
}
fn default_modes() -> Vec<TransferMode> {
    vec![TransferMode::Frozen, TransferMode::FineTuned]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialConfig {
    /// Grid row whose corpus and hyperparameters are reused.
    #[serde(rename = "type")]
    pub row_type: RowType,
    #[serde(default)]
    pub size_exponent: f64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_attempts")]
    pub attempts: usize,
    #[serde(default = "default_modes")]
    pub modes: Vec<TransferMode>,
    /// Defaults to the grid's repeat count.
    #[serde(default)]
    pub repeats: Option<usize>,
}

impl PartialConfig {
    pub fn validate(&self, grid: &ExperimentConfig) -> Result<()> {
        let t = self.row_type;
        let row = grid
            .row(t)
            .ok_or_else(|| Error::Config(format!("partial training refers to missing row {t}")))?;
        if t == RowType::NoTransfer {
            return Err(Error::Config("partial training needs a language-model row".into()));
        }
        if !t.allowed_exponents().contains(&self.size_exponent) {
            return Err(Error::Config(format!("size exponent {} not allowed for {t}", self.size_exponent)));
        }
        if row.lm_hyperparams.is_none() {
            return Err(Error::Config(format!("{t} row has no lm_hyperparams")));
        }
        if self.attempts == 0 || self.repeats == Some(0) {
            return Err(Error::Config("attempts and repeats must be positive".into()));
        }
        if self.modes.is_empty() || self.modes.contains(&TransferMode::None) {
            return Err(Error::Config("partial modes must be frozen and/or fine-tuned".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRow {
    pub row_type: RowType,
    pub mode: TransferMode,
    pub frozen: bool,
    /// Epochs requested from the language model.
    pub n: usize,
    pub repeat: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub corpus_size: Option<usize>,
    /// Language-model training runs made for this `n`.
    pub attempts: usize,
    pub improvement_required: bool,
    /// Epochs the transferred language model was actually trained for.
    pub lm_epochs: Option<usize>,
    /// Every attempt at this `n` peaked early.
    pub overfit: bool,
    /// First `n` at which this repeat overfitted, if it has.
    pub overfit_at: Option<usize>,
    pub lm_val_perplexity: Option<f64>,
    pub lm_fair_perplexity: Option<f64>,
    pub lm_vocab_size: Option<usize>,
    pub cg_vocab_size: Option<usize>,
    pub cg_epochs: Option<usize>,
    pub cg_test_perplexity: Option<f64>,
    pub cider: Option<f64>,
    pub wmd: Option<f64>,
    pub error: Option<String>,
    pub wall_seconds: f64,
}

impl PartialRow {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

/// Seed of attempt `attempt` at `n` epochs.
pub fn attempt_seed(base_lm_seed: u64, n: usize, attempt: usize) -> u64 {
    hash_seed(&[base_lm_seed, hash_str("partial"), n as u64, attempt as u64])
}

struct LmRun {
    outcome: LmOutcome,
    attempts: usize,
    overfit: bool,
}

/// Trains the language model for `n` epochs under the attempt rule.
#[allow(clippy::too_many_arguments)]
fn partial_language_model(
    data: &ExperimentData,
    corpora: &(crate::text::Corpus, crate::text::Corpus),
    hp: &super::LmHyperparams,
    pc: &PartialConfig,
    size_base: usize,
    base_seed: u64,
    n: usize,
    require: bool,
) -> Result<LmRun> {
    let tries = if require { pc.attempts } else { 1 };
    let mut last = None;
    for attempt in 0..tries {
        let schedule = LmSchedule::Exactly {
            epochs: n,
            require_improvement: require,
        };
        let outcome = grid_language_model(
            data,
            corpora,
            hp,
            pc.size_exponent,
            size_base,
            schedule,
            sample_seed(base_seed),
            attempt_seed(base_seed, n, attempt),
        )?;
        let violated = outcome.history.improvement_violated;
        last = Some(outcome);
        if !violated {
            return Ok(LmRun {
                outcome: last.take().expect("set above"),
                attempts: attempt + 1,
                overfit: false,
            });
        }
        log::info!("n={n} attempt {} peaked early", attempt + 1);
    }
    Ok(LmRun {
        outcome: last.expect("at least one attempt"),
        attempts: tries,
        overfit: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialOutcome {
    pub rows: Vec<PartialRow>,
    pub executed: usize,
}

impl PartialOutcome {
    pub fn n_failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

pub fn run_partial_training(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<PartialOutcome> {
    cfg.validate()?;
    let pc = cfg
        .partial
        .as_ref()
        .ok_or_else(|| Error::Config("config has no partial section".into()))?;
    let t = pc.row_type;
    let row_cfg = cfg.row(t).expect("checked by validate");
    let lm_hp = row_cfg.lm_hyperparams.as_ref().expect("checked by validate").get()?;
    let cg_hp = row_cfg.capgen_hyperparams.get()?;
    let repeats = pc.repeats.unwrap_or(cfg.repeats);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = ExperimentData::load(cfg)?;
    let corpora = data.lm_corpora(row_cfg)?;
    let need = subsample_size(pc.size_exponent, cfg.size_base);
    if need > corpora.0.len() {
        return Err(Error::Size {
            requested: need,
            available: corpora.0.len(),
        });
    }
    let emb = data.embeddings(cfg, out)?;
    let ledger = Ledger::open(out.join(PARTIAL_LEDGER_FILE), resume)?;
    let mut done: HashMap<(usize, TransferMode, usize), PartialRow> = HashMap::new();
    let mut overfit_at: BTreeMap<usize, usize> = BTreeMap::new();
    for r in ledger.read::<PartialRow>()? {
        if r.overfit {
            let e = overfit_at.entry(r.repeat).or_insert(r.n);
            *e = (*e).min(r.n);
        }
        done.insert((r.n, r.mode, r.repeat), r);
    }
    let mut executed = 0;

    for repeat in 0..repeats {
        let base_seed = lm_seed(cfg.seed, t, pc.size_exponent, repeat);
        for n in 0..=pc.n_max {
            let pending: Vec<TransferMode> =
                pc.modes.iter().copied().filter(|&m| !done.contains_key(&(n, m, repeat))).collect();
            if pending.is_empty() {
                continue;
            }
            let start = Instant::now();
            let require = overfit_at.get(&repeat).is_none_or(|&k| k > n);
            log::info!("partial {t} repeat {repeat} n={n}");
            let run = partial_language_model(&data, &corpora, &lm_hp, pc, cfg.size_base, base_seed, n, require);
            if let Ok(r) = &run {
                if r.overfit {
                    overfit_at.entry(repeat).or_insert(n);
                }
            }
            let lm_seconds = start.elapsed().as_secs_f64();
            for mode in pending {
                let start = Instant::now();
                let seed = trial_seed(cfg.seed, &format!("partial/{t}/{}/n={n}", mode.as_str()), repeat);
                let mut row = PartialRow {
                    row_type: t,
                    mode,
                    frozen: mode == TransferMode::Frozen,
                    n,
                    repeat,
                    seed,
                    status: TrialStatus::Ok,
                    corpus_size: None,
                    attempts: 0,
                    improvement_required: require,
                    lm_epochs: None,
                    overfit: false,
                    overfit_at: overfit_at.get(&repeat).copied(),
                    lm_val_perplexity: None,
                    lm_fair_perplexity: None,
                    lm_vocab_size: None,
                    cg_vocab_size: None,
                    cg_epochs: None,
                    cg_test_perplexity: None,
                    cider: None,
                    wmd: None,
                    error: None,
                    wall_seconds: 0.0,
                };
                let mut fields = CaptionFields::default();
                let res = match &run {
                    Ok(r) => {
                        let o = &r.outcome;
                        row.corpus_size = Some(o.corpus_size);
                        row.attempts = r.attempts;
                        row.overfit = r.overfit;
                        row.lm_epochs = Some(o.history.selected_epoch);
                        row.lm_val_perplexity = o.history.selected_val_perplexity();
                        row.lm_fair_perplexity = Some(o.fair_perplexity);
                        row.lm_vocab_size = Some(o.lm.vocab().len());
                        caption_trial(&data, &cg_hp, Some(&o.lm), mode, &emb, seed, &mut fields, None).map(|_| ())
                    }
                    Err(e) => Err(Error::Data(format!("language model: {e}"))),
                };
                row.cg_vocab_size = fields.cg_vocab_size;
                row.cg_epochs = fields.cg_epochs;
                row.cg_test_perplexity = fields.cg_test_perplexity;
                row.cider = fields.cider;
                row.wmd = fields.wmd;
                if let Err(e) = res {
                    log::warn!("partial n={n} {} repeat {repeat} failed: {e}", mode.as_str());
                    row.status = TrialStatus::Failed;
                    row.error = Some(e.to_string());
                }
                row.wall_seconds = start.elapsed().as_secs_f64() + lm_seconds;
                ledger.append(&row)?;
                done.insert((n, mode, repeat), row);
                executed += 1;
            }
        }
    }

    let mut rows = Vec::new();
    for &mode in &pc.modes {
        for n in 0..=pc.n_max {
            for repeat in 0..repeats {
                rows.push(
                    done.remove(&(n, mode, repeat))
                        .ok_or_else(|| Error::Data(format!("no partial record for n={n} repeat {repeat}")))?,
                );
            }
        }
    }
    write_results_csv(&out.join(PARTIAL_RESULTS_FILE), &rows)?;
    Ok(PartialOutcome { rows, executed })
}
