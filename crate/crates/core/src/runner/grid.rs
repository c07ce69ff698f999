//! The transfer grid: every (row, size exponent, mode) cell trained and
//! scored `repeats` times, with an append-only ledger for resumption.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::capgen::{write_generations, CaptionGenerator, TransferMode};
use crate::error::{Error, Result};
use crate::hyperopt::TrialStatus;
use crate::lm::LanguageModel;
use crate::metrics::WordEmbeddings;
use crate::rng::{hash_seed, hash_str};
use crate::text::corpus::{subsample_corpus, subsample_size, BASE_CORPUS_SIZE};
use crate::text::{CaptionDataset, Corpus, CorpusSource, ImageFeatures, Sentence, Split};
use crate::train::TrainHistory;

use super::hyperparams::{load_json, CapgenHyperparams, HyperparamSet, LmHyperparams};
use super::partial::PartialConfig;
use super::pipeline::{
    build_caption_generator, evaluate_caption_generator, lm_fair_perplexity, reference_embeddings,
    train_caption_generator, train_language_model, CaptionTask, LmSchedule,
};

/// Size exponents a corpus can be subsampled at.
pub const SIZE_EXPONENTS: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
/// Exponents available when the corpus is the caption dataset itself.
pub const SAME_CAPTION_EXPONENTS: [f64; 3] = [-1.0, -0.5, 0.0];

pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const EMBEDDINGS_FILE: &str = "reference-embeddings.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowType {
    NoTransfer,
    SameCaptions,
    DifferentCaptions,
    GeneralText,
}

impl RowType {
    pub fn as_str(self) -> &'static str {
        match self {
            RowType::NoTransfer => "no-transfer",
            RowType::SameCaptions => "same-captions",
            RowType::DifferentCaptions => "different-captions",
            RowType::GeneralText => "general-text",
        }
    }

    pub fn allowed_exponents(self) -> &'static [f64] {
        match self {
            RowType::NoTransfer => &[],
            RowType::SameCaptions => &SAME_CAPTION_EXPONENTS,
            _ => &SIZE_EXPONENTS,
        }
    }

    fn corpus_source(self) -> CorpusSource {
        match self {
            RowType::SameCaptions => CorpusSource::SameCaptions,
            RowType::DifferentCaptions => CorpusSource::DifferentCaptions,
            _ => CorpusSource::GeneralText,
        }
    }
}

impl std::fmt::Display for RowType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HpSource<T> {
    File(PathBuf),
    Inline(T),
}

impl<T: HyperparamSet> HpSource<T> {
    pub fn get(&self) -> Result<T> {
        match self {
            HpSource::File(p) => T::load_file(p),
            HpSource::Inline(h) => {
                h.check()?;
                Ok(h.clone())
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let HpSource::File(p) = self {
            *p = resolve_path(base, p);
        }
    }
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowConfig {
    #[serde(rename = "type")]
    pub row_type: RowType,
    /// Language-model training corpus. Same-captions rows default to the
    /// dataset's training captions.
    #[serde(default)]
    pub lm_train: Option<PathBuf>,
    /// Language-model validation corpus. Same-captions rows default to the
    /// dataset's validation captions.
    #[serde(default)]
    pub lm_val: Option<PathBuf>,
    #[serde(default)]
    pub size_exponents: Vec<f64>,
    pub modes: Vec<TransferMode>,
    #[serde(default)]
    pub lm_hyperparams: Option<HpSource<LmHyperparams>>,
    pub capgen_hyperparams: HpSource<CapgenHyperparams>,
}

impl RowConfig {
    fn validate(&self) -> Result<()> {
        let t = self.row_type;
        let bad = |m: String| Err(Error::Config(format!("{t} row: {m}")));
        if self.modes.is_empty() {
            return bad("no transfer modes".into());
        }
        if self.modes.contains(&TransferMode::None) {
            return bad("modes must be frozen or fine-tuned".into());
        }
        let mut seen = self.modes.clone();
        seen.dedup();
        if seen.len() != self.modes.len() {
            return bad("duplicate modes".into());
        }
        if t == RowType::NoTransfer {
            if self.lm_train.is_some() || self.lm_val.is_some() || self.lm_hyperparams.is_some() {
                return bad("carries no language model corpus or hyperparameters".into());
            }
            if self.modes != [TransferMode::FineTuned] {
                return bad("mode must be fine-tuned only".into());
            }
            if !self.size_exponents.is_empty() {
                return bad("takes no size exponents".into());
            }
            return Ok(());
        }
        if self.lm_hyperparams.is_none() {
            return bad("missing lm_hyperparams".into());
        }
        if t != RowType::SameCaptions && (self.lm_train.is_none() || self.lm_val.is_none()) {
            return bad("needs lm_train and lm_val".into());
        }
        if self.size_exponents.is_empty() {
            return bad("no size exponents".into());
        }
        for x in &self.size_exponents {
            if !t.allowed_exponents().contains(x) {
                return bad(format!("size exponent {x} not in {:?}", t.allowed_exponents()));
            }
        }
        Ok(())
    }

    /// The exponents to run, `[None]` for the no-transfer row.
    fn exponents(&self) -> Vec<Option<f64>> {
        if self.row_type == RowType::NoTransfer {
            vec![None]
        } else {
            self.size_exponents.iter().map(|&x| Some(x)).collect()
        }
    }

    fn effective_modes(&self) -> Vec<TransferMode> {
        if self.row_type == RowType::NoTransfer {
            vec![TransferMode::None]
        } else {
            self.modes.clone()
        }
    }
}

fn default_repeats() -> usize {
    5
}
fn default_size_base() -> usize {
    BASE_CORPUS_SIZE
}
fn default_min_count() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub features: PathBuf,
    pub rows: Vec<RowConfig>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Sentences at size exponent 0.
    #[serde(default = "default_size_base")]
    pub size_base: usize,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Word-embedding table for WMD. Without one, embeddings come from a
    /// language model trained on the training captions.
    #[serde(default)]
    pub wmd_embeddings: Option<PathBuf>,
    /// Hyperparameters of that reference language model (desk defaults
    /// when absent).
    #[serde(default)]
    pub embedding_hyperparams: Option<HpSource<LmHyperparams>>,
    /// Keep every trial's checkpoints and generated captions.
    #[serde(default)]
    pub save_models: bool,
    #[serde(default)]
    pub partial: Option<PartialConfig>,
}

impl ExperimentConfig {
    /// Reads a config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = load_json(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.dataset = resolve_path(base, &self.dataset);
        self.features = resolve_path(base, &self.features);
        if let Some(p) = &mut self.wmd_embeddings {
            *p = resolve_path(base, p);
        }
        if let Some(h) = &mut self.embedding_hyperparams {
            h.resolve(base);
        }
        for r in &mut self.rows {
            for p in [&mut r.lm_train, &mut r.lm_val].into_iter().flatten() {
                *p = resolve_path(base, p);
            }
            if let Some(h) = &mut r.lm_hyperparams {
                h.resolve(base);
            }
            r.capgen_hyperparams.resolve(base);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Config("experiment has no rows".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if self.size_base == 0 {
            return Err(Error::Config("size_base must be positive".into()));
        }
        let mut types: Vec<RowType> = self.rows.iter().map(|r| r.row_type).collect();
        types.sort();
        types.dedup();
        if types.len() != self.rows.len() {
            return Err(Error::Config("each row type may appear once".into()));
        }
        for r in &self.rows {
            r.validate()?;
        }
        if let Some(p) = &self.partial {
            p.validate(self)?;
        }
        Ok(())
    }

    pub fn row(&self, t: RowType) -> Option<&RowConfig> {
        self.rows.iter().find(|r| r.row_type == t)
    }

    pub(crate) fn embedding_hp(&self) -> Result<LmHyperparams> {
        match &self.embedding_hyperparams {
            Some(h) => h.get(),
            None => Ok(LmHyperparams::desk()),
        }
    }
}

/// Identifier of a grid cell, e.g. `same-captions/frozen/x=-0.5`.
pub fn cell_id(t: RowType, mode: TransferMode, exponent: Option<f64>) -> String {
    match exponent {
        None => t.as_str().to_string(),
        Some(x) => format!("{t}/{}/x={x}", mode.as_str()),
    }
}

/// Seed shared by every mode of a (row, exponent, repeat): the corpus
/// subsample and the language model.
pub fn lm_seed(base: u64, t: RowType, exponent: f64, repeat: usize) -> u64 {
    hash_seed(&[base, hash_str(&format!("{t}/x={exponent}")), repeat as u64])
}

/// Seed of the corpus subsample drawn for a language-model seed.
pub fn sample_seed(lm_seed: u64) -> u64 {
    hash_seed(&[lm_seed, 5])
}

pub fn trial_seed(base: u64, cell: &str, repeat: usize) -> u64 {
    hash_seed(&[base, hash_str(cell), repeat as u64])
}

/// One trial's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: String,
    pub row_type: RowType,
    pub mode: TransferMode,
    pub frozen: bool,
    pub size_exponent: Option<f64>,
    pub corpus_size: Option<usize>,
    pub repeat: usize,
    pub seed: u64,
    pub status: TrialStatus,
    pub lm_val_perplexity: Option<f64>,
    pub lm_fair_perplexity: Option<f64>,
    pub lm_epochs: Option<usize>,
    pub lm_vocab_size: Option<usize>,
    pub cg_vocab_size: Option<usize>,
    pub cg_epochs: Option<usize>,
    pub cg_val_perplexity: Option<f64>,
    pub cg_test_perplexity: Option<f64>,
    pub cider: Option<f64>,
    pub wmd: Option<f64>,
    pub wmd_skipped: Option<usize>,
    pub error: Option<String>,
    pub wall_seconds: f64,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }

    fn set_caption_fields(&mut self, f: CaptionFields) {
        self.cg_vocab_size = f.cg_vocab_size;
        self.cg_epochs = f.cg_epochs;
        self.cg_val_perplexity = f.cg_val_perplexity;
        self.cg_test_perplexity = f.cg_test_perplexity;
        self.cider = f.cider;
        self.wmd = f.wmd;
        self.wmd_skipped = f.wmd_skipped;
    }
}

/// Loaded inputs shared by all trials.
pub struct ExperimentData {
    pub dataset: CaptionDataset,
    pub features: ImageFeatures,
    pub min_count: usize,
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dataset = CaptionDataset::load_jsonl(&cfg.dataset)?;
        let features = ImageFeatures::load(&cfg.features)?;
        features.check_covers(&dataset)?;
        Ok(ExperimentData {
            dataset,
            features,
            min_count: cfg.min_count,
        })
    }

    pub fn task(&self) -> CaptionTask<'_> {
        CaptionTask {
            dataset: &self.dataset,
            features: &self.features,
            min_count: self.min_count,
        }
    }

    /// The row's language-model corpora, (training, validation).
    pub fn lm_corpora(&self, row: &RowConfig) -> Result<(Corpus, Corpus)> {
        let src = row.row_type.corpus_source();
        let own = |split| Corpus::new(self.dataset.captions(split).cloned().collect(), src);
        let train = match &row.lm_train {
            Some(p) => Corpus::read(p, src)?,
            None => own(Split::Train),
        };
        let val = match &row.lm_val {
            Some(p) => Corpus::read(p, src)?,
            None => own(Split::Val),
        };
        if train.is_empty() || val.is_empty() {
            return Err(Error::EmptyData(format!("{} language model corpus", row.row_type)));
        }
        Ok((train, val))
    }

    /// Embeddings for WMD: the configured table, or a reference language
    /// model trained on the training captions (saved under `out`).
    pub fn embeddings(&self, cfg: &ExperimentConfig, out: &Path) -> Result<WordEmbeddings> {
        if let Some(p) = &cfg.wmd_embeddings {
            return WordEmbeddings::load(p);
        }
        let seed = hash_seed(&[cfg.seed, hash_str("reference-embeddings")]);
        let emb = reference_embeddings(&self.task(), &cfg.embedding_hp()?, seed)?;
        emb.save(&out.join(EMBEDDINGS_FILE))?;
        Ok(emb)
    }
}

/// A trained language model and what the result rows report about it.
pub(crate) struct LmOutcome {
    pub lm: LanguageModel,
    pub history: TrainHistory,
    pub corpus_size: usize,
    pub fair_perplexity: f64,
}

/// Subsamples the corpus and trains a language model with early stopping.
pub(crate) fn grid_language_model(
    data: &ExperimentData,
    corpora: &(Corpus, Corpus),
    hp: &LmHyperparams,
    exponent: f64,
    size_base: usize,
    schedule: LmSchedule,
    sample_seed: u64,
    train_seed: u64,
) -> Result<LmOutcome> {
    let sub = subsample_corpus(&corpora.0, exponent, size_base, sample_seed)?;
    let (lm, history) =
        train_language_model(&sub.sentences, &corpora.1.sentences, hp, data.min_count, schedule, train_seed)?;
    let test: Vec<Sentence> = data.dataset.captions(Split::Test).cloned().collect();
    let fair_perplexity = lm_fair_perplexity(&lm, &test)?;
    Ok(LmOutcome {
        lm,
        history,
        corpus_size: sub.len(),
        fair_perplexity,
    })
}

/// Caption fields shared by grid and partial-training rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct CaptionFields {
    pub cg_vocab_size: Option<usize>,
    pub cg_epochs: Option<usize>,
    pub cg_val_perplexity: Option<f64>,
    pub cg_test_perplexity: Option<f64>,
    pub cider: Option<f64>,
    pub wmd: Option<f64>,
    pub wmd_skipped: Option<usize>,
}

/// Caption-generator part of a trial, filling the caption fields of `row`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn caption_trial(
    data: &ExperimentData,
    hp: &CapgenHyperparams,
    lm: Option<&LanguageModel>,
    mode: TransferMode,
    emb: &WordEmbeddings,
    seed: u64,
    row: &mut CaptionFields,
    save_dir: Option<&Path>,
) -> Result<CaptionGenerator> {
    let task = data.task();
    let mut cg = build_caption_generator(&task, hp, lm, mode, seed)?;
    row.cg_vocab_size = Some(cg.vocab().len());
    let history = train_caption_generator(&mut cg, &task, hp, seed)?;
    row.cg_epochs = Some(history.selected_epoch);
    row.cg_val_perplexity = history.selected_val_perplexity();
    let scores = evaluate_caption_generator(&cg, &task, Split::Test, hp.beam_width, emb)?;
    row.cg_test_perplexity = Some(scores.perplexity);
    row.cider = Some(scores.cider.value);
    row.wmd = Some(scores.wmd.value);
    row.wmd_skipped = Some(scores.wmd.n_skipped);
    if let Some(dir) = save_dir {
        cg.save(&dir.join("capgen"))?;
        write_generations(&dir.join("generations.jsonl"), &scores.generated)?;
    }
    Ok(cg)
}

/// Append-only JSONL ledger of completed records.
pub(crate) struct Ledger {
    path: PathBuf,
}

impl Ledger {
    /// Opens the ledger, clearing it unless `resume`.
    pub fn open(path: PathBuf, resume: bool) -> Result<Self> {
        if !resume || !path.exists() {
            std::fs::write(&path, "").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Ledger { path })
    }

    /// Every parseable record. A torn final line is dropped.
    pub fn read<T: DeserializeOwned>(&self) -> Result<Vec<T>> {
        let text = std::fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str(line) {
                Ok(r) => out.push(r),
                Err(e) if i + 1 == lines.len() && !text.ends_with('\n') => {
                    log::warn!("dropping torn ledger record: {e}");
                }
                Err(e) => return Err(Error::format(&self.path, format!("line {}: {e}", i + 1))),
            }
        }
        if !text.is_empty() && !text.ends_with('\n') {
            let mut clean = String::new();
            for l in &lines[..out.len()] {
                clean.push_str(l);
                clean.push('\n');
            }
            std::fs::write(&self.path, clean).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(out)
    }

    /// Appends one record with a single write followed by a sync.
    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        f.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_results_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub rows: Vec<ResultRow>,
    /// Trials run in this invocation (the rest came from the ledger).
    pub executed: usize,
}

impl GridOutcome {
    pub fn n_failed(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }
}

fn failed(row: &mut ResultRow, e: &Error) {
    row.status = TrialStatus::Failed;
    row.error = Some(e.to_string());
    log::warn!("trial {} repeat {} failed: {e}", row.cell, row.repeat);
}

/// Runs every cell and repeat not already in the ledger and writes
/// `results.csv` in config order.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<GridOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = ExperimentData::load(cfg)?;
    let emb = data.embeddings(cfg, out)?;
    let ledger = Ledger::open(out.join(LEDGER_FILE), resume)?;
    let mut done: HashMap<(String, usize), ResultRow> = ledger
        .read::<ResultRow>()?
        .into_iter()
        .map(|r| ((r.cell.clone(), r.repeat), r))
        .collect();
    let mut executed = 0;

    for row_cfg in &cfg.rows {
        let t = row_cfg.row_type;
        let cg_hp = row_cfg.capgen_hyperparams.get()?;
        let lm_hp = row_cfg.lm_hyperparams.as_ref().map(|h| h.get()).transpose()?;
        let modes = row_cfg.effective_modes();
        let mut corpora = None;
        for exponent in row_cfg.exponents() {
            if let Some(x) = exponent {
                let need = subsample_size(x, cfg.size_base);
                if corpora.is_none() {
                    corpora = Some(data.lm_corpora(row_cfg)?);
                }
                let have = corpora.as_ref().map_or(0, |c: &(Corpus, Corpus)| c.0.len());
                if need > have {
                    return Err(Error::Size {
                        requested: need,
                        available: have,
                    });
                }
            }
            for repeat in 0..cfg.repeats {
                let pending: Vec<TransferMode> = modes
                    .iter()
                    .copied()
                    .filter(|&m| !done.contains_key(&(cell_id(t, m, exponent), repeat)))
                    .collect();
                if pending.is_empty() {
                    continue;
                }
                let start = Instant::now();
                let lm = match (exponent, &lm_hp, &corpora) {
                    (Some(x), Some(hp), Some(c)) => {
                        let seed = lm_seed(cfg.seed, t, x, repeat);
                        log::info!("{t} x={x} repeat {repeat}: training language model");
                        let res = grid_language_model(
                            &data,
                            c,
                            hp,
                            x,
                            cfg.size_base,
                            LmSchedule::EarlyStopping,
                            sample_seed(seed),
                            seed,
                        );
                        if let (Ok(o), true) = (&res, cfg.save_models) {
                            o.lm.save(&out.join("models").join(format!("{t}/x={x}/r{repeat}/lm")))?;
                        }
                        Some(res)
                    }
                    _ => None,
                };
                let lm_seconds = start.elapsed().as_secs_f64();
                for mode in pending {
                    let start = Instant::now();
                    let cell = cell_id(t, mode, exponent);
                    let seed = trial_seed(cfg.seed, &cell, repeat);
                    log::info!("{cell} repeat {repeat}");
                    let mut row = ResultRow {
                        cell: cell.clone(),
                        row_type: t,
                        mode: if mode == TransferMode::None { TransferMode::FineTuned } else { mode },
                        frozen: mode == TransferMode::Frozen,
                        size_exponent: exponent,
                        corpus_size: None,
                        repeat,
                        seed,
                        status: TrialStatus::Ok,
                        lm_val_perplexity: None,
                        lm_fair_perplexity: None,
                        lm_epochs: None,
                        lm_vocab_size: None,
                        cg_vocab_size: None,
                        cg_epochs: None,
                        cg_val_perplexity: None,
                        cg_test_perplexity: None,
                        cider: None,
                        wmd: None,
                        wmd_skipped: None,
                        error: None,
                        wall_seconds: 0.0,
                    };
                    let lm_ref = match &lm {
                        Some(Ok(o)) => {
                            row.corpus_size = Some(o.corpus_size);
                            row.lm_val_perplexity = o.history.selected_val_perplexity();
                            row.lm_fair_perplexity = Some(o.fair_perplexity);
                            row.lm_epochs = Some(o.history.selected_epoch);
                            row.lm_vocab_size = Some(o.lm.vocab().len());
                            Ok(Some(&o.lm))
                        }
                        Some(Err(e)) => Err(Error::Data(format!("language model: {e}"))),
                        None => Ok(None),
                    };
                    let save_dir = cfg.save_models.then(|| out.join("models").join(&cell).join(format!("r{repeat}")));
                    let mut fields = CaptionFields::default();
                    let res = lm_ref.and_then(|lm| {
                        caption_trial(&data, &cg_hp, lm, mode, &emb, seed, &mut fields, save_dir.as_deref())
                    });
                    row.set_caption_fields(fields);
                    if let Err(e) = res {
                        failed(&mut row, &e);
                    }
                    row.wall_seconds = start.elapsed().as_secs_f64() + lm_seconds;
                    ledger.append(&row)?;
                    done.insert((cell, repeat), row);
                    executed += 1;
                }
            }
        }
    }

    let mut rows = Vec::new();
    for row_cfg in &cfg.rows {
        for exponent in row_cfg.exponents() {
            for &mode in &row_cfg.effective_modes() {
                for repeat in 0..cfg.repeats {
                    let key = (cell_id(row_cfg.row_type, mode, exponent), repeat);
                    match done.remove(&key) {
                        Some(r) => rows.push(r),
                        None => return Err(Error::Data(format!("no record for {} repeat {}", key.0, key.1))),
                    }
                }
            }
        }
    }
    write_results_csv(&out.join(RESULTS_FILE), &rows)?;
    Ok(GridOutcome { rows, executed })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Ok rows keyed by cell.
pub fn by_cell(rows: &[ResultRow]) -> BTreeMap<String, Vec<&ResultRow>> {
    let mut m: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        m.entry(r.cell.clone()).or_default().push(r);
    }
    m
}
