//! Hyperparameter tuning jobs. Language models are tuned on validation
//! perplexity; caption generators on the WMD similarity of the captions
//! they generate for the validation images (negated, since the tuner
//! minimises).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::capgen::{CaptionGenerator, TransferMode};
use crate::error::{Error, Result};
use crate::hyperopt::{read_history, tune, HyperPoint, ParamSpace, TuneConfig, TuneOutcome};
use crate::lm::LanguageModel;
use crate::metrics::WordEmbeddings;
use crate::rng::{hash_seed, hash_str};
use crate::text::{CaptionDataset, Corpus, CorpusSource, ImageFeatures, Split};

use super::hyperparams::{load_json, save_json, CapgenHyperparams, LmHyperparams};
use super::pipeline::{
    build_caption_generator, evaluate_caption_generator, reference_embeddings, train_caption_generator,
    train_language_model, CaptionTask, LmSchedule,
};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_HYPERPARAMS_FILE: &str = "best-hyperparams.json";
pub const BEST_MODEL_DIR: &str = "best-model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuneTarget {
    LanguageModel,
    CaptionGenerator,
}

fn default_min_count() -> usize {
    5
}

/// A tuning job as read from its JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneJob {
    pub target: TuneTarget,
    /// Caption dataset; required for caption generators, and the default
    /// language-model corpus (its training and validation captions).
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub features: Option<PathBuf>,
    #[serde(default)]
    pub lm_train: Option<PathBuf>,
    #[serde(default)]
    pub lm_val: Option<PathBuf>,
    /// Language model whose prefix parameters are transferred (frozen)
    /// into every caption generator tried. Absent: no transfer.
    #[serde(default)]
    pub lm_checkpoint: Option<PathBuf>,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Embeddings for WMD; absent: a reference language model trained on
    /// the training captions.
    #[serde(default)]
    pub wmd_embeddings: Option<PathBuf>,
    /// Search space; absent: the default space for the target.
    #[serde(default)]
    pub space: Option<ParamSpace>,
    #[serde(default)]
    pub tuner: TuneConfig,
    /// Values for hyperparameters outside the space; desk defaults when absent.
    #[serde(default)]
    pub base_lm: Option<LmHyperparams>,
    #[serde(default)]
    pub base_capgen: Option<CapgenHyperparams>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(x) = p {
        if x.is_relative() {
            *x = base.join(&*x);
        }
    }
}

impl TuneJob {
    pub fn load(path: &Path) -> Result<Self> {
        let mut job: TuneJob = load_json(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for p in [
            &mut job.dataset,
            &mut job.features,
            &mut job.lm_train,
            &mut job.lm_val,
            &mut job.lm_checkpoint,
            &mut job.wmd_embeddings,
        ] {
            resolve(&base, p);
        }
        job.validate()?;
        Ok(job)
    }

    pub fn validate(&self) -> Result<()> {
        self.tuner.validate()?;
        match self.target {
            TuneTarget::LanguageModel => {
                if self.lm_train.is_some() != self.lm_val.is_some() {
                    return Err(Error::Config("give both lm_train and lm_val, or neither".into()));
                }
                if self.lm_train.is_none() && self.dataset.is_none() {
                    return Err(Error::Config("language-model tuning needs lm_train/lm_val or a dataset".into()));
                }
            }
            TuneTarget::CaptionGenerator => {
                if self.dataset.is_none() || self.features.is_none() {
                    return Err(Error::Config("caption-generator tuning needs dataset and features".into()));
                }
            }
        }
        Ok(())
    }

    pub fn space(&self) -> ParamSpace {
        self.space.clone().unwrap_or_else(|| match self.target {
            TuneTarget::LanguageModel => ParamSpace::language_model_default(),
            TuneTarget::CaptionGenerator => ParamSpace::caption_generator_default(self.lm_checkpoint.is_none()),
        })
    }
}

fn load_dataset(job: &TuneJob) -> Result<Option<(CaptionDataset, Option<ImageFeatures>)>> {
    let Some(p) = &job.dataset else { return Ok(None) };
    let ds = CaptionDataset::load_jsonl(p)?;
    let feats = match &job.features {
        Some(f) => {
            let feats = ImageFeatures::load(f)?;
            feats.check_covers(&ds)?;
            Some(feats)
        }
        None => None,
    };
    Ok(Some((ds, feats)))
}

/// Runs the job, writing `history.jsonl`, `best-hyperparams.json` and the
/// best trial's model under `out`.
pub fn run_tune_job(job: &TuneJob, out: &Path, resume: bool) -> Result<TuneOutcome> {
    job.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let space = job.space();
    let history = out.join(HISTORY_FILE);
    let seed = job.tuner.seed;
    let loaded = load_dataset(job)?;
    let mut best = f64::INFINITY;
    if resume && history.exists() {
        let (_, _, trials) = read_history(&history)?;
        best = trials.iter().filter_map(|t| t.ok_fitness()).fold(best, f64::min);
    }

    let outcome = match job.target {
        TuneTarget::LanguageModel => {
            let (train, val) = match (&job.lm_train, &job.lm_val, &loaded) {
                (Some(t), Some(v), _) => (
                    Corpus::read(t, CorpusSource::Other)?.sentences,
                    Corpus::read(v, CorpusSource::Other)?.sentences,
                ),
                (_, _, Some((ds, _))) => (
                    ds.captions(Split::Train).cloned().collect(),
                    ds.captions(Split::Val).cloned().collect(),
                ),
                _ => unreachable!("checked by validate"),
            };
            let base = job.base_lm.clone().unwrap_or_else(LmHyperparams::desk);
            let objective = |p: &HyperPoint| -> Result<f64> {
                let hp = base.with_point(p)?;
                hp.validate()?;
                let s = hash_seed(&[seed, hash_str(&serde_json::to_string(p)?)]);
                let (lm, h) = train_language_model(&train, &val, &hp, job.min_count, LmSchedule::EarlyStopping, s)?;
                let fitness = h
                    .selected_val_perplexity()
                    .ok_or_else(|| Error::Data("no validation perplexity".into()))?;
                if fitness < best {
                    best = fitness;
                    save_best(out, &hp, |d| lm.save(d))?;
                }
                Ok(fitness)
            };
            tune(objective, &space, &job.tuner, Some(&history), resume)?
        }
        TuneTarget::CaptionGenerator => {
            let Some((ds, Some(feats))) = &loaded else { unreachable!("checked by validate") };
            let task = CaptionTask {
                dataset: ds,
                features: feats,
                min_count: job.min_count,
            };
            let lm = job.lm_checkpoint.as_deref().map(LanguageModel::load).transpose()?;
            let mode = if lm.is_some() { TransferMode::Frozen } else { TransferMode::None };
            let emb = match &job.wmd_embeddings {
                Some(p) => WordEmbeddings::load(p)?,
                None => reference_embeddings(&task, &LmHyperparams::desk(), hash_seed(&[seed, hash_str("reference-embeddings")]))?,
            };
            let base = job.base_capgen.clone().unwrap_or_else(CapgenHyperparams::desk);
            let objective = |p: &HyperPoint| -> Result<f64> {
                let hp = base.with_point(p)?;
                hp.validate()?;
                let s = hash_seed(&[seed, hash_str(&serde_json::to_string(p)?)]);
                let mut cg: CaptionGenerator = build_caption_generator(&task, &hp, lm.as_ref(), mode, s)?;
                train_caption_generator(&mut cg, &task, &hp, s)?;
                let scores = evaluate_caption_generator(&cg, &task, Split::Val, hp.beam_width, &emb)?;
                let fitness = -scores.wmd.value;
                if fitness < best {
                    best = fitness;
                    save_best(out, &hp, |d| cg.save(d))?;
                }
                Ok(fitness)
            };
            tune(objective, &space, &job.tuner, Some(&history), resume)?
        }
    };
    Ok(outcome)
}

fn save_best<T: Serialize>(out: &Path, hp: &T, save_model: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    save_json(&out.join(BEST_HYPERPARAMS_FILE), hp)?;
    let dir = out.join(BEST_MODEL_DIR);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    save_model(&dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_validation() {
        let mut job = TuneJob {
            target: TuneTarget::LanguageModel,
            dataset: None,
            features: None,
            lm_train: Some("t".into()),
            lm_val: None,
            lm_checkpoint: None,
            min_count: 5,
            wmd_embeddings: None,
            space: None,
            tuner: TuneConfig::default(),
            base_lm: None,
            base_capgen: None,
        };
        assert!(job.validate().is_err());
        job.lm_val = Some("v".into());
        assert!(job.validate().is_ok());
        job.target = TuneTarget::CaptionGenerator;
        assert!(job.validate().is_err());
        job.dataset = Some("d".into());
        job.features = Some("f".into());
        assert!(job.validate().is_ok());
        assert!(job.space().dimensions.iter().any(|d| d.name == "rnn_size"));
        job.lm_checkpoint = Some("lm".into());
        assert!(!job.space().dimensions.iter().any(|d| d.name == "rnn_size"));
    }
}
