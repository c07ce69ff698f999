//! One experiment trial: language-model pre-training, transfer, caption
//! generator training, decoding and scoring.

use std::collections::BTreeMap;

use crate::capgen::{
    build_examples, caption_perplexity, generate_captions, train_capgen, transfer_prefix_params, CaptionGenerator,
    GeneratedCaption, TransferMode,
};
use crate::error::{Error, Result};
use crate::lm::{fair_perplexity_with_known, train_lm, LanguageModel, PerplexityMode};
use crate::metrics::{cider_score, wmd_similarity_report, MetricValue, ReferenceSet, WordEmbeddings};
use crate::rng::hash_seed;
use crate::text::vocab::distinct_types;
use crate::text::{CaptionDataset, ImageFeatures, Sentence, Split, Vocabulary};
use crate::train::{StopRule, TrainHistory};

use super::hyperparams::{CapgenHyperparams, LmHyperparams};

/// The caption dataset a trial trains and evaluates on.
#[derive(Debug, Clone, Copy)]
pub struct CaptionTask<'a> {
    pub dataset: &'a CaptionDataset,
    pub features: &'a ImageFeatures,
    pub min_count: usize,
}

impl CaptionTask<'_> {
    pub fn captions(&self, split: Split) -> Vec<Sentence> {
        self.dataset.captions(split).cloned().collect()
    }

    pub fn caption_vocab(&self) -> Vocabulary {
        Vocabulary::build(self.dataset.captions(Split::Train), self.min_count)
    }
}

/// How many epochs to train the language model for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmSchedule {
    /// Up to `max_epochs` with early stopping.
    EarlyStopping,
    /// Exactly `epochs` epochs, optionally stopping at the first epoch whose
    /// validation perplexity does not improve (the weights then roll back to
    /// the last improving epoch).
    Exactly { epochs: usize, require_improvement: bool },
}

/// Trains a language model on `train`, validating on `val`. The vocabulary
/// holds the words of `train` seen at least `min_count` times.
pub fn train_language_model(
    train: &[Sentence],
    val: &[Sentence],
    hp: &LmHyperparams,
    min_count: usize,
    schedule: LmSchedule,
    seed: u64,
) -> Result<(LanguageModel, TrainHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyData("language model corpus or validation set is empty".into()));
    }
    let vocab = Vocabulary::build(train, min_count);
    let mut lm = LanguageModel::new(vocab, hp.embed_size, hp.rnn_size, hp.init_spec(hash_seed(&[seed, 1]))?)?;
    let enc = |s: &[Sentence]| -> Vec<Vec<usize>> { s.iter().map(|x| lm.vocab().encode(x)).collect() };
    let (tr, va) = (enc(train), enc(val));
    let mut cfg = hp.train_config(hash_seed(&[seed, 2]), StopRule::EarlyStopping);
    if let LmSchedule::Exactly {
        epochs,
        require_improvement,
    } = schedule
    {
        cfg.max_epochs = epochs;
        cfg.stop_rule = if require_improvement {
            StopRule::RequireImprovement
        } else {
            StopRule::None
        };
    }
    let history = train_lm(&mut lm, &tr, &va, &cfg)?;
    Ok((lm, history))
}

/// Fair perplexity of `lm` on `sentences`: the unknown token stands for the
/// corpus word types the vocabulary does not cover.
pub fn lm_fair_perplexity(lm: &LanguageModel, sentences: &[Sentence]) -> Result<f64> {
    let enc: Vec<Vec<usize>> = sentences.iter().map(|s| lm.vocab().encode(s)).collect();
    fair_perplexity_with_known(lm, &enc, distinct_types(sentences), lm.vocab().known_types(sentences))
}

/// A fresh caption generator over the caption vocabulary (intersected with
/// the language model's when transferring), with the prefix encoder
/// transferred according to `mode`.
pub fn build_caption_generator(
    task: &CaptionTask<'_>,
    hp: &CapgenHyperparams,
    lm: Option<&LanguageModel>,
    mode: TransferMode,
    seed: u64,
) -> Result<CaptionGenerator> {
    let cap_vocab = task.caption_vocab();
    let init = hp.init_spec(hash_seed(&[seed, 3]))?;
    let feature_dim = task.features.dim();
    match (lm, mode) {
        (_, TransferMode::None) => CaptionGenerator::new(cap_vocab, hp.dims(feature_dim, None), init),
        (Some(lm), mode) => {
            let vocab = Vocabulary::intersect(lm.vocab(), &cap_vocab)?;
            let d = lm.dims();
            let cg = CaptionGenerator::new(vocab, hp.dims(feature_dim, Some((d.embed_size, d.rnn_size))), init)?;
            transfer_prefix_params(lm, cg, mode)
        }
        (None, _) => Err(Error::Config("transfer requested without a language model".into())),
    }
}

pub fn train_caption_generator(
    cg: &mut CaptionGenerator,
    task: &CaptionTask<'_>,
    hp: &CapgenHyperparams,
    seed: u64,
) -> Result<TrainHistory> {
    let train = build_examples(&task.dataset.split(Split::Train), task.features, cg.vocab())?;
    let val = build_examples(&task.dataset.split(Split::Val), task.features, cg.vocab())?;
    train_capgen(cg, &train, &val, &hp.train_config(hash_seed(&[seed, 4])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionScores {
    pub perplexity: f64,
    pub cider: MetricValue,
    pub wmd: MetricValue,
    pub generated: Vec<GeneratedCaption>,
}

/// Perplexity on the split's captions, and CIDEr / WMD similarity of the
/// beam-search captions against them.
pub fn evaluate_caption_generator(
    cg: &CaptionGenerator,
    task: &CaptionTask<'_>,
    split: Split,
    beam_width: usize,
    emb: &WordEmbeddings,
) -> Result<CaptionScores> {
    let items = task.dataset.split(split);
    let examples = build_examples(&items, task.features, cg.vocab())?;
    let perplexity = caption_perplexity(cg, &examples, PerplexityMode::Token)?;
    let gen = crate::capgen::GenerationConfig {
        beam_width,
        ..Default::default()
    };
    let generated = generate_captions(cg, &items, task.features, &gen)?;
    let refs = ReferenceSet::from_items(&items)?;
    let cands: BTreeMap<String, Sentence> = generated
        .iter()
        .map(|g| (g.image_id.clone(), Sentence::from_text(&g.caption)))
        .collect();
    Ok(CaptionScores {
        perplexity,
        cider: cider_score(&cands, &refs)?,
        wmd: wmd_similarity_report(&cands, &refs, emb)?,
        generated,
    })
}

/// Embeddings for WMD scoring when no external table is given: a language
/// model trained on the training captions, its content rows.
pub fn reference_embeddings(task: &CaptionTask<'_>, hp: &LmHyperparams, seed: u64) -> Result<WordEmbeddings> {
    let (lm, _) = train_language_model(
        &task.captions(Split::Train),
        &task.captions(Split::Val),
        hp,
        task.min_count,
        LmSchedule::EarlyStopping,
        hash_seed(&[seed, 0x77]),
    )?;
    WordEmbeddings::from_table(lm.vocab(), lm.params().value(lm.encoder().embedding()))
}

/// Perplexity of an add-one smoothed unigram model estimated on `train`
/// (targets: every token after the leading EDGE) and evaluated on `test`.
pub fn unigram_perplexity(vocab_size: usize, train: &[Vec<usize>], test: &[Vec<usize>]) -> Result<f64> {
    let mut counts = vec![1.0f64; vocab_size];
    for s in train {
        for &t in &s[1..] {
            counts[t] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in test {
        for &t in &s[1..] {
            nll -= (counts[t] / total).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyData("no test positions".into()));
    }
    Ok((nll / n as f64).exp())
}
