//! Merge-architecture caption generator, prefix-encoder transfer and
//! beam-search decoding.

pub mod beam;
pub mod model;
pub mod transfer;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use beam::{beam_search, generate_caption, greedy_decode, GenerationConfig, Hypothesis, ImageDecoder, StepModel};
pub use model::{CaptionDims, CaptionExample, CaptionGenerator};
pub use transfer::{transfer_prefix_params, TransferMode, TransferRecord, TransferSpec, TRANSFER_FILE};

use crate::error::{Error, Result};
use crate::lm::{check_sequence, perplexity_of, PerplexityMode, ScoredSentence};
use crate::text::{CaptionItem, ImageFeatures, Vocabulary};
use crate::train::{fit, TrainConfig, TrainHistory};

/// Pairs every caption of `items` with its image's feature row.
pub fn build_examples(items: &[&CaptionItem], features: &ImageFeatures, vocab: &Vocabulary) -> Result<Vec<CaptionExample>> {
    let mut out = Vec::new();
    for item in items {
        let row: Arc<[f32]> = Arc::from(features.require(&item.image_id)?);
        for cap in &item.captions {
            out.push(CaptionExample {
                features: Arc::clone(&row),
                tokens: vocab.encode(cap),
            });
        }
    }
    Ok(out)
}

pub fn score_examples(model: &CaptionGenerator, examples: &[CaptionExample]) -> Result<Vec<ScoredSentence>> {
    examples.iter().map(|e| model.score(&e.features, &e.tokens)).collect()
}

pub fn caption_perplexity(model: &CaptionGenerator, examples: &[CaptionExample], mode: PerplexityMode) -> Result<f64> {
    perplexity_of(&score_examples(model, examples)?, mode)
}

/// Trains with the configured stopping rule, validating on token-level
/// perplexity of the validation captions.
pub fn train_capgen(
    model: &mut CaptionGenerator,
    train: &[CaptionExample],
    val: &[CaptionExample],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyData("caption training needs train and validation captions".into()));
    }
    let v = model.vocab().len();
    let f = model.dims().feature_dim;
    for e in train.iter().chain(val) {
        check_sequence(&e.tokens, v)?;
        if e.features.len() != f {
            return Err(Error::Shape(format!("feature row of length {}, model expects {f}", e.features.len())));
        }
    }
    fit(model, train, config, |m: &CaptionGenerator| caption_perplexity(m, val, PerplexityMode::Token))
}

/// One line of generation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCaption {
    pub image_id: String,
    pub caption: String,
    pub logprob: f64,
}

/// Decodes one caption per item, in item order.
pub fn generate_captions(
    model: &CaptionGenerator,
    items: &[&CaptionItem],
    features: &ImageFeatures,
    gen: &GenerationConfig,
) -> Result<Vec<GeneratedCaption>> {
    gen.validate()?;
    items
        .iter()
        .map(|item| {
            let h = generate_caption(model, features.require(&item.image_id)?, gen)?;
            Ok(GeneratedCaption {
                image_id: item.image_id.clone(),
                caption: model.vocab().decode(&h.tokens).to_text(),
                logprob: h.log_prob,
            })
        })
        .collect()
}

pub fn write_generations(path: &Path, gens: &[GeneratedCaption]) -> Result<()> {
    let mut buf = Vec::new();
    for g in gens {
        serde_json::to_writer(&mut buf, g)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_generations(path: &Path) -> Result<Vec<GeneratedCaption>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
