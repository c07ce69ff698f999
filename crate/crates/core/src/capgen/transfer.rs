use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::nn::checkpoint::{encode_weights, sha256_hex};

use super::model::CaptionGenerator;

pub const TRANSFER_FILE: &str = "transfer.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    #[default]
    None,
    Frozen,
    FineTuned,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::None => "none",
            TransferMode::Frozen => "frozen",
            TransferMode::FineTuned => "fine-tuned",
        }
    }
}

impl std::str::FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TransferMode::None),
            "frozen" => Ok(TransferMode::Frozen),
            "fine-tuned" => Ok(TransferMode::FineTuned),
            other => Err(Error::Config(format!("unknown transfer mode {other:?}"))),
        }
    }
}

/// Transfer request: a mode plus the language-model checkpoint directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub mode: TransferMode,
    #[serde(default)]
    pub source: Option<PathBuf>,
}

impl TransferSpec {
    pub fn none() -> Self {
        TransferSpec {
            mode: TransferMode::None,
            source: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.source) {
            (TransferMode::None, _) | (_, Some(_)) => Ok(()),
            (mode, None) => Err(Error::Config(format!("transfer mode {} needs a source checkpoint", mode.as_str()))),
        }
    }

    pub fn load_source(&self) -> Result<Option<LanguageModel>> {
        self.validate()?;
        match (self.mode, &self.source) {
            (TransferMode::None, _) => Ok(None),
            (_, Some(dir)) => LanguageModel::load(dir).map(Some),
            _ => unreachable!("validated above"),
        }
    }
}

/// Contents of `transfer.json` in a caption-generator checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub mode: TransferMode,
    /// SHA-256 of the source model's encoded weights.
    pub source_hash: Option<String>,
}

/// Copies the language model's embedding rows (remapped by token) and GRU
/// weights into `cg`. Frozen mode marks the copied parameters untrainable.
/// The caption generator's own softmax and post-image weights are untouched.
pub fn transfer_prefix_params(lm: &LanguageModel, mut cg: CaptionGenerator, mode: TransferMode) -> Result<CaptionGenerator> {
    if mode == TransferMode::None {
        return Ok(cg);
    }
    let (ld, cd) = (lm.dims(), cg.encoder().dims);
    if ld.embed_size != cd.embed_size || ld.rnn_size != cd.rnn_size {
        return Err(Error::Shape(format!(
            "language model has embed/rnn sizes {}/{}, caption generator {}/{}",
            ld.embed_size, ld.rnn_size, cd.embed_size, cd.rnn_size
        )));
    }
    let e = cd.embed_size;
    let src_table = lm.params().value(lm.encoder().embedding());
    let mut table = cg.params().value(cg.encoder().embedding()).clone();
    for (row, token) in cg.vocab().tokens().iter().enumerate() {
        let src = lm
            .vocab()
            .index_of(token)
            .ok_or_else(|| Error::Config(format!("token {token:?} is missing from the language model vocabulary")))?;
        table.row_mut(row).copy_from_slice(&src_table.data()[src * e..(src + 1) * e]);
    }
    let emb = cg.encoder().embedding();
    cg.params_mut().set_value(emb, table)?;
    for (dst, src) in cg.encoder().gru_ids().into_iter().zip(lm.encoder().gru_ids()) {
        let value = lm.params().value(src).clone();
        cg.params_mut().set_value(dst, value)?;
    }
    let trainable = mode == TransferMode::FineTuned;
    for id in cg.encoder().param_ids() {
        cg.params_mut().set_trainable(id, trainable);
    }
    cg.transfer = TransferRecord {
        mode,
        source_hash: Some(sha256_hex(&encode_weights(lm.params()))),
    };
    Ok(cg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capgen::model::CaptionDims;
    use crate::nn::init::{InitMethod, InitSpec};
    use crate::nn::layers::Activation;
    use crate::text::{Sentence, Vocabulary};

    fn spec(seed: u64) -> InitSpec {
        InitSpec::new(InitMethod::XavierNormal, 1.0, seed).unwrap()
    }

    fn dims(e: usize, h: usize) -> CaptionDims {
        CaptionDims {
            embed_size: e,
            rnn_size: h,
            post_image_size: 3,
            feature_dim: 4,
            post_image_activation: Activation::Relu,
            normalize_image: false,
        }
    }

    fn lm_vocab() -> Vocabulary {
        Vocabulary::from_tokens(vec!["<edge>".into(), "<unk>".into(), "x".into(), "b".into(), "a".into()], 1).unwrap()
    }

    #[test]
    fn rows_follow_tokens() {
        let lm = LanguageModel::new(lm_vocab(), 3, 4, spec(1)).unwrap();
        let cap = Vocabulary::build(&[Sentence::from_words(&["a", "a", "b"])], 1);
        let cg = CaptionGenerator::new(cap.clone(), dims(3, 4), spec(2)).unwrap();
        let cg = transfer_prefix_params(&lm, cg, TransferMode::FineTuned).unwrap();
        let src = lm.params().value(lm.encoder().embedding());
        let dst = cg.params().value(cg.encoder().embedding());
        for (row, tok) in cap.tokens().iter().enumerate() {
            let s = lm.vocab().index_of(tok).unwrap();
            assert_eq!(dst.row(row), src.row(s), "{tok}");
        }
        for (d, s) in cg.encoder().gru_ids().into_iter().zip(lm.encoder().gru_ids()) {
            assert_eq!(cg.params().value(d), lm.params().value(s));
            assert!(cg.params().is_trainable(d));
        }
        assert!(cg.transfer_record().source_hash.is_some());
    }

    #[test]
    fn frozen_marks_prefix_untrainable_only() {
        let lm = LanguageModel::new(lm_vocab(), 3, 4, spec(1)).unwrap();
        let cap = Vocabulary::build(&[Sentence::from_words(&["a"])], 1);
        let fresh = CaptionGenerator::new(cap, dims(3, 4), spec(2)).unwrap();
        let cg = transfer_prefix_params(&lm, fresh.clone(), TransferMode::Frozen).unwrap();
        for id in cg.encoder().param_ids() {
            assert!(!cg.params().is_trainable(id));
        }
        for (ours, theirs) in [(cg.softmax_ids(), fresh.softmax_ids()), (cg.post_image_ids(), fresh.post_image_ids())] {
            assert!(cg.params().is_trainable(ours.0));
            assert_eq!(cg.params().value(ours.0), fresh.params().value(theirs.0));
        }
    }

    #[test]
    fn mismatch_errors() {
        let lm = LanguageModel::new(lm_vocab(), 3, 4, spec(1)).unwrap();
        let cap = Vocabulary::build(&[Sentence::from_words(&["a"])], 1);
        let cg = CaptionGenerator::new(cap, dims(3, 5), spec(2)).unwrap();
        assert!(matches!(transfer_prefix_params(&lm, cg, TransferMode::Frozen), Err(Error::Shape(_))));
        let cap = Vocabulary::build(&[Sentence::from_words(&["zebra"])], 1);
        let cg = CaptionGenerator::new(cap, dims(3, 4), spec(2)).unwrap();
        assert!(matches!(transfer_prefix_params(&lm, cg, TransferMode::Frozen), Err(Error::Config(_))));
        assert!(TransferSpec { mode: TransferMode::Frozen, source: None }.validate().is_err());
        assert_eq!("fine-tuned".parse::<TransferMode>().unwrap(), TransferMode::FineTuned);
    }
}
