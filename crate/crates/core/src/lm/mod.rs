//! GRU language model: embedding, GRU, softmax over the full vocabulary.

pub mod perplexity;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use perplexity::{fair_perplexity_of, perplexity_of, unknown_type_count, PerplexityMode, ScoredSentence};

use crate::encoder::{init_weight, EncoderDims, PrefixEncoder};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_into, write_weights, CONFIG_FILE, WEIGHTS_FILE};
use crate::nn::init::InitSpec;
use crate::nn::layers::{
    affine_into, backprop_input_acc, dropout_mask, log_softmax, outer_acc, add_acc, softmax_in_place,
};
use crate::nn::{ParamId, ParamStore, Tensor};
use crate::rng::Rng;
use crate::text::vocab::{Vocabulary, EDGE};
use crate::train::{fit, DropoutRates, TrainConfig, TrainHistory, Trainable};

pub const VOCAB_FILE: &str = "vocab.json";
/// Layer-size bounds searched by the default tuning space.
pub const LAYER_SIZE_RANGE: (usize, usize) = (64, 512);

#[derive(Debug, Clone)]
pub struct LanguageModel {
    vocab: Vocabulary,
    encoder: PrefixEncoder,
    store: ParamStore,
    softmax_w: ParamId,
    softmax_b: ParamId,
    init: InitSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LmCheckpointConfig {
    kind: String,
    vocab_size: usize,
    embed_size: usize,
    rnn_size: usize,
    init: InitSpec,
    vocab_file: String,
}

/// Checks that `prefix` starts with EDGE and only holds indices below `v`.
pub(crate) fn check_prefix(prefix: &[usize], v: usize) -> Result<()> {
    if prefix.first() != Some(&EDGE) {
        return Err(Error::Argument("prefix must start with the EDGE token".into()));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= v) {
        return Err(Error::Index { index: bad, len: v });
    }
    Ok(())
}

/// Checks an encoded sentence used for scoring or training.
pub(crate) fn check_sequence(tokens: &[usize], v: usize) -> Result<()> {
    if tokens.len() < 2 {
        return Err(Error::Argument("encoded sentence needs at least two tokens".into()));
    }
    check_prefix(tokens, v)
}

impl LanguageModel {
    pub fn new(vocab: Vocabulary, embed_size: usize, rnn_size: usize, init: InitSpec) -> Result<Self> {
        init.validate()?;
        let mut store = ParamStore::new();
        let dims = EncoderDims {
            vocab_size: vocab.len(),
            embed_size,
            rnn_size,
        };
        let encoder = PrefixEncoder::register(&mut store, dims, &init)?;
        let softmax_w = store.insert("softmax.w", init_weight(&[rnn_size, vocab.len()], "softmax.w", &init)?)?;
        let softmax_b = store.insert("softmax.b", Tensor::zeros(&[vocab.len()])?)?;
        Ok(LanguageModel {
            vocab,
            encoder,
            store,
            softmax_w,
            softmax_b,
            init,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encoder(&self) -> &PrefixEncoder {
        &self.encoder
    }

    pub fn dims(&self) -> EncoderDims {
        self.encoder.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn init_spec(&self) -> &InitSpec {
        &self.init
    }

    pub fn softmax_ids(&self) -> (ParamId, ParamId) {
        (self.softmax_w, self.softmax_b)
    }

    fn logits(&self, state: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.vocab.len()];
        affine_into(
            state,
            self.store.value(self.softmax_w).data(),
            Some(self.store.value(self.softmax_b).data()),
            &mut z,
        );
        z
    }

    /// Distribution over the next token after `prefix` (which starts with
    /// EDGE).
    pub fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        check_prefix(prefix, self.vocab.len())?;
        let h = self.encoder.encode(self.store.values(), prefix);
        let mut z = self.logits(&h);
        softmax_in_place(&mut z);
        Ok(z)
    }

    /// Log-probability of each target of an encoded sentence
    /// (`[EDGE, w1, .., wn, EDGE]` yields n + 1 values).
    pub fn score(&self, tokens: &[usize]) -> Result<ScoredSentence> {
        check_sequence(tokens, self.vocab.len())?;
        let inputs = &tokens[..tokens.len() - 1];
        let targets = tokens[1..].to_vec();
        let trace = self.encoder.forward(self.store.values(), inputs, None);
        let log_probs = trace
            .states()
            .zip(&targets)
            .map(|(h, &t)| log_softmax(&self.logits(h))[t])
            .collect();
        Ok(ScoredSentence { targets, log_probs })
    }

    pub fn score_corpus(&self, corpus: &[Vec<usize>]) -> Result<Vec<ScoredSentence>> {
        corpus.iter().map(|s| self.score(s)).collect()
    }

    /// Summed negative log-likelihood of an encoded sentence plus its
    /// gradient, accumulated into the store. No dropout.
    pub fn loss_and_grad(&mut self, tokens: &[usize]) -> Result<f64> {
        check_sequence(tokens, self.vocab.len())?;
        let mut rng = Rng::new(0);
        Ok(self.accumulate_inner(tokens, &DropoutRates::default(), &mut rng).0)
    }

    fn accumulate_inner(&mut self, tokens: &[usize], dropout: &DropoutRates, rng: &mut Rng) -> (f64, usize) {
        let inputs = &tokens[..tokens.len() - 1];
        let targets = &tokens[1..];
        let (sw, sb) = (self.softmax_w.index(), self.softmax_b.index());
        let encoder = self.encoder;
        let (values, grads, trainable) = self.store.grad_view();
        let emb_drop = (dropout.embedding > 0.0).then_some((dropout.embedding, &mut *rng));
        let trace = encoder.forward(values, inputs, emb_drop);
        let h_dim = encoder.dims.rnn_size;
        let v = values[sw].cols();
        let mut d_states = Vec::with_capacity(targets.len());
        let mut loss = 0.0;
        let mut logits = vec![0.0; v];
        for (h, &target) in trace.states().zip(targets) {
            let mask = (dropout.rnn > 0.0).then(|| dropout_mask(h_dim, dropout.rnn, rng));
            let out: Vec<f64> = match &mask {
                Some(m) => h.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => h.to_vec(),
            };
            affine_into(&out, values[sw].data(), Some(values[sb].data()), &mut logits);
            let mut p = logits.clone();
            softmax_in_place(&mut p);
            loss -= log_softmax(&logits)[target];
            p[target] -= 1.0;
            if trainable[sw] {
                outer_acc(&out, &p, grads[sw].data_mut());
            }
            if trainable[sb] {
                add_acc(grads[sb].data_mut(), &p);
            }
            let mut d_out = vec![0.0; h_dim];
            backprop_input_acc(values[sw].data(), &p, &mut d_out);
            if let Some(m) = &mask {
                d_out.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
            }
            d_states.push(d_out);
        }
        encoder.backward(values, grads, trainable, inputs, &trace, &d_states);
        (loss, targets.len())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dims = self.dims();
        let cfg = LmCheckpointConfig {
            kind: "language-model".into(),
            vocab_size: dims.vocab_size,
            embed_size: dims.embed_size,
            rnn_size: dims.rnn_size,
            init: self.init,
            vocab_file: VOCAB_FILE.into(),
        };
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(cfg_path, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        write_weights(&dir.join(WEIGHTS_FILE), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: LmCheckpointConfig = serde_json::from_str(&text)?;
        if cfg.kind != "language-model" {
            return Err(Error::format(cfg_path, format!("checkpoint kind is {}", cfg.kind)));
        }
        let vocab = Vocabulary::load(&dir.join(&cfg.vocab_file))?;
        if vocab.len() != cfg.vocab_size {
            return Err(Error::format(cfg_path, "vocabulary size does not match config"));
        }
        let mut lm = LanguageModel::new(vocab, cfg.embed_size, cfg.rnn_size, cfg.init)?;
        load_into(&mut lm.store, &dir.join(WEIGHTS_FILE))?;
        Ok(lm)
    }
}

impl Trainable for LanguageModel {
    type Example = Vec<usize>;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn accumulate(&mut self, example: &Vec<usize>, dropout: &DropoutRates, rng: &mut Rng) -> (f64, usize) {
        self.accumulate_inner(example, dropout, rng)
    }
}

/// Token-level perplexity of `model` on encoded sentences.
pub fn perplexity_geometric(model: &LanguageModel, corpus: &[Vec<usize>]) -> Result<f64> {
    perplexity_of(&model.score_corpus(corpus)?, PerplexityMode::Token)
}

/// Perplexity with the unknown-token correction, taking the model's content
/// vocabulary size as the number of known types.
pub fn fair_perplexity(model: &LanguageModel, corpus: &[Vec<usize>], eval_vocab_types: usize) -> Result<f64> {
    fair_perplexity_with_known(model, corpus, eval_vocab_types, model.vocab().content_len())
}

pub fn fair_perplexity_with_known(
    model: &LanguageModel,
    corpus: &[Vec<usize>],
    eval_vocab_types: usize,
    known_types: usize,
) -> Result<f64> {
    let u = unknown_type_count(eval_vocab_types, known_types)?;
    fair_perplexity_of(&model.score_corpus(corpus)?, u)
}

/// Trains with the configured stopping rule, validating on `val` with
/// token-level perplexity.
pub fn train_lm(
    model: &mut LanguageModel,
    train: &[Vec<usize>],
    val: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let v = model.vocab().len();
    for s in train.iter().chain(val) {
        check_sequence(s, v)?;
    }
    if val.is_empty() {
        return Err(Error::EmptyData("validation corpus is empty".into()));
    }
    fit(model, train, config, |m: &LanguageModel| perplexity_geometric(m, val))
}
