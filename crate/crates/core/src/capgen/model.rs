use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::{init_weight, EncoderDims, PrefixEncoder};
use crate::error::{Error, Result};
use crate::lm::{check_prefix, check_sequence, ScoredSentence};
use crate::nn::checkpoint::{load_into, write_weights, CONFIG_FILE, WEIGHTS_FILE};
use crate::nn::init::InitSpec;
use crate::nn::layers::{
    add_acc, affine_into, apply_activation, backprop_input_acc, dropout_mask, log_softmax, outer_acc,
    softmax_in_place, Activation,
};
use crate::nn::{ParamId, ParamStore, Tensor};
use crate::rng::Rng;
use crate::text::Vocabulary;
use crate::train::{DropoutRates, Trainable};

use super::transfer::{TransferMode, TransferRecord, TRANSFER_FILE};
use crate::lm::VOCAB_FILE;

/// Layer sizes and image-path options of a caption generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionDims {
    pub embed_size: usize,
    pub rnn_size: usize,
    pub post_image_size: usize,
    pub feature_dim: usize,
    pub post_image_activation: Activation,
    pub normalize_image: bool,
}

/// One training caption with its image's feature row.
#[derive(Debug, Clone)]
pub struct CaptionExample {
    pub features: Arc<[f32]>,
    pub tokens: Vec<usize>,
}

/// Merge architecture: the GRU state of the prefix and the projected image
/// vector are concatenated (`[prefix-state, post-image]`) before the softmax.
#[derive(Debug, Clone)]
pub struct CaptionGenerator {
    vocab: Vocabulary,
    dims: CaptionDims,
    encoder: PrefixEncoder,
    store: ParamStore,
    post_w: ParamId,
    post_b: ParamId,
    softmax_w: ParamId,
    softmax_b: ParamId,
    init: InitSpec,
    pub(crate) transfer: TransferRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CgCheckpointConfig {
    kind: String,
    vocab_size: usize,
    dims: CaptionDims,
    init: InitSpec,
    vocab_file: String,
    frozen: Vec<String>,
}

/// Image vector after optional L2 normalisation. The flag is set when
/// normalisation was requested but the vector is all zeros.
fn prepare_image(features: &[f32], normalize: bool) -> (Vec<f64>, bool) {
    let x: Vec<f64> = features.iter().map(|&v| v as f64).collect();
    if !normalize {
        return (x, false);
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!("image feature vector has zero norm; left unnormalised");
        return (x, true);
    }
    (x.iter().map(|v| v / norm).collect(), false)
}

impl CaptionGenerator {
    pub fn new(vocab: Vocabulary, dims: CaptionDims, init: InitSpec) -> Result<Self> {
        init.validate()?;
        if dims.post_image_size == 0 || dims.feature_dim == 0 {
            return Err(Error::InvalidShape(format!("caption generator dims {dims:?}")));
        }
        let v = vocab.len();
        let mut store = ParamStore::new();
        let encoder = PrefixEncoder::register(
            &mut store,
            EncoderDims {
                vocab_size: v,
                embed_size: dims.embed_size,
                rnn_size: dims.rnn_size,
            },
            &init,
        )?;
        let post_w = store.insert(
            "post_image.w",
            init_weight(&[dims.feature_dim, dims.post_image_size], "post_image.w", &init)?,
        )?;
        let post_b = store.insert("post_image.b", Tensor::zeros(&[dims.post_image_size])?)?;
        let width = dims.rnn_size + dims.post_image_size;
        let softmax_w = store.insert("softmax.w", init_weight(&[width, v], "softmax.w", &init)?)?;
        let softmax_b = store.insert("softmax.b", Tensor::zeros(&[v])?)?;
        Ok(CaptionGenerator {
            vocab,
            dims,
            encoder,
            store,
            post_w,
            post_b,
            softmax_w,
            softmax_b,
            init,
            transfer: TransferRecord::default(),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dims(&self) -> CaptionDims {
        self.dims
    }

    pub fn encoder(&self) -> &PrefixEncoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn transfer_mode(&self) -> TransferMode {
        self.transfer.mode
    }

    pub fn transfer_record(&self) -> &TransferRecord {
        &self.transfer
    }

    pub fn init_spec(&self) -> &InitSpec {
        &self.init
    }

    pub fn softmax_ids(&self) -> (ParamId, ParamId) {
        (self.softmax_w, self.softmax_b)
    }

    pub fn post_image_ids(&self) -> (ParamId, ParamId) {
        (self.post_w, self.post_b)
    }

    fn check_features(&self, features: &[f32]) -> Result<()> {
        if features.len() != self.dims.feature_dim {
            return Err(Error::Shape(format!(
                "image features have length {}, model expects {}",
                features.len(),
                self.dims.feature_dim
            )));
        }
        Ok(())
    }

    /// Post-image vector: optional normalisation, dense layer, activation.
    /// The flag reports a zero vector that could not be normalised.
    pub fn project_image_flagged(&self, features: &[f32]) -> Result<(Vec<f64>, bool)> {
        self.check_features(features)?;
        let (x, warned) = prepare_image(features, self.dims.normalize_image);
        let mut y = vec![0.0; self.dims.post_image_size];
        affine_into(
            &x,
            self.store.value(self.post_w).data(),
            Some(self.store.value(self.post_b).data()),
            &mut y,
        );
        apply_activation(&mut y, self.dims.post_image_activation);
        Ok((y, warned))
    }

    pub fn project_image(&self, features: &[f32]) -> Result<Vec<f64>> {
        Ok(self.project_image_flagged(features)?.0)
    }

    pub(crate) fn log_probs_from(&self, state: &[f64], post: &[f64]) -> Vec<f64> {
        let mut concat = Vec::with_capacity(state.len() + post.len());
        concat.extend_from_slice(state);
        concat.extend_from_slice(post);
        let mut z = vec![0.0; self.vocab.len()];
        affine_into(
            &concat,
            self.store.value(self.softmax_w).data(),
            Some(self.store.value(self.softmax_b).data()),
            &mut z,
        );
        log_softmax(&z)
    }

    pub(crate) fn step_state(&self, state: &[f64], token: usize) -> Vec<f64> {
        self.encoder.step(self.store.values(), state, token)
    }

    /// Distribution over the next token given the image and a prefix
    /// starting with EDGE.
    pub fn next_distribution(&self, features: &[f32], prefix: &[usize]) -> Result<Vec<f64>> {
        check_prefix(prefix, self.vocab.len())?;
        let post = self.project_image(features)?;
        let h = self.encoder.encode(self.store.values(), prefix);
        let mut p = self.log_probs_from(&h, &post);
        p.iter_mut().for_each(|v| *v = v.exp());
        Ok(p)
    }

    pub fn score(&self, features: &[f32], tokens: &[usize]) -> Result<ScoredSentence> {
        check_sequence(tokens, self.vocab.len())?;
        let post = self.project_image(features)?;
        let inputs = &tokens[..tokens.len() - 1];
        let targets = tokens[1..].to_vec();
        let trace = self.encoder.forward(self.store.values(), inputs, None);
        let log_probs = trace
            .states()
            .zip(&targets)
            .map(|(h, &t)| self.log_probs_from(h, &post)[t])
            .collect();
        Ok(ScoredSentence { targets, log_probs })
    }

    /// Summed caption NLL with its gradient accumulated into the store, no
    /// dropout.
    pub fn loss_and_grad(&mut self, features: &[f32], tokens: &[usize]) -> Result<f64> {
        check_sequence(tokens, self.vocab.len())?;
        self.check_features(features)?;
        let mut rng = Rng::new(0);
        Ok(self.accumulate_inner(features, tokens, &DropoutRates::default(), &mut rng).0)
    }

    fn accumulate_inner(
        &mut self,
        features: &[f32],
        tokens: &[usize],
        dropout: &DropoutRates,
        rng: &mut Rng,
    ) -> (f64, usize) {
        let dims = self.dims;
        let (pw, pb, sw, sb) = (
            self.post_w.index(),
            self.post_b.index(),
            self.softmax_w.index(),
            self.softmax_b.index(),
        );
        let encoder = self.encoder;
        let (values, grads, trainable) = self.store.grad_view();

        // Image path.
        let (mut x_img, _) = prepare_image(features, dims.normalize_image);
        if dropout.image > 0.0 {
            let m = dropout_mask(x_img.len(), dropout.image, rng);
            x_img.iter_mut().zip(&m).for_each(|(a, b)| *a *= b);
        }
        let p_dim = dims.post_image_size;
        let mut post = vec![0.0; p_dim];
        affine_into(&x_img, values[pw].data(), Some(values[pb].data()), &mut post);
        apply_activation(&mut post, dims.post_image_activation);
        let post_mask = (dropout.post_image > 0.0).then(|| dropout_mask(p_dim, dropout.post_image, rng));
        let post_out: Vec<f64> = match &post_mask {
            Some(m) => post.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => post.clone(),
        };

        // Prefix path.
        let inputs = &tokens[..tokens.len() - 1];
        let targets = &tokens[1..];
        let emb_drop = (dropout.embedding > 0.0).then_some((dropout.embedding, &mut *rng));
        let trace = encoder.forward(values, inputs, emb_drop);
        let h_dim = dims.rnn_size;
        let v = self.vocab.len();

        let mut loss = 0.0;
        let mut d_states = Vec::with_capacity(targets.len());
        let mut d_post = vec![0.0; p_dim];
        let mut concat = vec![0.0; h_dim + p_dim];
        concat[h_dim..].copy_from_slice(&post_out);
        let mut logits = vec![0.0; v];
        for (h, &target) in trace.states().zip(targets) {
            let mask = (dropout.rnn > 0.0).then(|| dropout_mask(h_dim, dropout.rnn, rng));
            match &mask {
                Some(m) => concat[..h_dim].iter_mut().zip(h.iter().zip(m)).for_each(|(c, (a, b))| *c = a * b),
                None => concat[..h_dim].copy_from_slice(h),
            }
            affine_into(&concat, values[sw].data(), Some(values[sb].data()), &mut logits);
            loss -= log_softmax(&logits)[target];
            let mut g = logits.clone();
            softmax_in_place(&mut g);
            g[target] -= 1.0;
            if trainable[sw] {
                outer_acc(&concat, &g, grads[sw].data_mut());
            }
            if trainable[sb] {
                add_acc(grads[sb].data_mut(), &g);
            }
            let mut d_concat = vec![0.0; h_dim + p_dim];
            backprop_input_acc(values[sw].data(), &g, &mut d_concat);
            let mut dh = d_concat[..h_dim].to_vec();
            if let Some(m) = &mask {
                dh.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
            }
            d_states.push(dh);
            d_post.iter_mut().zip(&d_concat[h_dim..]).for_each(|(a, b)| *a += b);
        }
        encoder.backward(values, grads, trainable, inputs, &trace, &d_states);

        if trainable[pw] || trainable[pb] {
            if let Some(m) = &post_mask {
                d_post.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
            }
            if dims.post_image_activation == Activation::Relu {
                d_post.iter_mut().zip(&post).for_each(|(d, &y)| {
                    if y <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            if trainable[pw] {
                outer_acc(&x_img, &d_post, grads[pw].data_mut());
            }
            if trainable[pb] {
                add_acc(grads[pb].data_mut(), &d_post);
            }
        }
        (loss, targets.len())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let frozen = self
            .store
            .ids()
            .filter(|&id| !self.store.is_trainable(id))
            .map(|id| self.store.name(id).to_string())
            .collect();
        let cfg = CgCheckpointConfig {
            kind: "caption-generator".into(),
            vocab_size: self.vocab.len(),
            dims: self.dims,
            init: self.init,
            vocab_file: VOCAB_FILE.into(),
            frozen,
        };
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(cfg_path, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let tr_path = dir.join(TRANSFER_FILE);
        std::fs::write(&tr_path, serde_json::to_string_pretty(&self.transfer)?).map_err(|e| Error::io(tr_path, e))?;
        write_weights(&dir.join(WEIGHTS_FILE), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: CgCheckpointConfig = serde_json::from_str(&text)?;
        if cfg.kind != "caption-generator" {
            return Err(Error::format(cfg_path, format!("checkpoint kind is {}", cfg.kind)));
        }
        let vocab = Vocabulary::load(&dir.join(&cfg.vocab_file))?;
        if vocab.len() != cfg.vocab_size {
            return Err(Error::format(cfg_path, "vocabulary size does not match config"));
        }
        let mut cg = CaptionGenerator::new(vocab, cfg.dims, cfg.init)?;
        load_into(&mut cg.store, &dir.join(WEIGHTS_FILE))?;
        for name in &cfg.frozen {
            let id = cg
                .store
                .id(name)
                .ok_or_else(|| Error::format(&cfg_path, format!("unknown frozen parameter {name}")))?;
            cg.store.set_trainable(id, false);
        }
        let tr_path = dir.join(TRANSFER_FILE);
        if tr_path.exists() {
            let text = std::fs::read_to_string(&tr_path).map_err(|e| Error::io(&tr_path, e))?;
            cg.transfer = serde_json::from_str(&text)?;
        }
        Ok(cg)
    }
}

impl Trainable for CaptionGenerator {
    type Example = CaptionExample;

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn accumulate(&mut self, ex: &CaptionExample, dropout: &DropoutRates, rng: &mut Rng) -> (f64, usize) {
        self.accumulate_inner(&ex.features, &ex.tokens, dropout, rng)
    }
}
