use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capgen::{CaptionDims, GenerationConfig};
use crate::error::{Error, Result};
use crate::hyperopt::HyperPoint;
use crate::nn::init::{InitMethod, InitSpec};
use crate::nn::layers::Activation;
use crate::nn::optim::{OptimizerConfig, OptimizerKind};
use crate::train::{DropoutRates, StopRule, TrainConfig};

fn default_max_epochs() -> usize {
    100
}

/// Language-model hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmHyperparams {
    pub init_method: InitMethod,
    pub max_init_weight: f64,
    pub embed_size: usize,
    pub rnn_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub embedding_dropout: f64,
    pub rnn_dropout: f64,
    pub max_grad_norm: f64,
    pub minibatch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

/// Caption-generator hyperparameters. `embed_size`, `rnn_size` and
/// `embedding_dropout` only matter without transfer; with transfer the
/// prefix sizes come from the language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapgenHyperparams {
    pub init_method: InitMethod,
    pub max_init_weight: f64,
    pub embed_size: usize,
    pub rnn_size: usize,
    pub post_image_size: usize,
    pub post_image_activation: Activation,
    pub normalize_image: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub embedding_dropout: f64,
    pub image_dropout: f64,
    pub post_image_dropout: f64,
    pub rnn_dropout: f64,
    pub max_grad_norm: f64,
    pub minibatch_size: usize,
    pub beam_width: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
}

fn init_method(name: &str) -> Result<InitMethod> {
    match name {
        "normal" => Ok(InitMethod::Normal),
        "xavier-normal" => Ok(InitMethod::XavierNormal),
        other => Err(Error::Config(format!("unknown init method {other}"))),
    }
}

fn optimizer(name: &str) -> Result<OptimizerKind> {
    match name {
        "adam" => Ok(OptimizerKind::Adam),
        "rmsprop" => Ok(OptimizerKind::RmsProp),
        "adadelta" => Ok(OptimizerKind::AdaDelta),
        other => Err(Error::Config(format!("unknown optimizer {other}"))),
    }
}

fn activation(name: &str) -> Result<Activation> {
    match name {
        "relu" => Ok(Activation::Relu),
        "none" => Ok(Activation::None),
        other => Err(Error::Config(format!("unknown activation {other}"))),
    }
}

/// Applies `f` to the point's value for `name` when the point has one.
fn set<T>(p: &HyperPoint, name: &str, slot: &mut T, f: impl Fn(&HyperPoint, &str) -> Result<T>) -> Result<()> {
    if p.0.contains_key(name) {
        *slot = f(p, name)?;
    }
    Ok(())
}

fn real(p: &HyperPoint, n: &str) -> Result<f64> {
    p.real(n)
}

fn size(p: &HyperPoint, n: &str) -> Result<usize> {
    p.usize(n)
}

pub(crate) fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A hyperparameter set that can be read from a JSON file and checked.
pub trait HyperparamSet: Sized + Clone {
    fn load_file(path: &Path) -> Result<Self>;
    fn check(&self) -> Result<()>;
}

impl HyperparamSet for LmHyperparams {
    fn load_file(path: &Path) -> Result<Self> {
        Self::load(path)
    }
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl HyperparamSet for CapgenHyperparams {
    fn load_file(path: &Path) -> Result<Self> {
        Self::load(path)
    }
    fn check(&self) -> Result<()> {
        self.validate()
    }
}

impl LmHyperparams {
    /// Small defaults suited to the synthetic task.
    pub fn desk() -> Self {
        LmHyperparams {
            init_method: InitMethod::XavierNormal,
            max_init_weight: 1.0,
            embed_size: 16,
            rnn_size: 32,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.003,
            weight_decay: 0.0,
            embedding_dropout: 0.0,
            rnn_dropout: 0.0,
            max_grad_norm: 5.0,
            minibatch_size: 20,
            max_epochs: 20,
        }
    }

    /// Copies every field named in `p` over `self`.
    pub fn with_point(&self, p: &HyperPoint) -> Result<Self> {
        let mut h = self.clone();
        set(p, "init_method", &mut h.init_method, |p, n| init_method(p.cat(n)?))?;
        set(p, "max_init_weight", &mut h.max_init_weight, real)?;
        set(p, "embed_size", &mut h.embed_size, size)?;
        set(p, "rnn_size", &mut h.rnn_size, size)?;
        set(p, "optimizer", &mut h.optimizer, |p, n| optimizer(p.cat(n)?))?;
        set(p, "learning_rate", &mut h.learning_rate, real)?;
        set(p, "weight_decay", &mut h.weight_decay, real)?;
        set(p, "embedding_dropout", &mut h.embedding_dropout, real)?;
        set(p, "rnn_dropout", &mut h.rnn_dropout, real)?;
        set(p, "max_grad_norm", &mut h.max_grad_norm, real)?;
        set(p, "minibatch_size", &mut h.minibatch_size, size)?;
        Ok(h)
    }

    pub fn init_spec(&self, seed: u64) -> Result<InitSpec> {
        InitSpec::new(self.init_method, self.max_init_weight, seed)
    }

    pub fn train_config(&self, seed: u64, stop_rule: StopRule) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                max_grad_norm: self.max_grad_norm,
            },
            dropout: DropoutRates {
                embedding: self.embedding_dropout,
                rnn: self.rnn_dropout,
                ..DropoutRates::default()
            },
            minibatch_size: self.minibatch_size,
            max_epochs: self.max_epochs,
            stop_rule,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.init_spec(0)?;
        self.train_config(0, StopRule::EarlyStopping).validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let h: Self = load_json(path)?;
        h.validate()?;
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

impl CapgenHyperparams {
    pub fn desk() -> Self {
        CapgenHyperparams {
            init_method: InitMethod::XavierNormal,
            max_init_weight: 1.0,
            embed_size: 16,
            rnn_size: 32,
            post_image_size: 32,
            post_image_activation: Activation::Relu,
            normalize_image: false,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.003,
            weight_decay: 0.0,
            embedding_dropout: 0.0,
            image_dropout: 0.0,
            post_image_dropout: 0.0,
            rnn_dropout: 0.0,
            max_grad_norm: 5.0,
            minibatch_size: 20,
            beam_width: 3,
            max_epochs: 20,
        }
    }

    pub fn with_point(&self, p: &HyperPoint) -> Result<Self> {
        let mut h = self.clone();
        set(p, "init_method", &mut h.init_method, |p, n| init_method(p.cat(n)?))?;
        set(p, "max_init_weight", &mut h.max_init_weight, real)?;
        set(p, "embed_size", &mut h.embed_size, size)?;
        set(p, "rnn_size", &mut h.rnn_size, size)?;
        set(p, "post_image_size", &mut h.post_image_size, size)?;
        set(p, "post_image_activation", &mut h.post_image_activation, |p, n| activation(p.cat(n)?))?;
        set(p, "normalize_image", &mut h.normalize_image, |p, n| p.flag(n))?;
        set(p, "optimizer", &mut h.optimizer, |p, n| optimizer(p.cat(n)?))?;
        set(p, "learning_rate", &mut h.learning_rate, real)?;
        set(p, "weight_decay", &mut h.weight_decay, real)?;
        set(p, "embedding_dropout", &mut h.embedding_dropout, real)?;
        set(p, "image_dropout", &mut h.image_dropout, real)?;
        set(p, "post_image_dropout", &mut h.post_image_dropout, real)?;
        set(p, "rnn_dropout", &mut h.rnn_dropout, real)?;
        set(p, "max_grad_norm", &mut h.max_grad_norm, real)?;
        set(p, "minibatch_size", &mut h.minibatch_size, size)?;
        set(p, "beam_width", &mut h.beam_width, size)?;
        Ok(h)
    }

    pub fn init_spec(&self, seed: u64) -> Result<InitSpec> {
        InitSpec::new(self.init_method, self.max_init_weight, seed)
    }

    /// Model dimensions; `prefix` overrides the embedding and RNN sizes
    /// (taken from a source language model).
    pub fn dims(&self, feature_dim: usize, prefix: Option<(usize, usize)>) -> CaptionDims {
        let (embed_size, rnn_size) = prefix.unwrap_or((self.embed_size, self.rnn_size));
        CaptionDims {
            embed_size,
            rnn_size,
            post_image_size: self.post_image_size,
            feature_dim,
            post_image_activation: self.post_image_activation,
            normalize_image: self.normalize_image,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            beam_width: self.beam_width,
            ..GenerationConfig::default()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                max_grad_norm: self.max_grad_norm,
            },
            dropout: DropoutRates {
                embedding: self.embedding_dropout,
                rnn: self.rnn_dropout,
                image: self.image_dropout,
                post_image: self.post_image_dropout,
            },
            minibatch_size: self.minibatch_size,
            max_epochs: self.max_epochs,
            stop_rule: StopRule::EarlyStopping,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.init_spec(0)?;
        self.generation().validate()?;
        self.train_config(0).validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let h: Self = load_json(path)?;
        h.validate()?;
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hyperopt::ParamSpace;
    use crate::rng::Rng;

    #[test]
    fn every_default_space_point_maps_to_valid_hyperparameters() {
        let mut r = Rng::new(2);
        for _ in 0..200 {
            let p = ParamSpace::language_model_default().random_point(&mut r);
            let h = LmHyperparams::desk().with_point(&p).unwrap();
            h.validate().unwrap();
            assert_eq!(h.embed_size, p.usize("embed_size").unwrap());
            let p = ParamSpace::caption_generator_default(true).random_point(&mut r);
            let h = CapgenHyperparams::desk().with_point(&p).unwrap();
            h.validate().unwrap();
            assert_eq!(h.beam_width, p.usize("beam_width").unwrap());
            assert_eq!(h.normalize_image, p.flag("normalize_image").unwrap());
        }
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cg.json");
        CapgenHyperparams::desk().save(&p).unwrap();
        assert_eq!(CapgenHyperparams::load(&p).unwrap(), CapgenHyperparams::desk());
    }
}
