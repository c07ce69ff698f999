//! Minibatch training loop shared by the language model and the caption
//! generator, with the epoch-level stopping rules.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::check_dropout_rate;
use crate::nn::optim::{clip_trainable, optimizer_step, OptimizerConfig, OptimizerState};
use crate::nn::ParamStore;
use crate::rng::Rng;

pub const MINIBATCH_RANGE: (usize, usize) = (10, 300);

/// Dropout rates at the four sites. The language model only uses
/// `embedding` and `rnn`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutRates {
    pub embedding: f64,
    pub rnn: f64,
    pub image: f64,
    pub post_image: f64,
}

impl DropoutRates {
    pub fn validate(&self) -> Result<()> {
        for r in [self.embedding, self.rnn, self.image, self.post_image] {
            check_dropout_rate(r)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Run every epoch.
    None,
    /// Stop at the first epoch whose validation perplexity is worse than the
    /// previous epoch's, and restore the previous epoch's weights.
    #[default]
    EarlyStopping,
    /// Stop as soon as validation perplexity fails to strictly improve on
    /// the previous epoch or on the untrained model, and restore the
    /// previous epoch's weights.
    RequireImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub dropout: DropoutRates,
    pub minibatch_size: usize,
    pub max_epochs: usize,
    #[serde(default)]
    pub stop_rule: StopRule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.dropout.validate()?;
        let (lo, hi) = MINIBATCH_RANGE;
        if !(lo..=hi).contains(&self.minibatch_size) {
            return Err(Error::Config(format!(
                "minibatch size {} outside [{lo}, {hi}]",
                self.minibatch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_perplexity: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation perplexity of the untrained model, when measured.
    pub initial_val_perplexity: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// Last epoch that ran (0 when nothing ran).
    pub stopped_at: usize,
    /// Epoch whose weights the model holds on return (0 = untouched).
    pub selected_epoch: usize,
    /// Early stopping fired and weights were rolled back.
    pub early_stopped: bool,
    /// Under [`StopRule::RequireImprovement`], an epoch failed to improve.
    pub improvement_violated: bool,
}

impl TrainHistory {
    pub fn val_perplexities(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_perplexity).collect()
    }

    /// Validation perplexity of the weights the model holds.
    pub fn selected_val_perplexity(&self) -> Option<f64> {
        match self.selected_epoch {
            0 => self.initial_val_perplexity,
            n => self.epochs.get(n - 1).map(|e| e.val_perplexity),
        }
    }

    /// `epoch,train_loss,val_perplexity,wall_seconds`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_perplexity", "wall_seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.9}", e.train_loss),
                format!("{:.9}", e.val_perplexity),
                format!("{:.3}", e.wall_seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A model that can accumulate gradients example by example.
pub trait Trainable {
    type Example;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Adds the gradient of the summed next-token cross-entropy on `example`
    /// to the store's accumulators. Returns `(loss, predicted positions)`.
    fn accumulate(&mut self, example: &Self::Example, dropout: &DropoutRates, rng: &mut Rng) -> (f64, usize);
}

/// Trains `model` on `examples`. `validate` returns the validation
/// perplexity of the current weights and is called once per epoch.
pub fn fit<M, V>(model: &mut M, examples: &[M::Example], config: &TrainConfig, mut validate: V) -> Result<TrainHistory>
where
    M: Trainable,
    V: FnMut(&M) -> Result<f64>,
{
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyData("no training examples".into()));
    }
    let mut history = TrainHistory::default();
    if config.max_epochs == 0 {
        return Ok(history);
    }
    let mut opt = OptimizerState::new(config.optimizer, model.store())?;
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut prev_val = None;
    if config.stop_rule == StopRule::RequireImprovement {
        let v = validate(model)?;
        history.initial_val_perplexity = Some(v);
        prev_val = Some(v);
    }
    let mut prev_weights: Option<Vec<crate::nn::Tensor>> = None;
    if config.stop_rule == StopRule::RequireImprovement {
        prev_weights = Some(model.store().snapshot());
    }

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        rng.shuffle(&mut order);
        let mut total_loss = 0.0;
        let mut positions = 0usize;
        for batch in order.chunks(config.minibatch_size) {
            model.store_mut().zero_grads();
            for &i in batch {
                let (loss, n) = model.accumulate(&examples[i], &config.dropout, &mut rng);
                total_loss += loss;
                positions += n;
            }
            clip_trainable(model.store_mut(), config.optimizer.max_grad_norm);
            optimizer_step(model.store_mut(), &mut opt)?;
        }
        if !total_loss.is_finite() || !model.store().values().iter().all(|t| t.all_finite()) {
            return Err(Error::Data(format!("training diverged in epoch {epoch}")));
        }
        let val = validate(model)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total_loss / positions.max(1) as f64,
            val_perplexity: val,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        history.stopped_at = epoch;
        history.selected_epoch = epoch;
        match (config.stop_rule, prev_val) {
            (StopRule::EarlyStopping, Some(p)) if val > p => {
                if let Some(w) = prev_weights.take() {
                    model.store_mut().restore(&w);
                }
                history.selected_epoch = epoch - 1;
                history.early_stopped = true;
                break;
            }
            (StopRule::RequireImprovement, Some(p)) if val >= p || val.is_nan() => {
                if let Some(w) = prev_weights.take() {
                    model.store_mut().restore(&w);
                }
                history.selected_epoch = epoch - 1;
                history.improvement_violated = true;
                break;
            }
            _ => {}
        }
        prev_val = Some(val);
        if config.stop_rule != StopRule::None {
            prev_weights = Some(model.store().snapshot());
        }
    }
    model.store_mut().zero_grads();
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::OptimizerKind;
    use crate::nn::Tensor;

    /// One scalar parameter; every example pulls it towards 0 and the
    /// validation perplexity is scripted.
    struct Toy {
        store: ParamStore,
    }

    impl Trainable for Toy {
        type Example = ();
        fn store(&self) -> &ParamStore {
            &self.store
        }
        fn store_mut(&mut self) -> &mut ParamStore {
            &mut self.store
        }
        fn accumulate(&mut self, _: &(), _: &DropoutRates, _: &mut Rng) -> (f64, usize) {
            let w = self.store.values()[0].data()[0];
            self.store.grads_mut()[0].data_mut()[0] += 2.0 * w;
            ((w * w) as f64, 1)
        }
    }

    fn toy() -> Toy {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        Toy { store }
    }

    fn config(max_epochs: usize, stop_rule: StopRule) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 0.01,
                weight_decay: 0.0,
                max_grad_norm: 10.0,
            },
            dropout: DropoutRates::default(),
            minibatch_size: 10,
            max_epochs,
            stop_rule,
            seed: 3,
        }
    }

    #[test]
    fn early_stopping_restores_previous_epoch() {
        let mut m = toy();
        let script = [10.0, 8.0, 9.0, 7.0];
        let mut weights_seen = Vec::new();
        let mut calls = 0;
        let h = fit(&mut m, &[(); 20], &config(10, StopRule::EarlyStopping), |m: &Toy| {
            weights_seen.push(m.store.values()[0].data()[0]);
            calls += 1;
            Ok(script[calls - 1])
        })
        .unwrap();
        assert_eq!(h.stopped_at, 3);
        assert_eq!(h.selected_epoch, 2);
        assert!(h.early_stopped);
        assert_eq!(h.val_perplexities(), vec![10.0, 8.0, 9.0]);
        assert_eq!(m.store.values()[0].data()[0], weights_seen[1]);
        assert_ne!(m.store.values()[0].data()[0], weights_seen[2]);
    }

    #[test]
    fn equal_perplexity_does_not_stop() {
        let mut m = toy();
        let h = fit(&mut m, &[(); 5], &config(3, StopRule::EarlyStopping), |_| Ok(5.0)).unwrap();
        assert_eq!(h.stopped_at, 3);
        assert!(!h.early_stopped);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = toy();
        let h = fit(&mut m, &[(); 5], &config(0, StopRule::EarlyStopping), |_| Ok(1.0)).unwrap();
        assert_eq!(h.stopped_at, 0);
        assert_eq!(m.store.values()[0].data()[0], 1.0);
    }

    #[test]
    fn require_improvement_flags_violation() {
        let mut m = toy();
        let script = [20.0, 10.0, 8.0, 8.0];
        let mut i = 0;
        let h = fit(&mut m, &[(); 5], &config(6, StopRule::RequireImprovement), |_| {
            i += 1;
            Ok(script[i - 1])
        })
        .unwrap();
        assert!(h.improvement_violated);
        assert_eq!(h.stopped_at, 3);
        assert_eq!(h.selected_epoch, 2);
        assert_eq!(h.initial_val_perplexity, Some(20.0));
        assert_eq!(h.selected_val_perplexity(), Some(8.0));
    }

    #[test]
    fn empty_examples_and_bad_config_rejected() {
        let mut m = toy();
        assert!(matches!(
            fit(&mut m, &[], &config(1, StopRule::None), |_| Ok(1.0)),
            Err(Error::EmptyData(_))
        ));
        let mut bad = config(1, StopRule::None);
        bad.minibatch_size = 5;
        assert!(matches!(fit(&mut m, &[()], &bad, |_| Ok(1.0)), Err(Error::Config(_))));
    }
}
