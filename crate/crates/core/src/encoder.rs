//! Prefix encoder shared by the language model and the caption generator:
//! an embedding table followed by a GRU. These are the parameters that get
//! transferred.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::init::{init_tensor, InitSpec};
use crate::nn::layers::{dropout_mask, gru_backward, gru_forward, GruGrads, GruStepCache, GruWeights};
use crate::nn::{ParamId, ParamStore, Tensor};
use crate::rng::{hash_str, Rng};

pub const EMBEDDING: &str = "embedding";
pub const GRU_NAMES: [&str; 9] = [
    "gru.w_z", "gru.w_r", "gru.w_c", "gru.u_z", "gru.u_r", "gru.u_c", "gru.b_z", "gru.b_r", "gru.b_c",
];

/// Layer sizes of a prefix encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub embed_size: usize,
    pub rnn_size: usize,
}

/// Parameter handles for the prefix encoder. The embedding and the nine GRU
/// tensors occupy consecutive slots in the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefixEncoder {
    pub dims: EncoderDims,
    first: usize,
}

/// Forward activations of one sequence.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub steps: Vec<GruStepCache>,
    emb_masks: Vec<Option<Vec<f64>>>,
}

impl EncoderTrace {
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.steps.iter().map(|s| s.h.as_slice())
    }
}

/// Initialises a weight (biases are zero, everything else drawn from
/// `init` with a per-name stream).
pub fn init_weight(shape: &[usize], name: &str, init: &InitSpec) -> Result<Tensor> {
    init_tensor(shape, &init.derive(hash_str(name)))
}

impl PrefixEncoder {
    pub fn register(store: &mut ParamStore, dims: EncoderDims, init: &InitSpec) -> Result<Self> {
        let (v, e, h) = (dims.vocab_size, dims.embed_size, dims.rnn_size);
        if v == 0 || e == 0 || h == 0 {
            return Err(Error::InvalidShape(format!("encoder dims {dims:?}")));
        }
        let first = store.insert(EMBEDDING, init_weight(&[v, e], EMBEDDING, init)?)?.index();
        for (k, name) in GRU_NAMES.iter().enumerate() {
            let t = match k {
                0..=2 => init_weight(&[e, h], name, init)?,
                3..=5 => init_weight(&[h, h], name, init)?,
                _ => Tensor::zeros(&[h])?,
            };
            store.insert(name, t)?;
        }
        Ok(PrefixEncoder { dims, first })
    }

    /// Re-attaches to an existing store (after loading a checkpoint).
    pub fn attach(store: &ParamStore, dims: EncoderDims) -> Result<Self> {
        let first = store
            .id(EMBEDDING)
            .ok_or_else(|| Error::Config("store has no embedding".into()))?
            .index();
        for (k, name) in GRU_NAMES.iter().enumerate() {
            if store.id(name).map(ParamId::index) != Some(first + 1 + k) {
                return Err(Error::Config(format!("GRU parameter {name} missing or out of order")));
            }
        }
        let enc = PrefixEncoder { dims, first };
        let emb = store.value(enc.embedding());
        if emb.shape() != [dims.vocab_size, dims.embed_size] {
            return Err(Error::Shape(format!("embedding shape {:?} vs dims {dims:?}", emb.shape())));
        }
        GruWeights::from_tensors(std::array::from_fn(|k| &store.values()[first + 1 + k]))?;
        Ok(enc)
    }

    pub fn embedding(&self) -> ParamId {
        ParamId(self.first)
    }

    pub fn gru_ids(&self) -> [ParamId; 9] {
        std::array::from_fn(|k| ParamId(self.first + 1 + k))
    }

    /// Embedding followed by the GRU tensors.
    pub fn param_ids(&self) -> Vec<ParamId> {
        (self.first..self.first + 10).map(ParamId).collect()
    }

    pub fn gru_weights<'a>(&self, values: &'a [Tensor]) -> GruWeights<'a> {
        let t: [&Tensor; 9] = std::array::from_fn(|k| &values[self.first + 1 + k]);
        GruWeights::from_tensors(t).expect("encoder shapes validated at construction")
    }

    pub fn check_indices(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            Some(&t) => Err(Error::Index {
                index: t,
                len: self.dims.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed(&self, values: &[Tensor], token: usize) -> Vec<f64> {
        values[self.first].row(token).iter().map(|&v| v as f64).collect()
    }

    /// Runs the GRU over `tokens` from a zero state. With `dropout`, each
    /// embedded input is masked independently.
    pub fn forward(&self, values: &[Tensor], tokens: &[usize], dropout: Option<(f64, &mut Rng)>) -> EncoderTrace {
        let w = self.gru_weights(values);
        let mut h = vec![0.0; self.dims.rnn_size];
        let mut steps = Vec::with_capacity(tokens.len());
        let mut emb_masks = Vec::with_capacity(tokens.len());
        let mut dropout = dropout.filter(|(rate, _)| *rate > 0.0);
        for &t in tokens {
            let mut x = self.embed(values, t);
            let mask = dropout.as_mut().map(|(rate, rng)| {
                let m = dropout_mask(x.len(), *rate, rng);
                x.iter_mut().zip(&m).for_each(|(a, b)| *a *= b);
                m
            });
            emb_masks.push(mask);
            let cache = gru_forward(&w, x, h);
            h = cache.h.clone();
            steps.push(cache);
        }
        EncoderTrace { steps, emb_masks }
    }

    /// Final state after reading `tokens`.
    pub fn encode(&self, values: &[Tensor], tokens: &[usize]) -> Vec<f64> {
        let w = self.gru_weights(values);
        let mut h = vec![0.0; self.dims.rnn_size];
        for &t in tokens {
            h = gru_forward(&w, self.embed(values, t), h).h;
        }
        h
    }

    /// One incremental step from state `h`.
    pub fn step(&self, values: &[Tensor], h: &[f64], token: usize) -> Vec<f64> {
        let w = self.gru_weights(values);
        gru_forward(&w, self.embed(values, token), h.to_vec()).h
    }

    /// True when at least one encoder tensor is trainable.
    pub fn any_trainable(&self, store: &ParamStore) -> bool {
        self.param_ids().into_iter().any(|id| store.is_trainable(id))
    }

    /// Backpropagation through time. `d_states[t]` is the loss gradient with
    /// respect to the state emitted at step `t`. Gradients are accumulated
    /// only into trainable tensors.
    pub fn backward(
        &self,
        values: &[Tensor],
        grads: &mut [Tensor],
        trainable: &[bool],
        tokens: &[usize],
        trace: &EncoderTrace,
        d_states: &[Vec<f64>],
    ) {
        let emb_trainable = trainable[self.first];
        let gru_trainable = trainable[self.first + 1..self.first + 10].iter().any(|&t| t);
        if !emb_trainable && !gru_trainable {
            return;
        }
        let w = self.gru_weights(values);
        let (emb_grad, rest) = grads[self.first..self.first + 10].split_at_mut(1);
        let emb_grad = &mut emb_grad[0];
        let [gwz, gwr, gwc, guz, gur, guc, gbz, gbr, gbc] = rest else {
            unreachable!("ten consecutive encoder tensors")
        };
        let mut g = GruGrads {
            w_z: gwz.data_mut(),
            w_r: gwr.data_mut(),
            w_c: gwc.data_mut(),
            u_z: guz.data_mut(),
            u_r: gur.data_mut(),
            u_c: guc.data_mut(),
            b_z: gbz.data_mut(),
            b_r: gbr.data_mut(),
            b_c: gbc.data_mut(),
        };
        let e = self.dims.embed_size;
        let mut carry = vec![0.0; self.dims.rnn_size];
        let mut dx = vec![0.0; e];
        for t in (0..tokens.len()).rev() {
            let dh: Vec<f64> = carry.iter().zip(&d_states[t]).map(|(a, b)| a + b).collect();
            dx.iter_mut().for_each(|v| *v = 0.0);
            let grads_opt = if gru_trainable { Some(&mut g) } else { None };
            let dx_opt = if emb_trainable { Some(dx.as_mut_slice()) } else { None };
            carry = gru_backward(&w, &trace.steps[t], &dh, grads_opt, dx_opt);
            if emb_trainable {
                let row = emb_grad.row_mut(tokens[t]);
                match &trace.emb_masks[t] {
                    Some(mask) => {
                        for ((r, d), m) in row.iter_mut().zip(&dx).zip(mask) {
                            *r += (d * m) as f32;
                        }
                    }
                    None => {
                        for (r, d) in row.iter_mut().zip(&dx) {
                            *r += *d as f32;
                        }
                    }
                }
            }
        }
    }
}
