use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::EDGE;

use super::model::CaptionGenerator;

pub const BEAM_WIDTH_RANGE: (usize, usize) = (1, 5);
pub const DEFAULT_MAX_LENGTH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub beam_width: usize,
    #[serde(default = "default_max_length")]
    pub max_length: usize,
}

fn default_max_length() -> usize {
    DEFAULT_MAX_LENGTH
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam_width: 3,
            max_length: DEFAULT_MAX_LENGTH,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = BEAM_WIDTH_RANGE;
        if !(lo..=hi).contains(&self.beam_width) {
            return Err(Error::Config(format!("beam width {} outside [{lo}, {hi}]", self.beam_width)));
        }
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be positive".into()));
        }
        Ok(())
    }
}

/// Incremental next-token model used by the decoders. The state after
/// consuming the leading EDGE comes from `initial`.
pub trait StepModel {
    type State: Clone;

    fn initial(&self) -> Self::State;
    fn log_probs(&self, state: &Self::State) -> Vec<f64>;
    fn advance(&self, state: &Self::State, token: usize) -> Self::State;
}

/// A decoded token sequence without the EDGE markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// False when the sequence hit `max_length` before emitting EDGE.
    pub complete: bool,
}

/// Higher score first; equal scores go to the lexicographically smaller
/// token sequence.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

fn best_of(hyps: Vec<Hypothesis>) -> Option<Hypothesis> {
    hyps.into_iter().min_by(|a, b| rank(a.log_prob, &a.tokens, b.log_prob, &b.tokens))
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode<M: StepModel>(model: &M, max_length: usize) -> Hypothesis {
    let mut state = model.initial();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < max_length {
        let lp = model.log_probs(&state);
        let t = argmax(&lp);
        log_prob += lp[t];
        if t == EDGE {
            return Hypothesis {
                tokens,
                log_prob,
                complete: true,
            };
        }
        state = model.advance(&state, t);
        tokens.push(t);
    }
    Hypothesis {
        tokens,
        log_prob,
        complete: false,
    }
}

struct Live<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
}

/// Beam search over summed log-probabilities without length normalisation.
/// The top `beam_width` expansions survive each step; expansions ending in
/// EDGE leave the beam as complete hypotheses. Search stops when no live
/// hypothesis can beat the best complete one, or at `max_length` tokens.
/// If the greedy path scores strictly higher than the beam result, the
/// greedy path is returned, so widening the beam never lowers the score.
pub fn beam_search<M: StepModel>(model: &M, gen: &GenerationConfig) -> Result<Hypothesis> {
    gen.validate()?;
    let greedy = greedy_decode(model, gen.max_length);
    if gen.beam_width == 1 {
        return Ok(greedy);
    }
    let found = beam_core(model, gen.beam_width, gen.max_length);
    Ok(if greedy.log_prob > found.log_prob { greedy } else { found })
}

fn beam_core<M: StepModel>(model: &M, width: usize, max_length: usize) -> Hypothesis {
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial(),
    }];
    let mut complete: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_length {
        // (parent, token, score)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (pi, hyp) in live.iter().enumerate() {
            let lp = model.log_probs(&hyp.state);
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (pi, t, hyp.score + l)));
        }
        let key = |c: &(usize, usize, f64)| {
            let mut seq = live[c.0].tokens.clone();
            seq.push(c.1);
            seq
        };
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| key(a).cmp(&key(b))));
        cands.truncate(width);
        let mut next = Vec::new();
        for (pi, t, score) in cands {
            let parent = &live[pi];
            if t == EDGE {
                complete.push(Hypothesis {
                    tokens: parent.tokens.clone(),
                    log_prob: score,
                    complete: true,
                });
            } else {
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                next.push(Live {
                    state: model.advance(&parent.state, t),
                    tokens,
                    score,
                });
            }
        }
        live = next;
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_done = complete.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }
    if let Some(best) = best_of(complete) {
        return best;
    }
    best_of(
        live.into_iter()
            .map(|h| Hypothesis {
                tokens: h.tokens,
                log_prob: h.score,
                complete: false,
            })
            .collect(),
    )
    .expect("beam keeps at least one hypothesis")
}

/// A caption generator conditioned on one image.
pub struct ImageDecoder<'a> {
    model: &'a CaptionGenerator,
    post: Vec<f64>,
}

impl<'a> ImageDecoder<'a> {
    pub fn new(model: &'a CaptionGenerator, features: &[f32]) -> Result<Self> {
        Ok(ImageDecoder {
            post: model.project_image(features)?,
            model,
        })
    }
}

impl StepModel for ImageDecoder<'_> {
    type State = Vec<f64>;

    fn initial(&self) -> Vec<f64> {
        let h0 = vec![0.0; self.model.dims().rnn_size];
        self.model.step_state(&h0, EDGE)
    }

    fn log_probs(&self, state: &Vec<f64>) -> Vec<f64> {
        self.model.log_probs_from(state, &self.post)
    }

    fn advance(&self, state: &Vec<f64>, token: usize) -> Vec<f64> {
        self.model.step_state(state, token)
    }
}

pub fn generate_caption(model: &CaptionGenerator, features: &[f32], gen: &GenerationConfig) -> Result<Hypothesis> {
    beam_search(&ImageDecoder::new(model, features)?, gen)
}
