use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::vocab::UNKNOWN;

/// Target indices of one sentence with the model's log-probability of each.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSentence {
    pub targets: Vec<usize>,
    pub log_probs: Vec<f64>,
}

/// How per-position log-probabilities are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerplexityMode {
    /// `exp` of the mean negative log-probability over all predicted positions.
    #[default]
    Token,
    /// Geometric mean of the per-sentence perplexities.
    Sentence,
}

fn check_nonempty(scored: &[ScoredSentence]) -> Result<()> {
    if scored.iter().all(|s| s.log_probs.is_empty()) {
        return Err(Error::EmptyData("no positions to score".into()));
    }
    Ok(())
}

/// Perplexity from scored sentences. Any zero-probability position yields
/// `+inf`, never NaN.
pub fn perplexity_of(scored: &[ScoredSentence], mode: PerplexityMode) -> Result<f64> {
    check_nonempty(scored)?;
    if scored.iter().any(|s| s.log_probs.iter().any(|&l| l == f64::NEG_INFINITY)) {
        return Ok(f64::INFINITY);
    }
    let mean_nll = match mode {
        PerplexityMode::Token => {
            let n: usize = scored.iter().map(|s| s.log_probs.len()).sum();
            -scored.iter().flat_map(|s| s.log_probs.iter()).sum::<f64>() / n as f64
        }
        PerplexityMode::Sentence => {
            let per: Vec<f64> = scored
                .iter()
                .filter(|s| !s.log_probs.is_empty())
                .map(|s| -s.log_probs.iter().sum::<f64>() / s.log_probs.len() as f64)
                .collect();
            per.iter().sum::<f64>() / per.len() as f64
        }
    };
    Ok(mean_nll.exp())
}

/// Number of word types the unknown token stands for:
/// `eval_vocab_types - known_types`.
pub fn unknown_type_count(eval_vocab_types: usize, known_types: usize) -> Result<usize> {
    eval_vocab_types.checked_sub(known_types).ok_or_else(|| {
        Error::Argument(format!(
            "corpus has {eval_vocab_types} word types but the model knows {known_types}"
        ))
    })
}

/// Token-level perplexity where each UNKNOWN target's probability `p` is
/// replaced by `p / unknown_types`. With `unknown_types == 0` this is
/// exactly the plain token-level perplexity.
pub fn fair_perplexity_of(scored: &[ScoredSentence], unknown_types: usize) -> Result<f64> {
    if unknown_types == 0 {
        return perplexity_of(scored, PerplexityMode::Token);
    }
    check_nonempty(scored)?;
    let penalty = (unknown_types as f64).ln();
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in scored {
        for (&t, &lp) in s.targets.iter().zip(&s.log_probs) {
            if lp == f64::NEG_INFINITY {
                return Ok(f64::INFINITY);
            }
            sum += if t == UNKNOWN { lp - penalty } else { lp };
            n += 1;
        }
    }
    Ok((-sum / n as f64).exp())
}
