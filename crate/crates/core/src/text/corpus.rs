use std::path::Path;

use serde::{Deserialize, Serialize};

use super::preprocess::{preprocess_lines, Sentence};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sentence count that a size multiple of 10^0 corresponds to.
pub const BASE_CORPUS_SIZE: usize = 30_000;
pub const MAX_SENTENCE_TOKENS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    SameCaptions,
    DifferentCaptions,
    GeneralText,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub source: CorpusSource,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, source: CorpusSource) -> Self {
        Corpus { sentences, source }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Reads UTF-8 text, one sentence per line, and preprocesses it.
    pub fn read_text(path: &Path, source: CorpusSource) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (sentences, _) = preprocess_lines(text.lines());
        Ok(Corpus { sentences, source })
    }

    /// Reads a JSONL file of token arrays (the `preprocess` output format).
    pub fn read_jsonl(path: &Path, source: CorpusSource) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut sentences = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Sentence = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            sentences.push(s);
        }
        Ok(Corpus { sentences, source })
    }

    /// Reads `.jsonl` as token arrays and anything else as raw text.
    pub fn read(path: &Path, source: CorpusSource) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "jsonl") {
            Self::read_jsonl(path, source)
        } else {
            Self::read_text(path, source)
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Drops sentences longer than `max_tokens`, keeping order.
pub fn filter_by_length(corpus: &Corpus, max_tokens: usize) -> Corpus {
    Corpus {
        sentences: corpus
            .sentences
            .iter()
            .filter(|s| s.len() <= max_tokens)
            .cloned()
            .collect(),
        source: corpus.source,
    }
}

/// `round(10^x * base)`.
pub fn subsample_size(exponent: f64, base: usize) -> usize {
    (10f64.powf(exponent) * base as f64).round() as usize
}

/// Uniform sample without replacement of `round(10^x * base)` sentences;
/// sampled sentences keep their corpus order.
pub fn subsample_corpus(corpus: &Corpus, exponent: f64, base: usize, seed: u64) -> Result<Corpus> {
    let k = subsample_size(exponent, base);
    if k > corpus.len() {
        return Err(Error::Size {
            requested: k,
            available: corpus.len(),
        });
    }
    let mut rng = Rng::new(seed);
    let picked = rng.sample_indices(corpus.len(), k);
    Ok(Corpus {
        sentences: picked.into_iter().map(|i| corpus.sentences[i].clone()).collect(),
        source: corpus.source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numbered(n: usize) -> Corpus {
        Corpus::new(
            (0..n).map(|i| Sentence(vec![format!("s{i}")])).collect(),
            CorpusSource::Other,
        )
    }

    #[test]
    fn paper_sizes() {
        let got: Vec<usize> = [-1.0, -0.5, 0.0, 0.5, 1.0]
            .iter()
            .map(|&x| subsample_size(x, BASE_CORPUS_SIZE))
            .collect();
        assert_eq!(got, vec![3000, 9487, 30000, 94868, 300000]);
    }

    #[test]
    fn length_filter_boundary() {
        let mk = |n: usize| Sentence(vec!["w".to_string(); n]);
        let c = Corpus::new(vec![mk(50), mk(51), mk(3)], CorpusSource::GeneralText);
        let f = filter_by_length(&c, MAX_SENTENCE_TOKENS);
        assert_eq!(f.sentences, vec![mk(50), mk(3)]);
        assert!(filter_by_length(&Corpus::new(vec![], CorpusSource::Other), 50).is_empty());
    }

    #[test]
    fn subsample_deterministic_and_sized() {
        let c = numbered(5000);
        let a = subsample_corpus(&c, -1.0, 30_000, 4).unwrap();
        let b = subsample_corpus(&c, -1.0, 30_000, 4).unwrap();
        assert_eq!(a.len(), 3000);
        assert_eq!(a, b);
        let d = subsample_corpus(&c, -1.0, 30_000, 5).unwrap();
        assert_ne!(a, d);
        let mut uniq = a.sentences.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 3000);
        assert!(matches!(
            subsample_corpus(&c, 0.0, 30_000, 1),
            Err(Error::Size { requested: 30000, available: 5000 })
        ));
    }
}
