use std::collections::{HashMap, HashSet};
use std::path::Path;

use super::preprocess::{Sentence, NUM_SERIALIZED, NUM_TOKEN};
use crate::error::{Error, Result};

pub const EDGE_TOKEN: &str = "<edge>";
pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const EDGE: usize = 0;
pub const UNKNOWN: usize = 1;
pub const RESERVED: usize = 2;
pub const DEFAULT_MIN_COUNT: usize = 5;

/// Token/index mapping. Indices 0 and 1 are the sentence-boundary and
/// unknown tokens; content tokens follow.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

/// Two vocabularies are equal when they map the same tokens to the same
/// indices; the count threshold they were built with is not compared.
impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Vocabulary {}

/// Occurrence counts per token, in first-seen order.
pub fn count_tokens<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Vec<(String, usize)> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut counts: Vec<(String, usize)> = Vec::new();
    for s in sentences {
        for t in s.tokens() {
            match index.get(t.as_str()) {
                Some(&i) => counts[i].1 += 1,
                None => {
                    index.insert(t.as_str(), counts.len());
                    counts.push((t.clone(), 1));
                }
            }
        }
    }
    counts
}

impl Vocabulary {
    fn from_content(content: Vec<String>, min_count: usize) -> Self {
        let mut tokens = vec![EDGE_TOKEN.to_string(), UNKNOWN_TOKEN.to_string()];
        tokens.extend(content);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            min_count,
        }
    }

    /// Keeps tokens occurring at least `min_count` times. Content tokens are
    /// ordered by descending count, ties broken lexicographically.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>, min_count: usize) -> Self {
        let mut kept: Vec<(String, usize)> = count_tokens(sentences)
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != EDGE_TOKEN && t != UNKNOWN_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_content(kept.into_iter().map(|(t, _)| t).collect(), min_count)
    }

    /// Content tokens present in both, in `caption_vocab` order.
    pub fn intersect(lm_vocab: &Vocabulary, caption_vocab: &Vocabulary) -> Result<Self> {
        let content: Vec<String> = caption_vocab
            .content_tokens()
            .iter()
            .filter(|t| lm_vocab.contains(t))
            .cloned()
            .collect();
        if content.is_empty() {
            return Err(Error::Config(
                "vocabulary intersection is empty; the caption generator cannot be trained".into(),
            ));
        }
        Ok(Self::from_content(content, caption_vocab.min_count.max(lm_vocab.min_count)))
    }

    /// Rebuilds from a token list whose first two entries are the reserved
    /// tokens.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < RESERVED || tokens[EDGE] != EDGE_TOKEN || tokens[UNKNOWN] != UNKNOWN_TOKEN {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let content = tokens[RESERVED..].to_vec();
        let unique: HashSet<&String> = content.iter().collect();
        if unique.len() != content.len() {
            return Err(Error::Data("duplicate token in vocabulary".into()));
        }
        Ok(Self::from_content(content, min_count))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-reserved tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - RESERVED
    }

    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// `[EDGE, tokens..., EDGE]`, with unknown words mapped to UNKNOWN.
    pub fn encode(&self, s: &Sentence) -> Vec<usize> {
        let mut out = Vec::with_capacity(s.len() + 2);
        out.push(EDGE);
        out.extend(s.tokens().iter().map(|t| self.index_of(t).unwrap_or(UNKNOWN)));
        out.push(EDGE);
        out
    }

    /// Inverse of [`Vocabulary::encode`]; boundary tokens are dropped.
    pub fn decode(&self, indices: &[usize]) -> Sentence {
        Sentence(
            indices
                .iter()
                .filter(|&&i| i != EDGE)
                .map(|&i| self.token(i).unwrap_or(UNKNOWN_TOKEN).to_string())
                .collect(),
        )
    }

    /// Distinct tokens of `sentences` that this vocabulary knows.
    pub fn known_types<'a>(&self, sentences: impl IntoIterator<Item = &'a Sentence>) -> usize {
        let mut seen = HashSet::new();
        for s in sentences {
            for t in s.tokens() {
                if self.contains(t) {
                    seen.insert(t.as_str());
                }
            }
        }
        seen.len()
    }

    pub fn to_json(&self) -> String {
        let v: Vec<&str> = self
            .tokens
            .iter()
            .map(|t| if t == NUM_TOKEN { NUM_SERIALIZED } else { t.as_str() })
            .collect();
        serde_json::to_string(&v).expect("string list serialises")
    }

    pub fn from_json(json: &str, min_count: usize) -> Result<Self> {
        let v: Vec<String> = serde_json::from_str(json)?;
        let tokens = v
            .into_iter()
            .map(|t| if t == NUM_SERIALIZED { NUM_TOKEN.to_string() } else { t })
            .collect();
        Self::from_tokens(tokens, min_count)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s, DEFAULT_MIN_COUNT)
    }
}

/// Number of distinct word types across `sentences`.
pub fn distinct_types<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> usize {
    count_tokens(sentences).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(spec: &[(&str, usize)]) -> Vec<Sentence> {
        spec.iter()
            .flat_map(|(w, n)| std::iter::repeat(Sentence::from_words(&[w])).take(*n))
            .collect()
    }

    #[test]
    fn min_count_boundary() {
        let v = Vocabulary::build(&corpus(&[("dog", 5), ("cat", 4)]), 5);
        assert!(v.contains("dog"));
        assert!(!v.contains("cat"));
        assert_eq!(v.index_of(EDGE_TOKEN), Some(EDGE));
        assert_eq!(v.index_of(UNKNOWN_TOKEN), Some(UNKNOWN));
    }

    #[test]
    fn empty_corpus_has_reserved_only() {
        let v = Vocabulary::build(&[], 5);
        assert_eq!(v.len(), 2);
        assert_eq!(v.content_len(), 0);
    }

    #[test]
    fn intersection_examples() {
        let a = Vocabulary::build(&corpus(&[("a", 1), ("dog", 1), ("run", 1)]), 1);
        let b = Vocabulary::build(&corpus(&[("a", 1), ("dog", 1), ("cat", 1)]), 1);
        let i = Vocabulary::intersect(&a, &b).unwrap();
        let mut content = i.content_tokens().to_vec();
        content.sort();
        assert_eq!(content, vec!["a", "dog"]);
        assert_eq!(i.len(), 4);
        let same = Vocabulary::intersect(&a, &a).unwrap();
        assert_eq!(same.content_tokens(), a.content_tokens());
        let c = Vocabulary::build(&corpus(&[("zebra", 1)]), 1);
        assert!(matches!(Vocabulary::intersect(&a, &c), Err(Error::Config(_))));
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(&corpus(&[("dog", 5)]), 5);
        let dog = v.index_of("dog").unwrap();
        assert_eq!(v.encode(&Sentence::from_words(&["dog"])), vec![EDGE, dog, EDGE]);
        assert_eq!(v.encode(&Sentence::from_words(&["zyzzyva"])), vec![EDGE, UNKNOWN, EDGE]);
        let s = Sentence::from_words(&["dog", "dog"]);
        assert_eq!(v.decode(&v.encode(&s)), s);
    }

    #[test]
    fn json_roundtrip_reserved_first() {
        let v = Vocabulary::build(&corpus(&[(NUM_TOKEN, 6), ("x", 5)]), 5);
        let json = v.to_json();
        assert!(json.starts_with(r#"["<edge>","<unk>""#));
        assert!(json.contains("<num>"));
        assert_eq!(Vocabulary::from_json(&json, 5).unwrap(), v);
        assert!(Vocabulary::from_json(r#"["a","b"]"#, 5).is_err());
    }

    proptest! {
        #[test]
        fn counts_match_naive_recount(words in proptest::collection::vec(0u8..12, 0..300), min in 1usize..6) {
            let sentences: Vec<Sentence> = words
                .chunks(7)
                .map(|c| Sentence(c.iter().map(|w| format!("w{w}")).collect()))
                .collect();
            let v = Vocabulary::build(&sentences, min);
            let mut naive = std::collections::BTreeMap::new();
            for w in &words {
                *naive.entry(format!("w{w}")).or_insert(0usize) += 1;
            }
            let expected: usize = naive.values().filter(|&&c| c >= min).count();
            prop_assert_eq!(v.content_len(), expected);
            for (w, c) in &naive {
                prop_assert_eq!(v.contains(w), *c >= min);
            }
            for s in &sentences {
                prop_assert!(v.encode(s).iter().all(|&i| i < v.len()));
            }
        }

        #[test]
        fn intersection_is_subset(a in proptest::collection::vec(0u8..20, 1..60), b in proptest::collection::vec(0u8..20, 1..60)) {
            let mk = |ws: &[u8]| Vocabulary::build(&[Sentence(ws.iter().map(|w| format!("w{w}")).collect())], 1);
            let (va, vb) = (mk(&a), mk(&b));
            if let Ok(i) = Vocabulary::intersect(&va, &vb) {
                prop_assert!(i.content_len() <= va.content_len().min(vb.content_len()));
                for t in i.content_tokens() {
                    prop_assert!(va.contains(t) && vb.contains(t));
                }
            }
        }
    }
}
