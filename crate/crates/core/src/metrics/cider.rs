use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::text::Sentence;

use super::{MetricValue, ReferenceSet};

pub const MAX_N: usize = 4;
const SCALE: f64 = 10.0;

type Ngram<'a> = &'a [String];

fn ngram_counts(s: &Sentence, n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut m = BTreeMap::new();
    for g in s.tokens().windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Document frequencies per n: the number of images whose references
/// contain each n-gram.
struct Idf<'a> {
    df: Vec<BTreeMap<Ngram<'a>, usize>>,
    log_n: f64,
}

impl<'a> Idf<'a> {
    fn new(refs: &'a ReferenceSet) -> Self {
        let mut df = vec![BTreeMap::new(); MAX_N];
        for sentences in refs.iter().map(|(_, s)| s) {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: BTreeMap<Ngram<'a>, ()> = BTreeMap::new();
                for s in sentences {
                    for g in s.tokens().windows(n + 1) {
                        seen.insert(g, ());
                    }
                }
                for g in seen.into_keys() {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        Idf {
            df,
            log_n: (refs.len().max(1) as f64).ln(),
        }
    }

    fn idf(&self, n: usize, g: Ngram<'_>) -> f64 {
        let df = self.df[n - 1].get(g).copied().unwrap_or(0).max(1);
        self.log_n - (df as f64).ln()
    }

    /// TF-IDF vector with term frequency normalised by the n-gram count.
    fn vector<'s>(&self, s: &'s Sentence, n: usize) -> BTreeMap<Ngram<'s>, f64> {
        let counts = ngram_counts(s, n);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .map(|(g, c)| (g, c as f64 / total as f64 * self.idf(n, g)))
            .collect()
    }
}

fn cosine(a: &BTreeMap<Ngram<'_>, f64>, b: &BTreeMap<Ngram<'_>, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

fn image_score(idf: &Idf<'_>, cand: &Sentence, refs: &[Sentence]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 1..=MAX_N {
        let c = idf.vector(cand, n);
        let mean: f64 = refs.iter().map(|r| cosine(&c, &idf.vector(r, n))).sum::<f64>() / refs.len() as f64;
        total += mean / MAX_N as f64;
    }
    SCALE * total
}

/// Per-image CIDEr scores, keyed like `candidates`.
pub fn cider_per_image(candidates: &BTreeMap<String, Sentence>, refs: &ReferenceSet) -> Result<BTreeMap<String, f64>> {
    let idf = Idf::new(refs);
    candidates
        .iter()
        .map(|(id, cand)| {
            let r = refs
                .get(id)
                .ok_or_else(|| Error::Data(format!("no references for image {id}")))?;
            Ok((id.clone(), image_score(&idf, cand, r)))
        })
        .collect()
}

/// Corpus CIDEr: mean of the per-image scores.
pub fn cider_score(candidates: &BTreeMap<String, Sentence>, refs: &ReferenceSet) -> Result<MetricValue> {
    if candidates.is_empty() {
        return Err(Error::EmptyData("no candidate captions".into()));
    }
    let per = cider_per_image(candidates, refs)?;
    Ok(MetricValue {
        value: per.values().sum::<f64>() / per.len() as f64,
        n_images: per.len(),
        n_skipped: 0,
    })
}
