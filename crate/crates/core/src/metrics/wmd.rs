use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::text::dataset::sidecar_path;
use crate::text::vocab::RESERVED;
use crate::text::{Sentence, Vocabulary};

use super::{MetricValue, ReferenceSet};

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"EMBT";

/// Word vectors of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbeddings {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<f32>,
}

impl WordEmbeddings {
    pub fn new(tokens: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 || values.len() != tokens.len() * dim {
            return Err(Error::Data(format!(
                "{} values for {} tokens of dim {dim}",
                values.len(),
                tokens.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite embedding value".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate embedding token {t:?}")));
            }
        }
        Ok(WordEmbeddings {
            dim,
            tokens,
            index,
            values,
        })
    }

    /// Content-token rows of an embedding table indexed by `vocab`.
    pub fn from_table(vocab: &Vocabulary, table: &Tensor) -> Result<Self> {
        if table.shape().len() != 2 || table.shape()[0] != vocab.len() {
            return Err(Error::Shape(format!(
                "embedding table {:?} for vocabulary of {}",
                table.shape(),
                vocab.len()
            )));
        }
        let dim = table.shape()[1];
        let values = table.data()[RESERVED * dim..].to_vec();
        Self::new(vocab.content_tokens().to_vec(), dim, values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.values.len() * 4);
        out.extend_from_slice(EMBEDDINGS_MAGIC);
        out.extend_from_slice(&(self.tokens.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Writes the binary rows and a JSON sidecar mapping token to row.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_string(&map)?).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..4] != EMBEDDINGS_MAGIC {
            return Err(Error::format(path, "missing EMBT header"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + n * dim * 4 {
            return Err(Error::format(path, format!("expected {n} rows of {dim} floats")));
        }
        let values = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let map: BTreeMap<String, usize> = serde_json::from_str(&text)?;
        let mut tokens = vec![None; n];
        for (t, i) in map {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(Error::format(&side, format!("bad or repeated row {i}"))),
            }
        }
        let tokens = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| Error::format(&side, format!("row {i} has no token"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens, dim, values).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Optimal flow between two bags of words. `flow[i][j]` is the mass moved
/// from `source[i]` to `target[j]`; rows sum to the source weights and
/// columns to the target weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
    pub flow: Vec<Vec<f64>>,
    pub cost: f64,
}

/// Distinct tokens present in `emb` with their counts, in first-seen order.
fn bag<'a>(s: &'a Sentence, emb: &WordEmbeddings) -> Vec<(&'a str, u64)> {
    let mut out: Vec<(&str, u64)> = Vec::new();
    for t in s.tokens() {
        if emb.get(t).is_none() {
            continue;
        }
        match out.iter_mut().find(|(w, _)| *w == t) {
            Some((_, c)) => *c += 1,
            None => out.push((t, 1)),
        }
    }
    out
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Exact min-cost transportation by successive shortest paths on integer
/// supplies. Returns the integer flow matrix.
fn min_cost_transport(supply: &[u64], demand: &[u64], cost: &[Vec<f64>]) -> Vec<Vec<u64>> {
    let (m, n) = (supply.len(), demand.len());
    let mut flow = vec![vec![0u64; n]; m];
    let mut left_s = supply.to_vec();
    let mut left_d = demand.to_vec();
    // Nodes: sources 0..m, sinks m..m+n. Paths start at a source with spare
    // supply and end at a sink with spare demand; backward arcs j -> i exist
    // where flow[i][j] > 0.
    loop {
        let total = m + n;
        let mut dist = vec![f64::INFINITY; total];
        let mut pred = vec![usize::MAX; total];
        for i in 0..m {
            if left_s[i] > 0 {
                dist[i] = 0.0;
            }
        }
        if dist.iter().all(|d| d.is_infinite()) {
            break;
        }
        // Bellman-Ford; the residual graph has no negative cycles.
        for _ in 0..total {
            let mut changed = false;
            for i in 0..m {
                if dist[i].is_finite() {
                    for j in 0..n {
                        let nd = dist[i] + cost[i][j];
                        if nd < dist[m + j] - 1e-12 {
                            dist[m + j] = nd;
                            pred[m + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..n {
                if dist[m + j].is_finite() {
                    for i in 0..m {
                        if flow[i][j] > 0 {
                            let nd = dist[m + j] - cost[i][j];
                            if nd < dist[i] - 1e-12 {
                                dist[i] = nd;
                                pred[i] = m + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let Some(end) = (0..n)
            .filter(|&j| left_d[j] > 0 && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]))
        else {
            break;
        };
        // Walk back to find the bottleneck.
        let mut amount = left_d[end];
        let mut node = m + end;
        loop {
            let p = pred[node];
            if node >= m {
                if p == usize::MAX {
                    break;
                }
                node = p;
            } else {
                if p == usize::MAX {
                    amount = amount.min(left_s[node]);
                    break;
                }
                amount = amount.min(flow[node][p - m]);
                node = p;
            }
        }
        let mut node = m + end;
        loop {
            let p = pred[node];
            if node >= m {
                flow[p][node - m] += amount;
                node = p;
            } else {
                if p == usize::MAX {
                    left_s[node] -= amount;
                    break;
                }
                flow[node][p - m] -= amount;
                node = p;
            }
        }
        left_d[end] -= amount;
    }
    flow
}

/// Word mover's distance with its optimal plan. Tokens missing from `emb`
/// are dropped first.
pub fn wmd_transport(a: &Sentence, b: &Sentence, emb: &WordEmbeddings) -> Result<TransportPlan> {
    let (ba, bb) = (bag(a, emb), bag(b, emb));
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedDistance(format!(
            "no embedded tokens in {:?} or {:?}",
            a.to_text(),
            b.to_text()
        )));
    }
    let la: u64 = ba.iter().map(|(_, c)| c).sum();
    let lb: u64 = bb.iter().map(|(_, c)| c).sum();
    let supply: Vec<u64> = ba.iter().map(|(_, c)| c * lb).collect();
    let demand: Vec<u64> = bb.iter().map(|(_, c)| c * la).collect();
    let cost: Vec<Vec<f64>> = ba
        .iter()
        .map(|(x, _)| bb.iter().map(|(y, _)| euclid(emb.get(x).unwrap(), emb.get(y).unwrap())).collect())
        .collect();
    let int_flow = min_cost_transport(&supply, &demand, &cost);
    let total = (la * lb) as f64;
    let flow: Vec<Vec<f64>> = int_flow
        .iter()
        .map(|row| row.iter().map(|&f| f as f64 / total).collect())
        .collect();
    let cost = flow
        .iter()
        .zip(&cost)
        .map(|(fr, cr)| fr.iter().zip(cr).map(|(f, c)| f * c).sum::<f64>())
        .sum();
    Ok(TransportPlan {
        source: ba.iter().map(|(t, _)| t.to_string()).collect(),
        target: bb.iter().map(|(t, _)| t.to_string()).collect(),
        source_weights: ba.iter().map(|(_, c)| *c as f64 / la as f64).collect(),
        target_weights: bb.iter().map(|(_, c)| *c as f64 / lb as f64).collect(),
        flow,
        cost,
    })
}

pub fn wmd_distance(a: &Sentence, b: &Sentence, emb: &WordEmbeddings) -> Result<f64> {
    Ok(wmd_transport(a, b, emb)?.cost)
}

/// Per-image similarity `exp(-min_r wmd(candidate, r))`. Images with no
/// defined distance to any reference are omitted.
pub fn wmd_similarity_per_image(
    candidates: &BTreeMap<String, Sentence>,
    refs: &ReferenceSet,
    emb: &WordEmbeddings,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (id, cand) in candidates {
        let rs = refs
            .get(id)
            .ok_or_else(|| Error::Data(format!("no references for image {id}")))?;
        let best = rs
            .iter()
            .filter_map(|r| wmd_distance(cand, r, emb).ok())
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            out.insert(id.clone(), (-best).exp());
        } else {
            log::warn!("image {id}: WMD undefined against every reference; skipped");
        }
    }
    Ok(out)
}

/// Mean per-image WMD similarity, counting skipped images.
pub fn wmd_similarity_report(
    candidates: &BTreeMap<String, Sentence>,
    refs: &ReferenceSet,
    emb: &WordEmbeddings,
) -> Result<MetricValue> {
    let per = wmd_similarity_per_image(candidates, refs, emb)?;
    if per.is_empty() {
        return Err(Error::UndefinedDistance("WMD undefined for every image".into()));
    }
    Ok(MetricValue {
        value: per.values().sum::<f64>() / per.len() as f64,
        n_images: per.len(),
        n_skipped: candidates.len() - per.len(),
    })
}
