//! Templated synthetic captioning task for desk-scale runs: each image has
//! four latent attributes (colour, object, action, place), its feature
//! vector carries noisy one-hot codes of them, and its captions are drawn
//! from templates mentioning them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_seed, Rng};
use crate::text::preprocess::NUM_SERIALIZED;
use crate::text::{CaptionDataset, CaptionItem, Corpus, CorpusSource, ImageFeatures, Sentence, Split};

const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
const OBJECTS: [&str; 8] = ["dog", "cat", "bird", "horse", "car", "boy", "girl", "ball"];
const ACTIONS: [&str; 6] = ["running", "sitting", "jumping", "sleeping", "playing", "standing"];
const PLACES: [&str; 6] = ["park", "beach", "street", "field", "garden", "snow"];

const CAPTION_TEMPLATES: [&str; 6] = [
    "a {c} {o} is {a} in the {p}",
    "the {c} {o} {a} near the {p}",
    "a {o} {a} in the {p}",
    "there is a {c} {o} in the {p}",
    "a {c} {o} {a}",
    "the {o} is {a} at the {p}",
];

/// Same domain, different phrasing and a few extra words.
const OTHER_CAPTION_TEMPLATES: [&str; 5] = [
    "a {c} {o} {a} on the {p}",
    "one {o} {a} by the {p}",
    "this {c} {o} is {a}",
    "a small {c} {o} near a {p}",
    "an animal or person {a} in a {p}",
];
const OTHER_EXTRA: [&str; 4] = ["brown", "man", "woman", "grass"];

const NEWS_TEMPLATES: [&str; 5] = [
    "the {n} said on {d} that the {t} would {v}",
    "officials in the {n} expect the {t} to {v} in {d}",
    "a report by the {n} shows the {t} is {g}",
    "the {t} {v} after the {n} met on {d}",
    "shares in the {n} rose {x} percent on {d}",
];
const NEWS_N: [&str; 6] = ["government", "company", "council", "bank", "court", "union"];
const NEWS_T: [&str; 6] = ["market", "plan", "deal", "vote", "economy", "team"];
const NEWS_V: [&str; 5] = ["grow", "fall", "change", "recover", "win"];
const NEWS_D: [&str; 5] = ["monday", "tuesday", "friday", "june", "march"];
const NEWS_G: [&str; 4] = ["growing", "stable", "weak", "strong"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub captions_per_image: usize,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian noise added to every feature.
    pub noise: f64,
    /// Sentences in each generated external corpus (training part).
    pub corpus_size: usize,
    /// Sentences in each generated external corpus (validation part).
    pub corpus_val_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_train: 70,
            n_val: 15,
            n_test: 15,
            captions_per_image: 5,
            feature_dim: 32,
            noise: 1.0,
            corpus_size: 20_000,
            corpus_val_size: 1_000,
            seed: 1,
        }
    }
}

/// Width of the attribute code at the start of each feature vector.
pub const CODE_WIDTH: usize = COLORS.len() + OBJECTS.len() + ACTIONS.len() + PLACES.len();

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub dataset: CaptionDataset,
    pub features: ImageFeatures,
    pub different_captions: (Corpus, Corpus),
    pub general_text: (Corpus, Corpus),
}

fn pick<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    words[rng.below(words.len())]
}

fn fill(template: &str, slots: &[(&str, &str)]) -> Sentence {
    let mut s = template.to_string();
    for (k, v) in slots {
        s = s.replace(k, v);
    }
    Sentence::from_text(&s)
}

fn other_caption(rng: &mut Rng) -> Sentence {
    let t = pick(rng, &OTHER_CAPTION_TEMPLATES);
    let colors: Vec<&str> = COLORS.iter().chain(&OTHER_EXTRA[..1]).copied().collect();
    let objects: Vec<&str> = OBJECTS.iter().chain(&OTHER_EXTRA[1..3]).copied().collect();
    let places: Vec<&str> = PLACES.iter().chain(&OTHER_EXTRA[3..]).copied().collect();
    let (c, o, a, p) = (pick(rng, &colors), pick(rng, &objects), pick(rng, &ACTIONS), pick(rng, &places));
    fill(t, &[("{c}", c), ("{o}", o), ("{a}", a), ("{p}", p)])
}

fn news_sentence(rng: &mut Rng) -> Sentence {
    let t = pick(rng, &NEWS_TEMPLATES);
    let slots = [
        ("{n}", pick(rng, &NEWS_N)),
        ("{t}", pick(rng, &NEWS_T)),
        ("{v}", pick(rng, &NEWS_V)),
        ("{d}", pick(rng, &NEWS_D)),
        ("{g}", pick(rng, &NEWS_G)),
        ("{x}", NUM_SERIALIZED),
    ];
    fill(t, &slots)
}

fn corpus(n: usize, source: CorpusSource, seed: u64, gen: fn(&mut Rng) -> Sentence) -> Corpus {
    let mut rng = Rng::new(seed);
    Corpus::new((0..n).map(|_| gen(&mut rng)).collect(), source)
}

impl SyntheticTask {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.feature_dim < CODE_WIDTH {
            return Err(Error::Config(format!("feature_dim must be at least {CODE_WIDTH}")));
        }
        if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 || cfg.captions_per_image == 0 {
            return Err(Error::Config("synthetic task needs images in every split".into()));
        }
        let mut rng = Rng::new(hash_seed(&[cfg.seed, 1]));
        let mut items = Vec::new();
        let mut feats = BTreeMap::new();
        let total = cfg.n_train + cfg.n_val + cfg.n_test;
        for i in 0..total {
            let split = if i < cfg.n_train {
                Split::Train
            } else if i < cfg.n_train + cfg.n_val {
                Split::Val
            } else {
                Split::Test
            };
            let attrs = [
                rng.below(COLORS.len()),
                rng.below(OBJECTS.len()),
                rng.below(ACTIONS.len()),
                rng.below(PLACES.len()),
            ];
            let mut f: Vec<f32> = (0..cfg.feature_dim).map(|_| (cfg.noise * rng.normal()) as f32).collect();
            let mut offset = 0;
            for (a, width) in attrs.iter().zip([COLORS.len(), OBJECTS.len(), ACTIONS.len(), PLACES.len()]) {
                f[offset + a] += 1.0;
                offset += width;
            }
            let (c, o, a, p) = (COLORS[attrs[0]], OBJECTS[attrs[1]], ACTIONS[attrs[2]], PLACES[attrs[3]]);
            let captions = (0..cfg.captions_per_image)
                .map(|_| fill(pick(&mut rng, &CAPTION_TEMPLATES), &[("{c}", c), ("{o}", o), ("{a}", a), ("{p}", p)]))
                .collect();
            let id = format!("img{i:05}");
            feats.insert(id.clone(), f);
            items.push(CaptionItem {
                image_id: id,
                split,
                captions,
            });
        }
        let dataset = CaptionDataset::new(items)?;
        let features = ImageFeatures::from_map(cfg.feature_dim, &feats)?;
        let mk = |k: u64, n: usize, src, g| corpus(n, src, hash_seed(&[cfg.seed, k]), g);
        Ok(SyntheticTask {
            dataset,
            features,
            different_captions: (
                mk(2, cfg.corpus_size, CorpusSource::DifferentCaptions, other_caption),
                mk(3, cfg.corpus_val_size, CorpusSource::DifferentCaptions, other_caption),
            ),
            general_text: (
                mk(4, cfg.corpus_size, CorpusSource::GeneralText, news_sentence),
                mk(5, cfg.corpus_val_size, CorpusSource::GeneralText, news_sentence),
            ),
        })
    }

    /// Writes `dataset.jsonl`, `features.bin` (+ sidecar) and the external
    /// corpora as `{different-captions,general-text}.{train,val}.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dataset.save_jsonl(&dir.join("dataset.jsonl"))?;
        self.features.save(&dir.join("features.bin"))?;
        for (name, (train, val)) in [
            ("different-captions", &self.different_captions),
            ("general-text", &self.general_text),
        ] {
            train.write_jsonl(&dir.join(format!("{name}.train.jsonl")))?;
            val.write_jsonl(&dir.join(format!("{name}.val.jsonl")))?;
        }
        Ok(())
    }
}
