use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DimKind {
    ContinuousLinear { lo: f64, hi: f64 },
    ContinuousLog { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub kind: DimKind,
}

impl Dimension {
    pub fn linear(name: &str, lo: f64, hi: f64) -> Self {
        Dimension {
            name: name.into(),
            kind: DimKind::ContinuousLinear { lo, hi },
        }
    }

    pub fn log(name: &str, lo: f64, hi: f64) -> Self {
        Dimension {
            name: name.into(),
            kind: DimKind::ContinuousLog { lo, hi },
        }
    }

    pub fn integer(name: &str, lo: i64, hi: i64) -> Self {
        Dimension {
            name: name.into(),
            kind: DimKind::Integer { lo, hi },
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Dimension {
            name: name.into(),
            kind: DimKind::Categorical {
                choices: choices.iter().map(|c| c.to_string()).collect(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match &self.kind {
            DimKind::ContinuousLinear { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            DimKind::ContinuousLog { lo, hi } => hi.is_finite() && *lo > 0.0 && lo < hi,
            DimKind::Integer { lo, hi } => lo < hi,
            DimKind::Categorical { choices } => {
                !choices.is_empty() && choices.iter().collect::<HashSet<_>>().len() == choices.len()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid bounds for dimension {}: {:?}", self.name, self.kind)))
        }
    }

    fn contains(&self, v: &ParamValue) -> bool {
        match (&self.kind, v) {
            (DimKind::ContinuousLinear { lo, hi } | DimKind::ContinuousLog { lo, hi }, ParamValue::Real(x)) => {
                (*lo..=*hi).contains(x)
            }
            (DimKind::Integer { lo, hi }, ParamValue::Int(x)) => (*lo..=*hi).contains(x),
            (DimKind::Categorical { choices }, ParamValue::Cat(c)) => choices.contains(c),
            _ => false,
        }
    }

    fn sample(&self, rng: &mut Rng) -> ParamValue {
        match &self.kind {
            DimKind::ContinuousLinear { lo, hi } => ParamValue::Real(rng.uniform(*lo, *hi)),
            DimKind::ContinuousLog { lo, hi } => {
                ParamValue::Real(rng.uniform(lo.ln(), hi.ln()).exp().clamp(*lo, *hi))
            }
            DimKind::Integer { lo, hi } => ParamValue::Int(lo + rng.below((hi - lo + 1) as usize) as i64),
            DimKind::Categorical { choices } => ParamValue::Cat(choices[rng.below(choices.len())].clone()),
        }
    }

    /// Width of this dimension in the surrogate's feature encoding.
    fn width(&self) -> usize {
        match &self.kind {
            DimKind::Categorical { choices } => choices.len(),
            _ => 1,
        }
    }

    fn encode_into(&self, v: &ParamValue, out: &mut Vec<f64>) {
        match (&self.kind, v) {
            (DimKind::ContinuousLog { .. }, ParamValue::Real(x)) => out.push(x.ln()),
            (DimKind::ContinuousLinear { .. }, ParamValue::Real(x)) => out.push(*x),
            (DimKind::Integer { .. }, ParamValue::Int(x)) => out.push(*x as f64),
            (DimKind::Categorical { choices }, ParamValue::Cat(c)) => {
                out.extend(choices.iter().map(|k| if k == c { 1.0 } else { 0.0 }))
            }
            _ => unreachable!("point validated against space"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Cat(String),
}

/// A full assignment of values to the dimensions of a space.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperPoint(pub BTreeMap<String, ParamValue>);

impl HyperPoint {
    pub fn get(&self, name: &str) -> Result<&ParamValue> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Config(format!("hyperparameter {name} missing")))
    }

    pub fn real(&self, name: &str) -> Result<f64> {
        match self.get(name)? {
            ParamValue::Real(x) => Ok(*x),
            ParamValue::Int(x) => Ok(*x as f64),
            other => Err(Error::Config(format!("hyperparameter {name} is not numeric: {other:?}"))),
        }
    }

    pub fn int(&self, name: &str) -> Result<i64> {
        match self.get(name)? {
            ParamValue::Int(x) => Ok(*x),
            other => Err(Error::Config(format!("hyperparameter {name} is not an integer: {other:?}"))),
        }
    }

    pub fn usize(&self, name: &str) -> Result<usize> {
        let v = self.int(name)?;
        usize::try_from(v).map_err(|_| Error::Config(format!("hyperparameter {name} is negative")))
    }

    pub fn cat(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            ParamValue::Cat(c) => Ok(c),
            other => Err(Error::Config(format!("hyperparameter {name} is not categorical: {other:?}"))),
        }
    }

    /// Boolean categorical spelled "true"/"false".
    pub fn flag(&self, name: &str) -> Result<bool> {
        match self.cat(name)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!("hyperparameter {name} is not a flag: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub dimensions: Vec<Dimension>,
}

const INIT_METHODS: [&str; 2] = ["normal", "xavier-normal"];
const OPTIMIZERS: [&str; 3] = ["adam", "rmsprop", "adadelta"];

fn training_dims(dropouts: &[&str]) -> Vec<Dimension> {
    let mut d = vec![
        Dimension::categorical("init_method", &INIT_METHODS),
        Dimension::log("max_init_weight", 1e-5, 1.0),
        Dimension::categorical("optimizer", &OPTIMIZERS),
        Dimension::log("learning_rate", 1e-5, 1.0),
        Dimension::log("weight_decay", 1e-10, 0.1),
        Dimension::log("max_grad_norm", 1.0, 1000.0),
        Dimension::integer("minibatch_size", 10, 300),
    ];
    d.extend(dropouts.iter().map(|n| Dimension::linear(n, 0.0, 0.5)));
    d
}

impl ParamSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Result<Self> {
        if dimensions.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        let mut names = HashSet::new();
        for d in &dimensions {
            d.validate()?;
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("duplicate dimension {}", d.name)));
            }
        }
        Ok(ParamSpace { dimensions })
    }

    /// Language-model search space.
    pub fn language_model_default() -> Self {
        let mut d = vec![Dimension::integer("embed_size", 64, 512), Dimension::integer("rnn_size", 64, 512)];
        d.extend(training_dims(&["embedding_dropout", "rnn_dropout"]));
        ParamSpace::new(d).expect("default space is valid")
    }

    /// Caption-generator search space. With `with_prefix` the prefix encoder
    /// sizes and embedding dropout are searched too (no transfer).
    pub fn caption_generator_default(with_prefix: bool) -> Self {
        let mut d = Vec::new();
        if with_prefix {
            d.push(Dimension::integer("embed_size", 64, 512));
            d.push(Dimension::integer("rnn_size", 64, 512));
        }
        d.push(Dimension::integer("post_image_size", 64, 512));
        d.push(Dimension::categorical("post_image_activation", &["relu", "none"]));
        d.push(Dimension::categorical("normalize_image", &["false", "true"]));
        d.push(Dimension::integer("beam_width", 1, 5));
        let mut drops = vec!["image_dropout", "post_image_dropout", "rnn_dropout"];
        if with_prefix {
            drops.push("embedding_dropout");
        }
        d.extend(training_dims(&drops));
        ParamSpace::new(d).expect("default space is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: ParamSpace = serde_json::from_str(&text)?;
        ParamSpace::new(raw.dimensions)
    }

    pub fn contains(&self, p: &HyperPoint) -> bool {
        p.0.len() == self.dimensions.len()
            && self.dimensions.iter().all(|d| p.0.get(&d.name).is_some_and(|v| d.contains(v)))
    }

    pub fn check(&self, p: &HyperPoint) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::Config(format!("point {:?} is outside the search space", p.0)))
        }
    }

    pub fn random_point(&self, rng: &mut Rng) -> HyperPoint {
        HyperPoint(self.dimensions.iter().map(|d| (d.name.clone(), d.sample(rng))).collect())
    }

    pub fn encoded_width(&self) -> usize {
        self.dimensions.iter().map(Dimension::width).sum()
    }

    /// Surrogate features: log dimensions in log space, categoricals one-hot.
    pub fn encode(&self, p: &HyperPoint) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoded_width());
        for d in &self.dimensions {
            d.encode_into(&p.0[&d.name], &mut out);
        }
        out
    }
}
