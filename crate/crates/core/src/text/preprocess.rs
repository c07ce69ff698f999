use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Pseudo-word standing in for a run of digits.
pub const NUM_TOKEN: &str = "⟨num⟩";
/// Spelling of [`NUM_TOKEN`] in files.
pub const NUM_SERIALIZED: &str = "<num>";

/// A preprocessed, whitespace-free token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Sentence(pub Vec<String>);

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Self {
        Sentence(tokens)
    }

    pub fn from_words(words: &[&str]) -> Self {
        Sentence(words.iter().map(|w| w.to_string()).collect())
    }

    /// Inverse of [`Sentence::to_text`]: splits on whitespace without any
    /// further normalisation.
    pub fn from_text(text: &str) -> Self {
        Sentence(
            text.split_whitespace()
                .map(|t| if t == NUM_SERIALIZED { NUM_TOKEN.to_string() } else { t.to_string() })
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Space-joined text, with the digit pseudo-word in its file spelling.
    pub fn to_text(&self) -> String {
        self.0
            .iter()
            .map(|t| if t == NUM_TOKEN { NUM_SERIALIZED } else { t.as_str() })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Serialize for Sentence {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<&str> = self
            .0
            .iter()
            .map(|t| if t == NUM_TOKEN { NUM_SERIALIZED } else { t.as_str() })
            .collect();
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Sentence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        Ok(Sentence(
            v.into_iter()
                .map(|t| if t == NUM_SERIALIZED { NUM_TOKEN.to_string() } else { t })
                .collect(),
        ))
    }
}

fn is_kept_char(c: char) -> bool {
    c.is_alphabetic() || c.is_ascii_digit()
}

/// Lowercases, strips every character that is not a letter or ASCII digit
/// (whitespace separates tokens), and replaces all-digit tokens with
/// [`NUM_TOKEN`]. Returns `None` when nothing survives.
pub fn preprocess_sentence(raw: &str) -> Option<Sentence> {
    let mut tokens = Vec::new();
    for word in raw.split_whitespace() {
        if word == NUM_TOKEN {
            tokens.push(NUM_TOKEN.to_string());
            continue;
        }
        let cleaned: String = word.chars().flat_map(char::to_lowercase).filter(|&c| is_kept_char(c)).collect();
        if cleaned.is_empty() {
            continue;
        }
        if cleaned.bytes().all(|b| b.is_ascii_digit()) {
            tokens.push(NUM_TOKEN.to_string());
        } else {
            tokens.push(cleaned);
        }
    }
    if tokens.is_empty() {
        None
    } else {
        Some(Sentence(tokens))
    }
}

/// Preprocesses every line, dropping (and counting) lines that come out empty.
pub fn preprocess_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> (Vec<Sentence>, usize) {
    let mut dropped = 0;
    let mut out = Vec::new();
    for line in lines {
        match preprocess_sentence(line) {
            Some(s) => out.push(s),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} sentences that were empty after preprocessing");
    }
    (out, dropped)
}
