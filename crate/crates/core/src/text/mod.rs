//! Corpus preprocessing, vocabularies, subsampling and dataset ingestion.

pub mod corpus;
pub mod dataset;
pub mod preprocess;
pub mod vocab;

pub use corpus::{filter_by_length, subsample_corpus, subsample_size, Corpus, CorpusSource};
pub use dataset::{CaptionDataset, CaptionItem, ImageFeatures, Split};
pub use preprocess::{preprocess_sentence, Sentence, NUM_TOKEN};
pub use vocab::{Vocabulary, EDGE, UNKNOWN};
