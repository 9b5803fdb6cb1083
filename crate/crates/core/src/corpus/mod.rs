//! Multilingual image–sentence corpora: the synthetic generator, the
//! simulated translator, minibatch sampling and the on-disk formats.
//!
//! Each sentence and image carries hidden concept ids (`debug` in the file
//! format). Only the generator, the translator and verification code look at
//! them; model code works from tokens and features alone.

mod batch;
mod generate;
mod io;
mod translate;

pub use batch::{Batch, BatchItem, MinibatchSampler};
pub use generate::{generate_synthetic, SyntheticConfig, SyntheticData};
pub use io::{
    read_corpus, read_features, read_vectors, write_corpus, write_features, write_vectors, PretrainedVectors,
};
pub use translate::{augment_to_full_coverage, simulate_translation, Translator};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("corpus has no lexicon; translation needs the generator's concept map")]
    NoLexicon,
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub String);

impl LanguageId {
    pub fn new(code: impl Into<String>) -> Self {
        Self(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "human")]
    Human,
    #[serde(rename = "mt")]
    Translated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: usize,
    pub feature: Vec<f64>,
    /// Generator ground truth.
    pub concepts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub image_id: usize,
    /// Index into `Corpus::languages`.
    pub lang: usize,
    pub tokens: Vec<usize>,
    pub origin: Origin,
    /// Generator ground truth, one concept per token.
    pub concepts: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Word → concept map per language, plus the generator's within-concept word
/// weights. The simulated translator draws on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub num_concepts: usize,
    /// `[lang][word] -> concept`
    pub word_concepts: Vec<Vec<usize>>,
    /// `[lang][word] -> relative weight among the concept's synonyms`
    pub word_weights: Vec<Vec<f64>>,
}

impl Lexicon {
    /// `[lang][concept] -> words`, ascending word id.
    pub fn concept_words(&self) -> Vec<Vec<Vec<usize>>> {
        self.word_concepts
            .iter()
            .map(|wc| {
                let mut by_concept = vec![Vec::new(); self.num_concepts];
                for (w, &c) in wc.iter().enumerate() {
                    by_concept[c].push(w);
                }
                by_concept
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub languages: Vec<LanguageId>,
    pub vocab_sizes: Vec<usize>,
    pub feature_dim: usize,
    /// Dense ids: `images[i].id == i`.
    pub images: Vec<ImageRecord>,
    pub sentences: Vec<Sentence>,
    pub splits: Splits,
    pub lexicon: Option<Lexicon>,
}

pub const MIN_SENTENCE_LEN: usize = 3;

impl Corpus {
    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn language_index(&self, code: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.as_str() == code)
    }

    /// Sentence indices grouped as `[image][lang]`.
    pub fn cells(&self) -> Vec<Vec<Vec<usize>>> {
        let mut cells = vec![vec![Vec::new(); self.languages.len()]; self.images.len()];
        for (i, s) in self.sentences.iter().enumerate() {
            cells[s.image_id][s.lang].push(i);
        }
        cells
    }

    /// Languages with at least one human-written sentence for an image in `split`.
    pub fn human_languages(&self, split: Split) -> Vec<usize> {
        let mut in_split = vec![false; self.images.len()];
        for &i in self.splits.get(split) {
            in_split[i] = true;
        }
        let mut human = vec![false; self.languages.len()];
        for s in &self.sentences {
            if s.origin == Origin::Human && in_split[s.image_id] {
                human[s.lang] = true;
            }
        }
        (0..self.languages.len()).filter(|&l| human[l]).collect()
    }

    /// Checks every structural invariant except full (image, language) coverage.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Invariant(m));
        if self.languages.is_empty() {
            return bad("no languages declared".into());
        }
        let mut seen = self.languages.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.languages.len() {
            return bad("duplicate language codes".into());
        }
        if self.vocab_sizes.len() != self.languages.len() {
            return bad("vocab_sizes must list one size per language".into());
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.id != i {
                return bad(format!("image ids must be dense and ordered; found {} at position {i}", img.id));
            }
            if img.feature.len() != self.feature_dim {
                return bad(format!("image {} has feature dim {} (expected {})", i, img.feature.len(), self.feature_dim));
            }
            if img.feature.iter().any(|v| !v.is_finite()) {
                return bad(format!("image {i} has a non-finite feature"));
            }
            if self.lexicon.is_some() && img.concepts.is_empty() {
                return bad(format!("synthetic image {i} has no concepts"));
            }
        }
        for (k, s) in self.sentences.iter().enumerate() {
            if s.image_id >= self.images.len() {
                return bad(format!("sentence {k} references missing image {}", s.image_id));
            }
            if s.lang >= self.languages.len() {
                return bad(format!("sentence {k} has unknown language index {}", s.lang));
            }
            if s.tokens.len() < MIN_SENTENCE_LEN {
                return bad(format!("sentence {k} has {} tokens (< {MIN_SENTENCE_LEN})", s.tokens.len()));
            }
            if let Some(&w) = s.tokens.iter().find(|&&w| w >= self.vocab_sizes[s.lang]) {
                return bad(format!("sentence {k}: word {w} outside the {} vocabulary", self.languages[s.lang]));
            }
            if !s.concepts.is_empty() && s.concepts.len() != s.tokens.len() {
                return bad(format!("sentence {k}: concept list length differs from token count"));
            }
        }
        let mut owner = vec![None; self.images.len()];
        for (name, ids) in [("train", &self.splits.train), ("val", &self.splits.val), ("test", &self.splits.test)] {
            for &i in ids {
                match owner.get(i) {
                    None => return bad(format!("{name} split references missing image {i}")),
                    Some(Some(prev)) => return bad(format!("image {i} is in both {prev} and {name}")),
                    Some(None) => owner[i] = Some(name),
                }
            }
        }
        if let Some(lex) = &self.lexicon {
            if lex.word_concepts.len() != self.languages.len() {
                return bad("lexicon language count differs from corpus".into());
            }
            for (l, wc) in lex.word_concepts.iter().enumerate() {
                if wc.len() != self.vocab_sizes[l] {
                    return bad(format!("lexicon for {} has {} words", self.languages[l], wc.len()));
                }
            }
        }
        Ok(())
    }

    /// Every image has at least one sentence in every language.
    pub fn check_full_coverage(&self) -> Result<()> {
        for (i, row) in self.cells().iter().enumerate() {
            if let Some(l) = row.iter().position(Vec::is_empty) {
                return Err(CorpusError::Invariant(format!(
                    "image {i} has no {} sentence",
                    self.languages[l]
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the listed languages (in the given order), re-indexing
    /// sentences, vocabularies and the lexicon.
    pub fn restrict_languages(&self, codes: &[LanguageId]) -> Result<Corpus> {
        let keep = codes
            .iter()
            .map(|c| self.language_index(c.as_str()).ok_or_else(|| CorpusError::UnknownLanguage(c.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut new_index = vec![None; self.languages.len()];
        for (n, &l) in keep.iter().enumerate() {
            new_index[l] = Some(n);
        }
        let sentences = self
            .sentences
            .iter()
            .filter_map(|s| new_index[s.lang].map(|lang| Sentence { lang, ..s.clone() }))
            .collect();
        let lexicon = self.lexicon.as_ref().map(|lex| Lexicon {
            num_concepts: lex.num_concepts,
            word_concepts: keep.iter().map(|&l| lex.word_concepts[l].clone()).collect(),
            word_weights: keep.iter().map(|&l| lex.word_weights[l].clone()).collect(),
        });
        Ok(Corpus {
            languages: codes.to_vec(),
            vocab_sizes: keep.iter().map(|&l| self.vocab_sizes[l]).collect(),
            feature_dim: self.feature_dim,
            images: self.images.clone(),
            sentences,
            splits: self.splits.clone(),
            lexicon,
        })
    }

    /// SHA-256 of the canonical `corpus.jsonl` serialization.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut buf = Vec::new();
        io::write_corpus_to(self, &mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Corpus {
        Corpus {
            languages: vec![LanguageId::new("a"), LanguageId::new("b")],
            vocab_sizes: vec![5, 5],
            feature_dim: 2,
            images: vec![
                ImageRecord { id: 0, feature: vec![0.0, 1.0], concepts: vec![] },
                ImageRecord { id: 1, feature: vec![1.0, 0.0], concepts: vec![] },
            ],
            sentences: vec![Sentence {
                image_id: 0,
                lang: 0,
                tokens: vec![1, 2, 3],
                origin: Origin::Human,
                concepts: vec![],
            }],
            splits: Splits { train: vec![0], val: vec![], test: vec![1] },
            lexicon: None,
        }
    }

    #[test]
    fn valid_tiny_corpus() {
        tiny().validate().unwrap();
        assert!(tiny().check_full_coverage().is_err());
    }

    #[test]
    fn rejects_overlapping_splits() {
        let mut c = tiny();
        c.splits.val.push(0);
        assert!(matches!(c.validate(), Err(CorpusError::Invariant(m)) if m.contains("both")));
    }

    #[test]
    fn rejects_short_or_out_of_vocab_sentences() {
        let mut c = tiny();
        c.sentences[0].tokens = vec![1, 2];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.sentences[0].tokens = vec![1, 2, 9];
        assert!(c.validate().is_err());
    }
}
