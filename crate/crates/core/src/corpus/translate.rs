use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, LanguageId, Lexicon, Origin, Result, Sentence};
use crate::rng::{purpose, stream};

/// Concept-level word substitution between languages, with an optional
/// error model that swaps a token's concept for a uniformly random other one.
#[derive(Clone, Debug)]
pub struct Translator {
    languages: Vec<LanguageId>,
    lexicon: Lexicon,
    concept_words: Vec<Vec<Vec<usize>>>,
    noise_rate: f64,
}

impl Translator {
    pub fn new(languages: Vec<LanguageId>, lexicon: Lexicon, noise_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(CorpusError::Config("noise_rate must lie in [0, 1]".into()));
        }
        if lexicon.word_concepts.len() != languages.len() {
            return Err(CorpusError::Config("lexicon and language list disagree".into()));
        }
        let concept_words = lexicon.concept_words();
        for (l, per_concept) in concept_words.iter().enumerate() {
            if let Some(c) = per_concept.iter().position(Vec::is_empty) {
                return Err(CorpusError::Config(format!(
                    "language {} has no word for concept {c}",
                    languages[l]
                )));
            }
        }
        Ok(Self {
            languages,
            lexicon,
            concept_words,
            noise_rate,
        })
    }

    pub fn from_corpus(corpus: &Corpus, noise_rate: f64) -> Result<Self> {
        let lexicon = corpus.lexicon.clone().ok_or(CorpusError::NoLexicon)?;
        Self::new(corpus.languages.clone(), lexicon, noise_rate)
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    pub fn languages(&self) -> &[LanguageId] {
        &self.languages
    }

    pub fn translate(&self, sentence: &Sentence, target: usize, rng: &mut ChaCha8Rng) -> Result<Sentence> {
        if target >= self.languages.len() {
            return Err(CorpusError::UnknownLanguage(format!("#{target}")));
        }
        if sentence.lang >= self.languages.len() {
            return Err(CorpusError::UnknownLanguage(format!("#{}", sentence.lang)));
        }
        let n_concepts = self.lexicon.num_concepts;
        let src_concepts = &self.lexicon.word_concepts[sentence.lang];
        let mut tokens = Vec::with_capacity(sentence.tokens.len());
        let mut concepts = Vec::with_capacity(sentence.tokens.len());
        for &w in &sentence.tokens {
            let mut c = *src_concepts
                .get(w)
                .ok_or_else(|| CorpusError::Invariant(format!("word {w} outside source vocabulary")))?;
            if n_concepts > 1 && rng.gen::<f64>() < self.noise_rate {
                let other = rng.gen_range(0..n_concepts - 1);
                c = if other >= c { other + 1 } else { other };
            }
            let words = &self.concept_words[target][c];
            let weights = words.iter().map(|&v| self.lexicon.word_weights[target][v]);
            let pick = WeightedIndex::new(weights)
                .map_err(|e| CorpusError::Invariant(format!("bad synonym weights: {e}")))?
                .sample(rng);
            tokens.push(words[pick]);
            concepts.push(c);
        }
        Ok(Sentence {
            image_id: sentence.image_id,
            lang: target,
            tokens,
            origin: Origin::Translated,
            concepts,
        })
    }
}

/// One-shot translation with its own seeded stream.
pub fn simulate_translation(
    translator: &Translator,
    sentence: &Sentence,
    target: &LanguageId,
    seed: u64,
) -> Result<Sentence> {
    let t = translator
        .languages
        .iter()
        .position(|l| l == target)
        .ok_or_else(|| CorpusError::UnknownLanguage(target.to_string()))?;
    let mut rng = stream(seed, purpose::TRANSLATE);
    translator.translate(sentence, t, &mut rng)
}

/// Fills every empty (image, language) cell by translating all sentences of
/// the first language that has human sentences for that image (falling back
/// to any populated language).
pub fn augment_to_full_coverage(corpus: &Corpus, translator: &Translator, seed: u64) -> Result<Corpus> {
    let mut rng = stream(seed, purpose::AUGMENT);
    let cells = corpus.cells();
    let mut out = corpus.clone();
    for (image, row) in cells.iter().enumerate() {
        if row.iter().all(|c| !c.is_empty()) {
            continue;
        }
        let has_human = |l: &usize| row[*l].iter().any(|&s| corpus.sentences[s].origin == Origin::Human);
        let source = (0..row.len())
            .find(has_human)
            .or_else(|| (0..row.len()).find(|&l| !row[l].is_empty()))
            .ok_or_else(|| CorpusError::Invariant(format!("image {image} has no sentences in any language")))?;
        for (target, cell) in row.iter().enumerate() {
            if !cell.is_empty() {
                continue;
            }
            for &s in &row[source] {
                out.sentences.push(translator.translate(&corpus.sentences[s], target, &mut rng)?);
            }
        }
    }
    out.validate()?;
    Ok(out)
}
