use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    augment_to_full_coverage, Corpus, CorpusError, ImageRecord, LanguageId, Lexicon, Origin,
    PretrainedVectors, Result, Sentence, Splits, Translator, MIN_SENTENCE_LEN,
};
use crate::rng::{purpose, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub num_languages: usize,
    pub concepts: usize,
    pub vocab_per_lang: usize,
    /// Probability that a word's pretrained vector is anchored on its concept
    /// vector; otherwise it sits on a language-private random direction.
    pub synonym_rate: f64,
    /// Inclusive token-count range.
    pub sentence_len: (usize, usize),
    /// Inclusive range for the number of concepts depicted per image.
    pub concepts_per_image: (usize, usize),
    pub sentences_per_image: usize,
    /// Leading languages that receive human-written sentences; the rest are
    /// filled by simulated translation. `None` means all.
    pub human_languages: Option<usize>,
    pub translation_noise: f64,
    pub zipf_exponent: f64,
    pub pretrained_dim: usize,
    pub feature_dim: usize,
    pub language_offset: f64,
    pub word_noise: f64,
    pub feature_noise: f64,
    /// Train / validation fractions; the remainder is test.
    pub split_fractions: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            num_languages: 4,
            concepts: 60,
            vocab_per_lang: 300,
            synonym_rate: 0.8,
            sentence_len: (3, 8),
            concepts_per_image: (2, 4),
            sentences_per_image: 2,
            human_languages: None,
            translation_noise: 0.1,
            zipf_exponent: 1.1,
            pretrained_dim: 32,
            feature_dim: 128,
            language_offset: 0.5,
            word_noise: 0.25,
            feature_noise: 0.1,
            split_fractions: (0.6, 0.1),
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::Config(m.into()));
        if self.num_images == 0
            || self.num_languages == 0
            || self.concepts == 0
            || self.vocab_per_lang == 0
            || self.sentences_per_image == 0
            || self.pretrained_dim == 0
            || self.feature_dim == 0
        {
            return bad("all counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.synonym_rate) {
            return bad("synonym_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.translation_noise) {
            return bad("translation_noise must lie in [0, 1]");
        }
        if self.vocab_per_lang < self.concepts {
            return bad("vocabulary smaller than the number of concepts");
        }
        let (lo, hi) = self.sentence_len;
        if lo < MIN_SENTENCE_LEN || hi < lo {
            return bad("degenerate sentence length range");
        }
        let (clo, chi) = self.concepts_per_image;
        if clo == 0 || chi < clo || chi > self.concepts {
            return bad("concepts_per_image must be a nonempty range within the concept count");
        }
        if self.human_languages == Some(0) || self.human_languages.is_some_and(|h| h > self.num_languages) {
            return bad("human_languages must be between 1 and num_languages");
        }
        let (tr, va) = self.split_fractions;
        if tr <= 0.0 || va < 0.0 || tr + va > 1.0 {
            return bad("split fractions must be non-negative with a nonempty train split");
        }
        Ok(())
    }
}

/// Generator output: the corpus plus raw "pretrained" word vectors per
/// language and the concept vectors they were derived from.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub vectors: PretrainedVectors,
    pub concept_vectors: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (1..=n).map(|k| (k as f64).powf(-s)).collect()
}

/// Samples `k` distinct indices with probability proportional to `weights`.
fn weighted_distinct(rng: &mut impl Rng, weights: &[f64], k: usize) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let dist = WeightedIndex::new(&w).expect("positive weights remain");
        let i = dist.sample(rng);
        out.push(i);
        w[i] = 0.0;
    }
    out
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.check()?;
    let seed = config.seed;
    let d = config.pretrained_dim;
    let (n_lang, n_concepts, vocab) = (config.num_languages, config.concepts, config.vocab_per_lang);

    // Concept geometry and popularity (popularity rank is a random permutation).
    let mut rng = stream(seed, purpose::CONCEPTS);
    let scale = 1.0 / (d as f64).sqrt();
    let concept_vectors: Vec<Vec<f64>> = (0..n_concepts).map(|_| gaussian(&mut rng, d, scale)).collect();
    let mut ranks: Vec<usize> = (0..n_concepts).collect();
    ranks.shuffle(&mut rng);
    let zipf = zipf_weights(n_concepts, config.zipf_exponent);
    let popularity: Vec<f64> = ranks.iter().map(|&r| zipf[r]).collect();

    // Lexicon: every concept gets one word, the remaining words pick a concept
    // uniformly; within a concept, synonyms follow a Zipf profile.
    let mut rng = stream(seed, purpose::LEXICON);
    let mut word_concepts = Vec::with_capacity(n_lang);
    let mut word_weights = Vec::with_capacity(n_lang);
    for _ in 0..n_lang {
        let mut wc: Vec<usize> = (0..n_concepts).collect();
        wc.extend((n_concepts..vocab).map(|_| rng.gen_range(0..n_concepts)));
        wc.shuffle(&mut rng);
        let mut ww = vec![0.0; vocab];
        let mut per_concept = vec![0usize; n_concepts];
        for (w, &c) in wc.iter().enumerate() {
            per_concept[c] += 1;
            ww[w] = (per_concept[c] as f64).powf(-config.zipf_exponent);
        }
        word_concepts.push(wc);
        word_weights.push(ww);
    }
    let lexicon = Lexicon {
        num_concepts: n_concepts,
        word_concepts,
        word_weights,
    };
    let concept_words = lexicon.concept_words();

    // Pretrained vectors: concept (or private) direction + language offset + noise.
    let mut rng = stream(seed, purpose::WORD_VECTORS);
    let mut tables = Vec::with_capacity(n_lang);
    for l in 0..n_lang {
        let offset = gaussian(&mut rng, d, config.language_offset * scale);
        let mut rows = Vec::with_capacity(vocab);
        for w in 0..vocab {
            let anchored = rng.gen::<f64>() < config.synonym_rate;
            let base = if anchored {
                concept_vectors[lexicon.word_concepts[l][w]].clone()
            } else {
                gaussian(&mut rng, d, scale)
            };
            let noise = gaussian(&mut rng, d, config.word_noise * scale);
            rows.push(
                base.iter()
                    .zip(&offset)
                    .zip(&noise)
                    .map(|((b, o), n)| b + o + n)
                    .collect::<Vec<f64>>(),
            );
        }
        tables.push(rows);
    }
    let languages: Vec<LanguageId> = (0..n_lang).map(|l| LanguageId::new(format!("L{l}"))).collect();
    let vectors = PretrainedVectors::new(languages.clone(), d, tables)?;

    // Images: mean of depicted concepts plus noise, lifted by a fixed projection.
    let mut rng = stream(seed, purpose::IMAGES);
    let projection: Vec<Vec<f64>> = (0..config.feature_dim).map(|_| gaussian(&mut rng, d, 1.0)).collect();
    let mut images = Vec::with_capacity(config.num_images);
    for id in 0..config.num_images {
        let k = rng.gen_range(config.concepts_per_image.0..=config.concepts_per_image.1);
        let concepts = weighted_distinct(&mut rng, &popularity, k);
        let mut mean = vec![0.0; d];
        for &c in &concepts {
            for (m, v) in mean.iter_mut().zip(&concept_vectors[c]) {
                *m += v / k as f64;
            }
        }
        let noise = gaussian(&mut rng, d, config.feature_noise * scale);
        let latent: Vec<f64> = mean.iter().zip(&noise).map(|(m, n)| m + n).collect();
        let feature = projection
            .iter()
            .map(|row| row.iter().zip(&latent).map(|(a, b)| a * b).sum())
            .collect();
        images.push(ImageRecord { id, feature, concepts });
    }

    // Sentences: tokens cycle through the depicted concepts in a shuffled order.
    let mut rng = stream(seed, purpose::SENTENCES);
    let human = config.human_languages.unwrap_or(n_lang);
    let mut sentences = Vec::new();
    for img in &images {
        for l in 0..human {
            for _ in 0..config.sentences_per_image {
                let len = rng.gen_range(config.sentence_len.0..=config.sentence_len.1);
                let mut order = img.concepts.clone();
                order.shuffle(&mut rng);
                let mut tokens = Vec::with_capacity(len);
                let mut concepts = Vec::with_capacity(len);
                for t in 0..len {
                    let c = if t < order.len() {
                        order[t]
                    } else {
                        img.concepts[rng.gen_range(0..img.concepts.len())]
                    };
                    let words = &concept_words[l][c];
                    let weights: Vec<f64> = words.iter().map(|&w| lexicon.word_weights[l][w]).collect();
                    let w = words[WeightedIndex::new(&weights).expect("nonempty").sample(&mut rng)];
                    tokens.push(w);
                    concepts.push(c);
                }
                sentences.push(Sentence {
                    image_id: img.id,
                    lang: l,
                    tokens,
                    origin: Origin::Human,
                    concepts,
                });
            }
        }
    }

    let mut rng = stream(seed, purpose::SPLITS);
    let mut ids: Vec<usize> = (0..config.num_images).collect();
    ids.shuffle(&mut rng);
    let n_train = ((config.split_fractions.0 * config.num_images as f64).round() as usize).max(1);
    let n_val = (config.split_fractions.1 * config.num_images as f64).round() as usize;
    let n_val = n_val.min(config.num_images - n_train.min(config.num_images));
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    let mut corpus = Corpus {
        languages,
        vocab_sizes: vec![vocab; n_lang],
        feature_dim: config.feature_dim,
        images,
        sentences,
        splits: Splits { train, val, test },
        lexicon: Some(lexicon),
    };
    if human < n_lang {
        let translator = Translator::from_corpus(&corpus, config.translation_noise)?;
        corpus = augment_to_full_coverage(&corpus, &translator, seed)?;
    }
    corpus.validate()?;
    Ok(SyntheticData {
        corpus,
        vectors,
        concept_vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - dot / (na * nb)
    }

    /// Mean cross-language cosine distance of (same-concept, different-concept) word pairs.
    fn synonym_gap(data: &SyntheticData) -> (f64, f64) {
        let lex = data.corpus.lexicon.as_ref().unwrap();
        let (mut syn, mut nsyn, mut other, mut nother) = (0.0, 0, 0.0, 0);
        for la in 0..lex.word_concepts.len() {
            for lb in la + 1..lex.word_concepts.len() {
                for (wa, &ca) in lex.word_concepts[la].iter().enumerate() {
                    for (wb, &cb) in lex.word_concepts[lb].iter().enumerate() {
                        let d = cosine_distance(data.vectors.vector(la, wa), data.vectors.vector(lb, wb));
                        if ca == cb {
                            syn += d;
                            nsyn += 1;
                        } else {
                            other += d;
                            nother += 1;
                        }
                    }
                }
            }
        }
        (syn / nsyn as f64, other / nother as f64)
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SyntheticConfig { seed: 7, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.corpus.content_hash(), b.corpus.content_hash());
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn synonyms_are_closer_on_every_seed() {
        for seed in 0..5 {
            let data = generate_synthetic(&SyntheticConfig { seed, ..Default::default() }).unwrap();
            let (syn, other) = synonym_gap(&data);
            assert!(syn < other, "seed {seed}: {syn} vs {other}");
        }
    }

    #[test]
    fn zero_synonym_rate_removes_geometric_sharing() {
        let data = generate_synthetic(&SyntheticConfig { synonym_rate: 0.0, ..Default::default() }).unwrap();
        let (syn, other) = synonym_gap(&data);
        assert!((syn - other).abs() < 0.05, "{syn} vs {other}");
    }

    #[test]
    fn word_frequencies_are_long_tailed() {
        let data = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let c = &data.corpus;
        for l in 0..c.num_languages() {
            let mut counts = vec![0usize; c.vocab_sizes[l]];
            for s in c.sentences.iter().filter(|s| s.lang == l) {
                for &w in &s.tokens {
                    counts[w] += 1;
                }
            }
            let rare = counts.iter().filter(|&&n| n < 4).count();
            assert!(rare * 2 >= counts.len(), "lang {l}: only {rare} rare types");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            SyntheticConfig { vocab_per_lang: 10, concepts: 20, ..Default::default() },
            SyntheticConfig { sentence_len: (5, 4), ..Default::default() },
            SyntheticConfig { sentence_len: (2, 4), ..Default::default() },
            SyntheticConfig { synonym_rate: 1.5, ..Default::default() },
            SyntheticConfig { num_images: 0, ..Default::default() },
        ];
        for cfg in cases {
            assert!(matches!(generate_synthetic(&cfg), Err(CorpusError::Config(_))));
        }
    }

    #[test]
    fn translated_languages_are_filled() {
        let cfg = SyntheticConfig { human_languages: Some(2), num_images: 30, ..Default::default() };
        let c = generate_synthetic(&cfg).unwrap().corpus;
        c.check_full_coverage().unwrap();
        assert!(c.sentences.iter().filter(|s| s.lang >= 2).all(|s| s.origin == Origin::Translated));
        assert_eq!(c.human_languages(super::super::Split::Test), vec![0, 1]);
    }
}
