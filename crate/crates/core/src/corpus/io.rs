use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, ImageRecord, LanguageId, Lexicon, Origin, Result, Sentence, Splits};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Default)]
struct Debug {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    concepts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lexicon: Option<Lexicon>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Line {
    Header {
        version: u32,
        languages: Vec<LanguageId>,
        feature_dim: usize,
        vocab_sizes: Vec<usize>,
        splits: Splits,
        #[serde(default)]
        debug: Debug,
    },
    Image {
        id: usize,
        feature: Vec<f64>,
        #[serde(default)]
        debug: Debug,
    },
    Sentence {
        image_id: usize,
        lang: LanguageId,
        tokens: Vec<usize>,
        origin: Origin,
        #[serde(default)]
        debug: Debug,
    },
}

pub(crate) fn write_corpus_to<W: Write>(corpus: &Corpus, w: &mut W) -> Result<()> {
    let mut emit = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut *w, line).map_err(|e| CorpusError::Invariant(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    };
    emit(&Line::Header {
        version: FORMAT_VERSION,
        languages: corpus.languages.clone(),
        feature_dim: corpus.feature_dim,
        vocab_sizes: corpus.vocab_sizes.clone(),
        splits: corpus.splits.clone(),
        debug: Debug {
            concepts: Vec::new(),
            lexicon: corpus.lexicon.clone(),
        },
    })?;
    for img in &corpus.images {
        emit(&Line::Image {
            id: img.id,
            feature: img.feature.clone(),
            debug: Debug {
                concepts: img.concepts.clone(),
                lexicon: None,
            },
        })?;
    }
    for s in &corpus.sentences {
        emit(&Line::Sentence {
            image_id: s.image_id,
            lang: corpus.languages[s.lang].clone(),
            tokens: s.tokens.clone(),
            origin: s.origin,
            debug: Debug {
                concepts: s.concepts.clone(),
                lexicon: None,
            },
        })?;
    }
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus_to(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn read_corpus_from<R: BufRead>(r: R) -> Result<Corpus> {
    let parse_err = |line: usize, msg: String| CorpusError::Parse { line, msg };
    let mut corpus: Option<Corpus> = None;
    for (i, text) in r.lines().enumerate() {
        let lineno = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(&text).map_err(|e| parse_err(lineno, e.to_string()))?;
        match (line, corpus.as_mut()) {
            (
                Line::Header {
                    version,
                    languages,
                    feature_dim,
                    vocab_sizes,
                    splits,
                    debug,
                },
                None,
            ) => {
                if version != FORMAT_VERSION {
                    return Err(parse_err(lineno, format!("unsupported format version {version}")));
                }
                corpus = Some(Corpus {
                    languages,
                    vocab_sizes,
                    feature_dim,
                    images: Vec::new(),
                    sentences: Vec::new(),
                    splits,
                    lexicon: debug.lexicon,
                });
            }
            (Line::Header { .. }, Some(_)) => return Err(parse_err(lineno, "duplicate header".into())),
            (_, None) => return Err(parse_err(lineno, "first record must be the header".into())),
            (Line::Image { id, feature, debug }, Some(c)) => {
                if id != c.images.len() {
                    return Err(parse_err(lineno, format!("image id {id} out of order")));
                }
                if feature.len() != c.feature_dim {
                    return Err(parse_err(
                        lineno,
                        format!("feature has {} values, header declares {}", feature.len(), c.feature_dim),
                    ));
                }
                c.images.push(ImageRecord {
                    id,
                    feature,
                    concepts: debug.concepts,
                });
            }
            (
                Line::Sentence {
                    image_id,
                    lang,
                    tokens,
                    origin,
                    debug,
                },
                Some(c),
            ) => {
                let l = c
                    .language_index(lang.as_str())
                    .ok_or_else(|| parse_err(lineno, format!("undeclared language {lang}")))?;
                c.sentences.push(Sentence {
                    image_id,
                    lang: l,
                    tokens,
                    origin,
                    concepts: debug.concepts,
                });
            }
        }
    }
    let corpus = corpus.ok_or_else(|| parse_err(1, "missing header".into()))?;
    corpus.validate()?;
    Ok(corpus)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    read_corpus_from(BufReader::new(File::open(path)?))
}

/// Word embedding tables, one per language, rows indexed by word id.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedVectors {
    languages: Vec<LanguageId>,
    dim: usize,
    tables: Vec<Vec<Vec<f64>>>,
}

impl PretrainedVectors {
    pub fn new(languages: Vec<LanguageId>, dim: usize, tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if languages.len() != tables.len() {
            return Err(CorpusError::Invariant("one table per language required".into()));
        }
        for (l, t) in tables.iter().enumerate() {
            if let Some(w) = t.iter().position(|row| row.len() != dim) {
                return Err(CorpusError::Invariant(format!(
                    "{} word {w} has dimension {} (expected {dim})",
                    languages[l],
                    t[w].len()
                )));
            }
        }
        Ok(Self { languages, dim, tables })
    }

    pub fn languages(&self) -> &[LanguageId] {
        &self.languages
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_words(&self, lang: usize) -> usize {
        self.tables[lang].len()
    }

    pub fn vector(&self, lang: usize, word: usize) -> &[f64] {
        &self.tables[lang][word]
    }

    pub fn table(&self, lang: usize) -> &[Vec<f64>] {
        &self.tables[lang]
    }

    /// The tables of the listed languages, in the given order.
    pub fn restrict(&self, codes: &[LanguageId]) -> Result<Self> {
        let tables = codes
            .iter()
            .map(|c| {
                self.languages
                    .iter()
                    .position(|l| l == c)
                    .map(|l| self.tables[l].clone())
                    .ok_or_else(|| CorpusError::UnknownLanguage(c.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(codes.to_vec(), self.dim, tables)
    }

    /// Checks that the tables line up with a corpus's languages and vocabularies.
    pub fn check_against(&self, corpus: &Corpus) -> Result<()> {
        if self.languages != corpus.languages {
            return Err(CorpusError::Invariant("vector languages differ from corpus languages".into()));
        }
        for (l, &v) in corpus.vocab_sizes.iter().enumerate() {
            if self.tables[l].len() != v {
                return Err(CorpusError::Invariant(format!(
                    "{} has {} vectors for a {v}-word vocabulary",
                    self.languages[l],
                    self.tables[l].len()
                )));
            }
        }
        Ok(())
    }
}

fn parse_floats(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| CorpusError::Parse { line, msg: format!("bad number {f:?}") })
        })
        .collect()
}

pub fn write_vectors(vectors: &PretrainedVectors, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (l, table) in vectors.tables.iter().enumerate() {
        for (word, row) in table.iter().enumerate() {
            write!(w, "{}\t{word}", vectors.languages[l])?;
            for v in row {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `lang \t word_id \t v0 … vD`. Languages appear in first-seen order;
/// word ids must be dense per language.
pub fn read_vectors(path: &Path) -> Result<PretrainedVectors> {
    let reader = BufReader::new(File::open(path)?);
    let mut order: Vec<LanguageId> = Vec::new();
    let mut rows: Vec<BTreeMap<usize, Vec<f64>>> = Vec::new();
    let mut dim = None;
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() < 3 {
            return Err(CorpusError::Parse { line, msg: "expected lang, word id and values".into() });
        }
        let word: usize = fields[1]
            .parse()
            .map_err(|_| CorpusError::Parse { line, msg: format!("bad word id {:?}", fields[1]) })?;
        let values = parse_floats(&fields[2..], line)?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(CorpusError::Parse { line, msg: format!("{} values, expected {d}", values.len()) })
            }
            _ => {}
        }
        let lang = LanguageId::new(fields[0]);
        let l = match order.iter().position(|x| *x == lang) {
            Some(l) => l,
            None => {
                order.push(lang);
                rows.push(BTreeMap::new());
                order.len() - 1
            }
        };
        if rows[l].insert(word, values).is_some() {
            return Err(CorpusError::Parse { line, msg: format!("duplicate word id {word}") });
        }
    }
    let mut tables = Vec::with_capacity(rows.len());
    for (l, map) in rows.into_iter().enumerate() {
        if map.keys().enumerate().any(|(i, &w)| i != w) {
            return Err(CorpusError::Invariant(format!("word ids for {} are not dense", order[l])));
        }
        tables.push(map.into_values().collect());
    }
    PretrainedVectors::new(order, dim.unwrap_or(0), tables)
}

/// Reads `image_id \t f0 … fD`; ids must cover `0..n` exactly once.
pub fn read_features(path: &Path) -> Result<Vec<Vec<f64>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut map = BTreeMap::new();
    let mut dim = None;
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split('\t').collect();
        if fields.len() < 2 {
            return Err(CorpusError::Parse { line, msg: "expected image id and values".into() });
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| CorpusError::Parse { line, msg: format!("bad image id {:?}", fields[0]) })?;
        let values = parse_floats(&fields[1..], line)?;
        if *dim.get_or_insert(values.len()) != values.len() {
            return Err(CorpusError::Parse { line, msg: "inconsistent feature dimension".into() });
        }
        if map.insert(id, values).is_some() {
            return Err(CorpusError::Parse { line, msg: format!("duplicate image id {id}") });
        }
    }
    if map.keys().enumerate().any(|(i, &id)| i != id) {
        return Err(CorpusError::Invariant("image ids in feature file are not dense".into()));
    }
    Ok(map.into_values().collect())
}

pub fn write_features(features: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, row) in features.iter().enumerate() {
        write!(w, "{id}")?;
        for v in row {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};

    #[test]
    fn missing_feature_names_the_line() {
        let c = generate_synthetic(&SyntheticConfig { num_images: 5, ..Default::default() })
            .unwrap()
            .corpus;
        let mut buf = Vec::new();
        write_corpus_to(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
        v.as_object_mut().unwrap().remove("feature");
        lines[2] = v.to_string();
        let err = read_corpus_from(lines.join("\n").as_bytes()).unwrap_err();
        match err {
            CorpusError::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("feature"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn sentence_before_header_is_rejected() {
        let line = r#"{"kind":"sentence","image_id":0,"lang":"L0","tokens":[1,2,3],"origin":"human"}"#;
        assert!(matches!(read_corpus_from(line.as_bytes()), Err(CorpusError::Parse { line: 1, .. })));
    }
}
