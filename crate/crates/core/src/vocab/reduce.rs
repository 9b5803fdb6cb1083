use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, VocabError};
use crate::corpus::{Corpus, CorpusError, LanguageId, Lexicon, Split};

/// Training-split word frequencies, `[lang][word]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabStats {
    pub counts: Vec<Vec<u64>>,
}

impl VocabStats {
    pub fn num_languages(&self) -> usize {
        self.counts.len()
    }

    pub fn vocab_size(&self, lang: usize) -> usize {
        self.counts[lang].len()
    }

    pub fn total_tokens(&self, lang: usize) -> u64 {
        self.counts[lang].iter().sum()
    }

    /// Number of word types seen at least once.
    pub fn total_types(&self, lang: usize) -> usize {
        self.counts[lang].iter().filter(|&&c| c > 0).count()
    }

    /// `(word, count)` for every word that occurs, ascending word id.
    pub fn seen(&self, lang: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts[lang].iter().enumerate().filter(|(_, &c)| c > 0).map(|(w, &c)| (w, c))
    }
}

pub fn count_frequencies(corpus: &Corpus) -> Result<VocabStats> {
    if corpus.splits.train.is_empty() {
        return Err(CorpusError::EmptySplit(Split::Train).into());
    }
    let mut in_train = vec![false; corpus.images.len()];
    for &i in &corpus.splits.train {
        in_train[i] = true;
    }
    let mut counts: Vec<Vec<u64>> = corpus.vocab_sizes.iter().map(|&v| vec![0; v]).collect();
    for s in corpus.sentences.iter().filter(|s| in_train[s.image_id]) {
        for &w in &s.tokens {
            counts[s.lang][w] += 1;
        }
    }
    Ok(VocabStats { counts })
}

/// Per language: the K most frequent words (language-specific) and the rest
/// (language-agnostic).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSplit {
    pub k: usize,
    /// `[lang]` -> specific words in rank order (most frequent first).
    pub specific: Vec<Vec<usize>>,
    /// `[lang]` -> agnostic words, ascending id.
    pub agnostic: Vec<Vec<usize>>,
}

impl VocabSplit {
    /// `[lang][word]` -> slot in the language's specific table, if specific.
    pub fn specific_slots(&self) -> Vec<Vec<Option<usize>>> {
        self.specific
            .iter()
            .zip(&self.agnostic)
            .map(|(spec, agn)| {
                let mut slots = vec![None; spec.len() + agn.len()];
                for (slot, &w) in spec.iter().enumerate() {
                    slots[w] = Some(slot);
                }
                slots
            })
            .collect()
    }
}

/// Frequency order with ties broken by ascending word id.
fn rank(counts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}

pub fn split_top_k(stats: &VocabStats, k: usize) -> VocabSplit {
    let mut specific = Vec::with_capacity(stats.num_languages());
    let mut agnostic = Vec::with_capacity(stats.num_languages());
    for counts in &stats.counts {
        let order = rank(counts);
        let cut = k.min(order.len());
        specific.push(order[..cut].to_vec());
        let mut rest = order[cut..].to_vec();
        rest.sort_unstable();
        agnostic.push(rest);
    }
    VocabSplit { k, specific, agnostic }
}

/// Where a word's embedding lives after a reduction: a row of some
/// language's (reduced) table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub table: usize,
    pub row: usize,
}

/// Word → reduced-table row for every language. A table's UNK row, when
/// present, is its last row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabMapping {
    /// `[lang][word]`
    pub rows: Vec<Vec<TokenRef>>,
    /// `[table]` -> number of rows.
    pub table_sizes: Vec<usize>,
    /// `[table]` -> UNK row if the table has one.
    pub unk: Vec<Option<usize>>,
}

impl VocabMapping {
    /// Total number of distinct embedding rows across all tables.
    pub fn vocab_size(&self) -> usize {
        self.table_sizes.iter().sum()
    }

    pub fn lookup(&self, lang: usize, word: usize) -> TokenRef {
        self.rows[lang][word]
    }

    /// For each table row, the `(lang, word)` of its first (lowest id) source word.
    /// UNK rows map to `None`.
    pub fn representatives(&self) -> Vec<Vec<Option<(usize, usize)>>> {
        let mut reps: Vec<Vec<Option<(usize, usize)>>> = self.table_sizes.iter().map(|&n| vec![None; n]).collect();
        for (lang, rows) in self.rows.iter().enumerate() {
            for (word, r) in rows.iter().enumerate() {
                if self.unk[r.table] == Some(r.row) {
                    continue;
                }
                let slot = &mut reps[r.table][r.row];
                let better = match *slot {
                    None => true,
                    // Prefer the table's own language, then lowest word id.
                    Some((l, _)) => l != r.table && lang == r.table,
                };
                if better {
                    *slot = Some((lang, word));
                }
            }
        }
        reps
    }
}

/// Keeps words with per-language training frequency ≥ `t`; the rest share
/// one UNK row per language. `t = 1` is the identity, unseen words included.
pub fn frequency_threshold(stats: &VocabStats, t: u64) -> Result<VocabMapping> {
    if t == 0 {
        return Err(VocabError::Config("threshold must be at least 1".into()));
    }
    let mut rows = Vec::new();
    let mut table_sizes = Vec::new();
    let mut unk = Vec::new();
    for (lang, counts) in stats.counts.iter().enumerate() {
        let (lang_rows, size, u) = threshold_language(lang, counts, t, |_| None);
        rows.push(lang_rows);
        table_sizes.push(size);
        unk.push(u);
    }
    Ok(VocabMapping { rows, table_sizes, unk })
}

/// Words at or above `t` get dense rows in their own table; rarer words go to
/// `redirect(word)` if it returns a target, else to the table's UNK row.
fn threshold_language(
    lang: usize,
    counts: &[u64],
    t: u64,
    redirect: impl Fn(usize) -> Option<TokenRef>,
) -> (Vec<TokenRef>, usize, Option<usize>) {
    let mut next = 0;
    let mut rows = vec![TokenRef { table: lang, row: usize::MAX }; counts.len()];
    let mut needs_unk = Vec::new();
    for (w, &c) in counts.iter().enumerate() {
        if c >= t || t == 1 {
            rows[w].row = next;
            next += 1;
        } else if let Some(target) = redirect(w) {
            rows[w] = target;
        } else {
            needs_unk.push(w);
        }
    }
    let unk = (!needs_unk.is_empty()).then_some(next);
    for w in needs_unk {
        rows[w].row = next;
    }
    (rows, next + unk.is_some() as usize, unk)
}

/// Word-to-pivot-word translations for every non-pivot language.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dictionary {
    pub pivot: usize,
    /// `[lang]` -> source word -> pivot word. Empty for the pivot itself.
    pub entries: Vec<BTreeMap<usize, usize>>,
}

impl Dictionary {
    /// Exact dictionary from the generator's concept map: each word maps to
    /// the pivot language's most common word for the same concept.
    pub fn from_lexicon(lexicon: &Lexicon, pivot: usize) -> Result<Self> {
        if pivot >= lexicon.word_concepts.len() {
            return Err(VocabError::Dictionary(format!("pivot index {pivot} out of range")));
        }
        let concept_words = lexicon.concept_words();
        let head: Vec<Option<usize>> = concept_words[pivot]
            .iter()
            .map(|words| {
                words.iter().copied().fold(None, |best: Option<usize>, w| match best {
                    Some(b) if lexicon.word_weights[pivot][b] >= lexicon.word_weights[pivot][w] => Some(b),
                    _ => Some(w),
                })
            })
            .collect();
        let entries = lexicon
            .word_concepts
            .iter()
            .enumerate()
            .map(|(l, wc)| {
                if l == pivot {
                    return BTreeMap::new();
                }
                wc.iter()
                    .enumerate()
                    .filter_map(|(w, &c)| head[c].map(|p| (w, p)))
                    .collect()
            })
            .collect();
        Ok(Self { pivot, entries })
    }

    pub fn validate(&self, vocab_sizes: &[usize]) -> Result<()> {
        if self.entries.len() != vocab_sizes.len() || self.pivot >= vocab_sizes.len() {
            return Err(VocabError::Dictionary("language count mismatch".into()));
        }
        for (l, map) in self.entries.iter().enumerate() {
            for (&src, &dst) in map {
                if src >= vocab_sizes[l] || dst >= vocab_sizes[self.pivot] {
                    return Err(VocabError::Dictionary(format!("entry {src}->{dst} for language #{l} is out of range")));
                }
            }
        }
        Ok(())
    }

    /// Reads `src_lang \t src_word \t pivot_word` lines.
    pub fn read(path: &Path, languages: &[LanguageId], pivot: usize) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut entries = vec![BTreeMap::new(); languages.len()];
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| VocabError::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected src_lang, src_word, pivot_word".into()));
            }
            let l = languages
                .iter()
                .position(|x| x.as_str() == f[0])
                .ok_or_else(|| bad(format!("unknown language {:?}", f[0])))?;
            let src = f[1].parse().map_err(|_| bad(format!("bad word id {:?}", f[1])))?;
            let dst = f[2].parse().map_err(|_| bad(format!("bad word id {:?}", f[2])))?;
            entries[l].insert(src, dst);
        }
        Ok(Self { pivot, entries })
    }

    pub fn write(&self, path: &Path, languages: &[LanguageId]) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (l, map) in self.entries.iter().enumerate() {
            for (src, dst) in map {
                writeln!(w, "{}\t{src}\t{dst}", languages[l])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Pivot language keeps every word; other languages keep words with frequency
/// ≥ `t` and send rarer words to their pivot translation's row, or to UNK.
pub fn dictionary_map(stats: &VocabStats, t: u64, dictionary: &Dictionary) -> Result<VocabMapping> {
    if t == 0 {
        return Err(VocabError::Config("threshold must be at least 1".into()));
    }
    let sizes: Vec<usize> = stats.counts.iter().map(Vec::len).collect();
    dictionary.validate(&sizes)?;
    let pivot = dictionary.pivot;
    let mut rows = vec![Vec::new(); sizes.len()];
    let mut table_sizes = vec![0; sizes.len()];
    let mut unk = vec![None; sizes.len()];
    rows[pivot] = (0..sizes[pivot]).map(|w| TokenRef { table: pivot, row: w }).collect();
    table_sizes[pivot] = sizes[pivot];
    for (lang, counts) in stats.counts.iter().enumerate() {
        if lang == pivot {
            continue;
        }
        let redirect = |w: usize| dictionary.entries[lang].get(&w).map(|&p| TokenRef { table: pivot, row: p });
        let (r, size, u) = threshold_language(lang, counts, t, redirect);
        rows[lang] = r;
        table_sizes[lang] = size;
        unk[lang] = u;
    }
    Ok(VocabMapping { rows, table_sizes, unk })
}

/// One line of `reduction_report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub method: String,
    pub setting: String,
    pub vocab_size: usize,
    pub params: usize,
    /// Average mR on the evaluation split, if the configuration was trained.
    pub average_recall: Option<f64>,
}

pub fn write_reduction_report(rows: &[ReductionRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# thresholds are applied per language")?;
    writeln!(w, "method,setting,vocab_size,params,A")?;
    for r in rows {
        let a = r.average_recall.map(|a| format!("{a:.1}")).unwrap_or_default();
        writeln!(w, "{},{},{},{},{a}", r.method, r.setting, r.vocab_size, r.params)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageRecord, Origin, Sentence, Splits};

    fn stats(counts: &[&[u64]]) -> VocabStats {
        VocabStats {
            counts: counts.iter().map(|c| c.to_vec()).collect(),
        }
    }

    #[test]
    fn counts_one_sentence() {
        // words: a=0, b=1, c=2 (unused)
        let corpus = Corpus {
            languages: vec![LanguageId::new("x")],
            vocab_sizes: vec![3],
            feature_dim: 1,
            images: vec![ImageRecord { id: 0, feature: vec![0.0], concepts: vec![] }],
            sentences: vec![Sentence {
                image_id: 0,
                lang: 0,
                tokens: vec![0, 1, 0],
                origin: Origin::Human,
                concepts: vec![],
            }],
            splits: Splits { train: vec![0], val: vec![], test: vec![] },
            lexicon: None,
        };
        let s = count_frequencies(&corpus).unwrap();
        assert_eq!(s.seen(0).collect::<Vec<_>>(), vec![(0, 2), (1, 1)]);
        assert_eq!(s.total_types(0), 2);
        assert_eq!(s.total_tokens(0), 3);
    }

    #[test]
    fn top_k_orders_by_frequency() {
        let s = stats(&[&[10, 5, 1]]);
        let split = split_top_k(&s, 2);
        assert_eq!(split.specific[0], vec![0, 1]);
        assert_eq!(split.agnostic[0], vec![2]);
        let none = split_top_k(&s, 0);
        assert!(none.specific[0].is_empty());
        assert_eq!(none.agnostic[0], vec![0, 1, 2]);
        let all = split_top_k(&s, 7);
        assert!(all.agnostic[0].is_empty());
    }

    #[test]
    fn top_k_ties_go_to_lower_ids() {
        let s = stats(&[&[3, 5, 3, 3]]);
        let split = split_top_k(&s, 2);
        assert_eq!(split.specific[0], vec![1, 0]);
        assert_eq!(split.agnostic[0], vec![2, 3]);
    }

    #[test]
    fn threshold_rule() {
        let s = stats(&[&[10, 3]]);
        let m = frequency_threshold(&s, 4).unwrap();
        assert_eq!(m.table_sizes, vec![2]);
        assert_eq!(m.lookup(0, 0).row, 0);
        assert_eq!(m.lookup(0, 1).row, 1);
        assert_eq!(m.unk[0], Some(1));
        let id = frequency_threshold(&s, 1).unwrap();
        assert_eq!(id.vocab_size(), 2);
        assert_eq!(id.unk[0], None);
        assert!(frequency_threshold(&s, 0).is_err());
    }

    #[test]
    fn dictionary_redirects_rare_words() {
        let s = stats(&[&[9, 9, 9], &[2, 8, 1]]);
        let dict = Dictionary {
            pivot: 0,
            entries: vec![BTreeMap::new(), BTreeMap::from([(0, 2)])],
        };
        let m = dictionary_map(&s, 4, &dict).unwrap();
        assert_eq!(m.lookup(1, 0), TokenRef { table: 0, row: 2 });
        assert_eq!(m.lookup(1, 1), TokenRef { table: 1, row: 0 });
        assert_eq!(m.lookup(1, 2), TokenRef { table: 1, row: 1 });
        assert_eq!(m.unk[1], Some(1));
        assert_eq!(m.table_sizes, vec![3, 2]);
        let bad = Dictionary {
            pivot: 0,
            entries: vec![BTreeMap::new(), BTreeMap::from([(0, 7)])],
        };
        assert!(dictionary_map(&s, 4, &bad).is_err());
    }

    #[test]
    fn representatives_prefer_own_language() {
        let s = stats(&[&[9, 9, 9], &[2, 8, 1]]);
        let dict = Dictionary {
            pivot: 0,
            entries: vec![BTreeMap::new(), BTreeMap::from([(0, 2)])],
        };
        let reps = dictionary_map(&s, 4, &dict).unwrap().representatives();
        assert_eq!(reps[0][2], Some((0, 2)));
        assert_eq!(reps[1], vec![Some((1, 1)), None]);
    }
}
