use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{prune_unused, AssignmentMap, HemError, Result};
use crate::corpus::LanguageId;
use crate::losses::glorot;
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};
use crate::vocab::{VocabMapping, VocabSplit};

/// Token vectors for a batch of sentences: one table node holding every
/// distinct token row the batch needs, and per-sentence row indices into it.
#[derive(Clone, Debug)]
pub struct TokenRows {
    pub table: NodeId,
    pub index: Vec<Vec<usize>>,
}

impl TokenRows {
    /// `sentences × dim` mean of the token rows, optionally over a subset of
    /// positions (`keep[s][t]`). Built as one matmul against a constant
    /// averaging matrix.
    pub fn mean(&self, g: &mut Graph, keep: Option<&[Vec<bool>]>) -> Result<NodeId> {
        let n = g.value(self.table).rows();
        let mut weights = vec![0.0; self.index.len() * n];
        for (s, rows) in self.index.iter().enumerate() {
            let kept: Vec<usize> = match keep {
                Some(k) => rows.iter().zip(&k[s]).filter(|(_, &k)| k).map(|(&r, _)| r).collect(),
                None => rows.clone(),
            };
            if kept.is_empty() {
                return Err(HemError::Config(format!("sentence {s} has no tokens to average")));
            }
            for r in &kept {
                weights[s * n + r] += 1.0 / kept.len() as f64;
            }
        }
        let avg = g.constant(Tensor::matrix(self.index.len(), n, weights)?);
        Ok(g.matmul(avg, self.table)?)
    }
}

/// How language-specific (frequent) words are embedded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecificMode {
    /// Per-language affine projection of the frozen reduced pretrained vector.
    #[default]
    Projected,
    /// Free per-word rows, initialized from the projection.
    PerWord,
}

/// Whether agnostic words read their latent row only, or (during latent
/// pretraining) the latent row with gradients also routed to the word's
/// projection, so the projection learns where words should be assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LookupMode {
    Final,
    Pretrain,
}

pub(crate) fn pretrained_name(lang: &LanguageId) -> String {
    format!("hem.pretrained.{lang}")
}
pub(crate) fn fc_names(lang: &LanguageId) -> (String, String) {
    (format!("hem.fc.{lang}.w"), format!("hem.fc.{lang}.b"))
}
pub(crate) fn specific_name(lang: &LanguageId) -> String {
    format!("hem.specific.{lang}")
}
pub(crate) const LATENT_NAME: &str = "hem.latent";

fn param(g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
    let id = store.id_of(name).ok_or_else(|| HemError::MissingParam(name.to_string()))?;
    Ok(g.param(store, id))
}

fn stored<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    let id = store.id_of(name).ok_or_else(|| HemError::MissingParam(name.to_string()))?;
    Ok(store.get(id))
}

/// Frequent words keep language-specific embeddings; every other word reads
/// the single shared latent row it was assigned to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridEmbedder {
    pub languages: Vec<LanguageId>,
    pub vocab_sizes: Vec<usize>,
    pub universal_dim: usize,
    pub reduced_dim: usize,
    pub split: VocabSplit,
    pub specific_mode: SpecificMode,
    /// Saved separately as `assign.tsv`.
    #[serde(skip)]
    pub assignment: AssignmentMap,
}

impl HybridEmbedder {
    /// Registers frozen reduced pretrained tables, per-language projections
    /// (identically initialized, since the reduced spaces share one basis)
    /// and a random latent table. The assignment starts empty.
    pub fn register(
        store: &mut ParamStore,
        languages: Vec<LanguageId>,
        reduced: Vec<Tensor>,
        split: VocabSplit,
        universal_dim: usize,
        latent_size: usize,
        specific_mode: SpecificMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduced.len() != languages.len() || split.specific.len() != languages.len() {
            return Err(HemError::Config("one table and vocabulary split per language required".into()));
        }
        let reduced_dim = reduced.first().map(|t| t.cols()).unwrap_or(0);
        let w = glorot(rng, reduced_dim, universal_dim);
        let mut vocab_sizes = Vec::with_capacity(languages.len());
        for (lang, table) in languages.iter().zip(reduced) {
            if table.cols() != reduced_dim {
                return Err(HemError::Config("reduced tables disagree on dimension".into()));
            }
            vocab_sizes.push(table.rows());
            store.add(pretrained_name(lang), table, false);
            let (wn, bn) = fc_names(lang);
            store.add(wn, w.clone(), true);
            store.add(bn, Tensor::zeros(&[universal_dim]), true);
        }
        let scale = 1.0 / (universal_dim as f64).sqrt();
        let latent: Vec<f64> = (0..latent_size * universal_dim)
            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        store.add(LATENT_NAME, Tensor::new(vec![latent_size, universal_dim], latent)?, true);
        let assignment = AssignmentMap {
            rows: vocab_sizes.iter().map(|&v| vec![None; v]).collect(),
            frozen: false,
        };
        Ok(Self {
            languages,
            vocab_sizes,
            universal_dim,
            reduced_dim,
            split,
            specific_mode,
            assignment,
        })
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn latent_rows(&self, store: &ParamStore) -> Result<usize> {
        Ok(stored(store, LATENT_NAME)?.rows())
    }

    /// Projection of every word of `lang` into the universal space, outside any graph.
    pub fn project_all(&self, store: &ParamStore, lang: usize) -> Result<Tensor> {
        let l = &self.languages[lang];
        let table = stored(store, &pretrained_name(l))?;
        let (wn, bn) = fc_names(l);
        let (w, b) = (stored(store, &wn)?, stored(store, &bn)?);
        let d = self.universal_dim;
        let mut out = vec![0.0; table.rows() * d];
        for r in 0..table.rows() {
            let x = table.row(r);
            let o = &mut out[r * d..(r + 1) * d];
            o.copy_from_slice(b.data());
            for (k, &xk) in x.iter().enumerate() {
                for (oj, wj) in o.iter_mut().zip(w.row(k)) {
                    *oj += xk * wj;
                }
            }
        }
        Ok(Tensor::new(vec![table.rows(), d], out)?)
    }

    fn check_word(&self, lang: usize, word: usize) -> Result<()> {
        if lang >= self.languages.len() || word >= self.vocab_sizes[lang] {
            return Err(HemError::UnknownWord { lang, word });
        }
        Ok(())
    }

    pub fn lookup(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sentences: &[(usize, &[usize])],
        mode: LookupMode,
    ) -> Result<TokenRows> {
        if mode == LookupMode::Final && !self.assignment.frozen {
            return Err(HemError::Assignment("embedder used before its assignment was frozen".into()));
        }
        let slots = self.split.specific_slots();
        // Distinct words per language that go through the projection, and
        // distinct latent rows read directly.
        let mut projected: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); self.languages.len()];
        let mut latent: BTreeMap<usize, usize> = BTreeMap::new();
        for &(l, tokens) in sentences {
            for &w in tokens {
                self.check_word(l, w)?;
                let specific = slots[l][w].is_some();
                if specific || mode == LookupMode::Pretrain {
                    let next = projected[l].len();
                    projected[l].entry(w).or_insert(next);
                } else {
                    let r = self
                        .assignment
                        .get(l, w)
                        .ok_or_else(|| HemError::Assignment(format!("word {w} of language #{l} unassigned")))?;
                    let next = latent.len();
                    latent.entry(r).or_insert(next);
                }
            }
        }

        let mut parts = Vec::new();
        let mut offset = 0;
        let mut row_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (l, words) in projected.iter().enumerate() {
            if words.is_empty() {
                continue;
            }
            let ordered: Vec<usize> = {
                let mut v: Vec<(usize, usize)> = words.iter().map(|(&w, &i)| (i, w)).collect();
                v.sort_unstable();
                v.into_iter().map(|(_, w)| w).collect()
            };
            let lang = &self.languages[l];
            let rows = match (mode, self.specific_mode) {
                (LookupMode::Final, SpecificMode::PerWord) => {
                    let table = param(g, store, &specific_name(lang))?;
                    let idx = ordered.iter().map(|&w| slots[l][w].expect("specific word")).collect();
                    g.gather_rows(table, idx)?
                }
                _ => {
                    let table = param(g, store, &pretrained_name(lang))?;
                    let (wn, bn) = fc_names(lang);
                    let (w, b) = (param(g, store, &wn)?, param(g, store, &bn)?);
                    let x = g.gather_rows(table, ordered.clone())?;
                    let proj = g.linear(x, w, b)?;
                    if mode == LookupMode::Pretrain {
                        self.substitute_latent(g, store, l, &ordered, &slots[l], proj)?
                    } else {
                        proj
                    }
                }
            };
            for (i, &w) in ordered.iter().enumerate() {
                row_of.insert((l, w), offset + i);
            }
            offset += ordered.len();
            parts.push(rows);
        }
        let latent_base = offset;
        if !latent.is_empty() {
            let mut ordered: Vec<(usize, usize)> = latent.iter().map(|(&r, &i)| (i, r)).collect();
            ordered.sort_unstable();
            let table = param(g, store, LATENT_NAME)?;
            parts.push(g.gather_rows(table, ordered.into_iter().map(|(_, r)| r).collect())?);
        }
        if parts.is_empty() {
            return Err(HemError::Config("lookup on an empty batch".into()));
        }
        let table = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let index = sentences
            .iter()
            .map(|&(l, tokens)| {
                tokens
                    .iter()
                    .map(|&w| match row_of.get(&(l, w)) {
                        Some(&r) => r,
                        None => latent_base + latent[&self.assignment.get(l, w).expect("checked above")],
                    })
                    .collect()
            })
            .collect();
        Ok(TokenRows { table, index })
    }

    /// Replaces agnostic rows of `proj` by their latent rows, keeping the
    /// projection on the gradient path.
    fn substitute_latent(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lang: usize,
        words: &[usize],
        slots: &[Option<usize>],
        proj: NodeId,
    ) -> Result<NodeId> {
        let agnostic: Vec<usize> = (0..words.len()).filter(|&i| slots[words[i]].is_none()).collect();
        if agnostic.is_empty() {
            return Ok(proj);
        }
        let latent_idx = agnostic
            .iter()
            .map(|&i| {
                self.assignment
                    .get(lang, words[i])
                    .ok_or_else(|| HemError::Assignment(format!("word {} of language #{lang} unassigned", words[i])))
            })
            .collect::<Result<Vec<_>>>()?;
        let table = param(g, store, LATENT_NAME)?;
        let value = g.gather_rows(table, latent_idx)?;
        let proxy = g.gather_rows(proj, agnostic.clone())?;
        let through = g.straight_through(value, proxy)?;
        // Reassemble in the original order: specific rows from `proj`, agnostic from `through`.
        let specific: Vec<usize> = (0..words.len()).filter(|&i| slots[words[i]].is_some()).collect();
        let spec_rows = if specific.is_empty() {
            None
        } else {
            Some(g.gather_rows(proj, specific.clone())?)
        };
        let stacked = match spec_rows {
            Some(s) => g.concat_rows(&[s, through])?,
            None => through,
        };
        let mut position = vec![0; words.len()];
        for (k, &i) in specific.iter().chain(&agnostic).enumerate() {
            position[i] = k;
        }
        Ok(g.gather_rows(stacked, position)?)
    }

    /// Trainable floats the finished embedder uses: surviving latent rows,
    /// plus per language with any specific words either its projection
    /// (`reduced·D + D`) or its per-word rows (`K·D`).
    pub fn parameter_count(&self, store: &ParamStore) -> Result<usize> {
        let d = self.universal_dim;
        let mut n = self.latent_rows(store)? * d;
        for spec in &self.split.specific {
            if spec.is_empty() {
                continue;
            }
            n += match self.specific_mode {
                SpecificMode::Projected => self.reduced_dim * d + d,
                SpecificMode::PerWord => spec.len() * d,
            };
        }
        Ok(n)
    }

    /// Freezes the current assignment, drops unused latent rows, checks the
    /// map is total, and settles parameters for training.
    pub fn finalize(&mut self, store: &mut ParamStore) -> Result<()> {
        self.assignment.frozen = true;
        let latent_id = store
            .id_of(LATENT_NAME)
            .ok_or_else(|| HemError::MissingParam(LATENT_NAME.into()))?;
        let (pruned, map) = prune_unused(store.get(latent_id), &self.assignment)?;
        self.assignment = map;
        store.set(latent_id, pruned);
        self.assignment.check_total(&self.split, self.latent_rows(store)?)?;
        self.settle_params(store)
    }

    /// Marks parameters the finished embedder never reads as frozen, and
    /// materializes per-word tables if requested.
    fn settle_params(&self, store: &mut ParamStore) -> Result<()> {
        for (l, lang) in self.languages.iter().enumerate() {
            let (wn, bn) = fc_names(lang);
            let uses_fc = !self.split.specific[l].is_empty() && self.specific_mode == SpecificMode::Projected;
            for name in [wn, bn] {
                let id = store.id_of(&name).ok_or_else(|| HemError::MissingParam(name.clone()))?;
                let value = store.get(id).clone();
                store.add(name, value, uses_fc);
            }
            if self.specific_mode == SpecificMode::PerWord {
                let proj = self.project_all(store, l)?;
                let d = self.universal_dim;
                let mut data = Vec::with_capacity(self.split.specific[l].len() * d);
                for &w in &self.split.specific[l] {
                    data.extend_from_slice(proj.row(w));
                }
                store.add(specific_name(lang), Tensor::new(vec![self.split.specific[l].len(), d], data)?, true);
            }
        }
        Ok(())
    }
}

/// Baseline embedder: one trainable row per (reduced) vocabulary entry and a
/// per-table projection into the universal space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordTableEmbedder {
    pub languages: Vec<LanguageId>,
    pub input_dim: usize,
    pub universal_dim: usize,
    pub mapping: VocabMapping,
}

pub(crate) fn table_names(lang: &LanguageId) -> (String, String, String) {
    (
        format!("table.{lang}"),
        format!("table_fc.{lang}.w"),
        format!("table_fc.{lang}.b"),
    )
}

impl WordTableEmbedder {
    /// Table rows start from the input vector of the row's representative
    /// word; UNK rows start from the mean vector of the words they absorb.
    pub fn register(
        store: &mut ParamStore,
        languages: Vec<LanguageId>,
        inputs: &[Tensor],
        mapping: VocabMapping,
        universal_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input_dim = inputs.first().map(|t| t.cols()).unwrap_or(0);
        let reps = mapping.representatives();
        let w = glorot(rng, input_dim, universal_dim);
        for (t, lang) in languages.iter().enumerate() {
            let mut mean = vec![0.0; input_dim];
            let mut absorbed = 0usize;
            for (l, rows) in mapping.rows.iter().enumerate() {
                for (word, r) in rows.iter().enumerate() {
                    if r.table == t && mapping.unk[t] == Some(r.row) {
                        absorbed += 1;
                        for (m, v) in mean.iter_mut().zip(inputs[l].row(word)) {
                            *m += v;
                        }
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= absorbed.max(1) as f64);
            let mut data = Vec::with_capacity(mapping.table_sizes[t] * input_dim);
            for rep in &reps[t] {
                match rep {
                    Some((l, word)) => data.extend_from_slice(inputs[*l].row(*word)),
                    None => data.extend_from_slice(&mean),
                }
            }
            let (tn, wn, bn) = table_names(lang);
            store.add(tn, Tensor::new(vec![mapping.table_sizes[t], input_dim], data)?, true);
            store.add(wn, w.clone(), true);
            store.add(bn, Tensor::zeros(&[universal_dim]), true);
        }
        Ok(Self {
            languages,
            input_dim,
            universal_dim,
            mapping,
        })
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, sentences: &[(usize, &[usize])]) -> Result<TokenRows> {
        let mut needed: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); self.languages.len()];
        for &(l, tokens) in sentences {
            for &w in tokens {
                let r = self
                    .mapping
                    .rows
                    .get(l)
                    .and_then(|rows| rows.get(w))
                    .ok_or(HemError::UnknownWord { lang: l, word: w })?;
                let next = needed[r.table].len();
                needed[r.table].entry(r.row).or_insert(next);
            }
        }
        let mut parts = Vec::new();
        let mut base = vec![0; self.languages.len()];
        let mut offset = 0;
        for (t, rows) in needed.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let mut ordered: Vec<(usize, usize)> = rows.iter().map(|(&r, &i)| (i, r)).collect();
            ordered.sort_unstable();
            let (tn, wn, bn) = table_names(&self.languages[t]);
            let table = param(g, store, &tn)?;
            let (w, b) = (param(g, store, &wn)?, param(g, store, &bn)?);
            let x = g.gather_rows(table, ordered.into_iter().map(|(_, r)| r).collect())?;
            parts.push(g.linear(x, w, b)?);
            base[t] = offset;
            offset += rows.len();
        }
        if parts.is_empty() {
            return Err(HemError::Config("lookup on an empty batch".into()));
        }
        let table = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let index = sentences
            .iter()
            .map(|&(l, tokens)| {
                tokens
                    .iter()
                    .map(|&w| {
                        let r = self.mapping.rows[l][w];
                        base[r.table] + needed[r.table][&r.row]
                    })
                    .collect()
            })
            .collect();
        Ok(TokenRows { table, index })
    }

    /// `Σ rows·input + Σ (input·D + D)` over tables.
    pub fn parameter_count(&self) -> usize {
        let d = self.universal_dim;
        self.mapping
            .table_sizes
            .iter()
            .map(|&rows| rows * self.input_dim + self.input_dim * d + d)
            .sum()
    }
}

/// The token-embedding front end of the retrieval model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Embedder {
    Hybrid(HybridEmbedder),
    Table(WordTableEmbedder),
}

impl Embedder {
    pub fn universal_dim(&self) -> usize {
        match self {
            Embedder::Hybrid(h) => h.universal_dim,
            Embedder::Table(t) => t.universal_dim,
        }
    }

    pub fn languages(&self) -> &[LanguageId] {
        match self {
            Embedder::Hybrid(h) => &h.languages,
            Embedder::Table(t) => &t.languages,
        }
    }

    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, sentences: &[(usize, &[usize])]) -> Result<TokenRows> {
        match self {
            Embedder::Hybrid(h) => h.lookup(g, store, sentences, LookupMode::Final),
            Embedder::Table(t) => t.lookup(g, store, sentences),
        }
    }

    pub fn parameter_count(&self, store: &ParamStore) -> Result<usize> {
        match self {
            Embedder::Hybrid(h) => h.parameter_count(store),
            Embedder::Table(t) => Ok(t.parameter_count()),
        }
    }

    /// Distinct token rows: specific words plus surviving latent rows, or
    /// the table rows of a baseline vocabulary.
    pub fn vocab_size(&self, store: &ParamStore) -> Result<usize> {
        match self {
            Embedder::Hybrid(h) => {
                Ok(h.split.specific.iter().map(Vec::len).sum::<usize>() + h.latent_rows(store)?)
            }
            Embedder::Table(t) => Ok(t.mapping.vocab_size()),
        }
    }
}
