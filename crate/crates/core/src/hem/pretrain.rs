use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedder::LATENT_NAME;
use super::{
    assign_token, reduce_pretrained, Exploration, HemConfig, HemError, HybridEmbedder, LookupMode,
    Result,
};
use crate::corpus::{Corpus, MinibatchSampler, PretrainedVectors, Split};
use crate::losses::hard_triplet_loss;
use crate::rng::{purpose, stream};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::vocab::{count_frequencies, split_top_k};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub hem: HemConfig,
    /// `None` disables exploration.
    pub explore: Option<Exploration>,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub top_n: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hem: HemConfig::default(),
            explore: Some(Exploration::default()),
            epochs: 30,
            batch_size: 32,
            margin: 0.05,
            top_n: 10,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Agnostic words whose latent row changed at the start of this epoch.
    pub reassigned: usize,
    pub used_rows: usize,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub embedder: HybridEmbedder,
    pub store: ParamStore,
    pub log: Vec<PretrainRecord>,
}

const EMBEDDER_JSON: &str = "embedder.json";
const EMBEDDER_CKPT: &str = "embedder.ckpt";
const ASSIGN_TSV: &str = "assign.tsv";
const LATENT_TSV: &str = "latent.tsv";
const LOG_CSV: &str = "pretrain_log.csv";

impl Pretrained {
    /// Writes the embedder description, its parameters, `assign.tsv`,
    /// `latent.tsv` and the per-epoch log into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        use std::io::Write;
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(&self.embedder).map_err(|e| HemError::Config(e.to_string()))?;
        std::fs::write(dir.join(EMBEDDER_JSON), json + "\n")?;
        self.store.save(&dir.join(EMBEDDER_CKPT))?;
        self.embedder.assignment.write_tsv(&dir.join(ASSIGN_TSV), &self.embedder.languages)?;
        let latent = self.store.id_of(LATENT_NAME).ok_or_else(|| HemError::MissingParam(LATENT_NAME.into()))?;
        write_latent_tsv(self.store.get(latent), &dir.join(LATENT_TSV))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(LOG_CSV))?);
        writeln!(w, "epoch,mean_loss,reassigned,used_rows")?;
        for r in &self.log {
            writeln!(w, "{},{},{},{}", r.epoch, r.mean_loss, r.reassigned, r.used_rows)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a directory written by [`Pretrained::save`]. The log is not
    /// restored. The assignment must be frozen.
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(EMBEDDER_JSON))?;
        let mut embedder: HybridEmbedder = serde_json::from_str(&text).map_err(|e| HemError::Config(e.to_string()))?;
        let store = ParamStore::load(&dir.join(EMBEDDER_CKPT))?;
        embedder.assignment = super::AssignmentMap::read_tsv(&dir.join(ASSIGN_TSV), &embedder.languages, &embedder.vocab_sizes)?;
        if !embedder.assignment.frozen {
            return Err(HemError::Assignment("assign.tsv is not frozen".into()));
        }
        let rows = embedder.latent_rows(&store)?;
        embedder.assignment.check_total(&embedder.split, rows)?;
        Ok(Self {
            embedder,
            store,
            log: Vec::new(),
        })
    }
}

/// Re-scores every agnostic word against the latent table (cosine between
/// its projection and each row) and reassigns it. Returns how many words moved.
pub fn reassign(
    embedder: &mut HybridEmbedder,
    store: &ParamStore,
    explore: Option<Exploration>,
    rng: &mut impl Rng,
) -> Result<usize> {
    let latent_id = store
        .id_of(LATENT_NAME)
        .ok_or_else(|| HemError::MissingParam(LATENT_NAME.into()))?;
    let latent = store.get(latent_id);
    let (rows, d) = (latent.rows(), latent.cols());
    let norms: Vec<f64> = (0..rows).map(|r| latent.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut changed = 0;
    for l in 0..embedder.num_languages() {
        if embedder.split.agnostic[l].is_empty() {
            continue;
        }
        let proj = embedder.project_all(store, l)?;
        for &w in &embedder.split.agnostic[l].clone() {
            let v = proj.row(w);
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nv == 0.0 {
                return Err(HemError::ZeroVector);
            }
            let scores: Vec<f64> = (0..rows)
                .map(|r| {
                    if norms[r] == 0.0 {
                        0.0
                    } else {
                        latent.row(r)[..d].iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (norms[r] * nv)
                    }
                })
                .collect();
            let pick = assign_token(&scores, explore, rng);
            let slot = &mut embedder.assignment.rows[l][w];
            if *slot != Some(pick) {
                changed += 1;
                *slot = Some(pick);
            }
        }
    }
    Ok(changed)
}

/// Learns the latent table and the word projections with a sentence-level
/// triplet loss over paired captions (any language pair), reassigning words
/// once per epoch, then freezes assignments at the argmax and prunes unused rows.
pub fn pretrain_latent(corpus: &Corpus, vectors: &PretrainedVectors, cfg: &PretrainConfig) -> Result<Pretrained> {
    cfg.hem.check()?;
    if let Some(e) = cfg.explore {
        e.check()?;
    }
    vectors.check_against(corpus)?;
    if cfg.hem.reduced_dim > vectors.dim() {
        return Err(HemError::Config(format!(
            "reduced dim {} exceeds pretrained dim {}",
            cfg.hem.reduced_dim,
            vectors.dim()
        )));
    }
    let stats = count_frequencies(corpus)?;
    let split = split_top_k(&stats, cfg.hem.k);
    let (reduced, _) = reduce_pretrained(vectors, cfg.hem.reduced_dim)?;
    let mut store = ParamStore::new();
    let mut init_rng = stream(cfg.seed, purpose::INIT);
    let mut embedder = HybridEmbedder::register(
        &mut store,
        corpus.languages.clone(),
        reduced,
        split,
        cfg.hem.universal_dim,
        cfg.hem.latent_size,
        cfg.hem.specific_mode,
        &mut init_rng,
    )?;
    let mut explore_rng = stream(cfg.seed, purpose::EXPLORE);
    let mut sampler = MinibatchSampler::new(corpus, Split::Train, cfg.batch_size, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut reassigned = reassign(&mut embedder, &store, cfg.explore, &mut explore_rng)?;
    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            reassigned = reassign(&mut embedder, &store, cfg.explore, &mut explore_rng)?;
        }
        let mut total = 0.0;
        let steps = sampler.batches_per_epoch();
        for _ in 0..steps {
            let batch = sampler.next_batch();
            let sentences: Vec<(usize, &[usize])> = batch
                .items
                .iter()
                .map(|it| &corpus.sentences[it.first])
                .chain(batch.items.iter().map(|it| &corpus.sentences[it.second]))
                .map(|s| (s.lang, s.tokens.as_slice()))
                .collect();
            let b = batch.items.len();
            let mut g = Graph::new();
            let rows = embedder.lookup(&mut g, &store, &sentences, LookupMode::Pretrain)?;
            let reps = rows.mean(&mut g, None)?;
            let first = g.gather_rows(reps, (0..b).collect())?;
            let second = g.gather_rows(reps, (b..2 * b).collect())?;
            let d12 = g.pairwise_cosine_distance(first, second)?;
            let d21 = g.transpose(d12)?;
            let l1 = hard_triplet_loss(&mut g, d12, |a, c| a == c, cfg.margin, cfg.top_n)?;
            let l2 = hard_triplet_loss(&mut g, d21, |a, c| a == c, cfg.margin, cfg.top_n)?;
            let loss = g.add(l1, l2)?;
            total += g.value(loss).item();
            let grads = g.backward(loss)?;
            adam.step(&mut store, &grads)?;
        }
        let used = embedder
            .assignment
            .used(embedder.latent_rows(&store)?)
            .iter()
            .filter(|&&u| u)
            .count();
        log::debug!("pretrain epoch {epoch}: loss {:.5}", total / steps.max(1) as f64);
        log.push(PretrainRecord {
            epoch,
            mean_loss: total / steps.max(1) as f64,
            reassigned,
            used_rows: used,
        });
    }

    reassign(&mut embedder, &store, None, &mut explore_rng)?;
    embedder.finalize(&mut store)?;
    Ok(Pretrained { embedder, store, log })
}

/// Writes the latent table as `row \t v0 … vD` lines. Values use the
/// shortest round-tripping decimal form, so reading back is bit-exact.
pub fn write_latent_tsv(table: &Tensor, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..table.rows() {
        write!(w, "{r}")?;
        for v in table.row(r) {
            write!(w, "\t{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_latent_tsv(path: &std::path::Path) -> Result<Tensor> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| HemError::Parse { line: i + 1, msg };
        let mut fields = line.split('\t');
        let idx: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("missing row index".into()))?;
        if idx != rows.len() {
            return Err(bad(format!("expected row {}, found {idx}", rows.len())));
        }
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad value {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if rows.first().is_some_and(|r| r.len() != row.len()) || row.is_empty() {
            return Err(bad("row width differs".into()));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(HemError::Config("latent table file is empty".into()));
    }
    Ok(Tensor::from_rows(&rows)?)
}
