use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use polyembed_core::corpus::{
    generate_synthetic, read_corpus, read_features, read_vectors, write_corpus, write_features, write_vectors, Corpus,
    PretrainedVectors, SyntheticConfig, Translator,
};
use polyembed_core::vocab::Dictionary;
use serde::Serialize;

use crate::config::layered;
use crate::run::Run;

pub const CORPUS: &str = "corpus.jsonl";
pub const VECTORS: &str = "vectors.tsv";
pub const DICTIONARY: &str = "dict.tsv";
pub const FEATURES: &str = "features.tsv";

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 2048-D image features and 300-D pretrained word vectors.
    #[arg(long)]
    pub paper_dims: bool,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub languages: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    /// Words per language.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Leading languages with human-written sentences; the rest are translated.
    #[arg(long)]
    pub human_languages: Option<usize>,
    #[arg(long)]
    pub synonym_rate: Option<f64>,
    #[arg(long)]
    pub sentences_per_image: Option<usize>,
    #[arg(long)]
    pub translation_noise: Option<f64>,
}

#[derive(Serialize)]
struct GenDataSummary<'a> {
    #[serde(flatten)]
    config: &'a SyntheticConfig,
    corpus_hash: String,
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = layered(SyntheticConfig::default(), args.config.as_deref())?;
    if args.paper_dims {
        cfg.feature_dim = 2048;
        cfg.pretrained_dim = 300;
    }
    macro_rules! apply {
        ($($field:ident <- $flag:ident),*) => {$(if let Some(v) = args.$flag { cfg.$field = v; })*};
    }
    apply!(seed <- seed, num_images <- images, num_languages <- languages, concepts <- concepts,
        vocab_per_lang <- vocab, synonym_rate <- synonym_rate, sentences_per_image <- sentences_per_image,
        translation_noise <- translation_noise);
    if args.human_languages.is_some() {
        cfg.human_languages = args.human_languages;
    }
    let data = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    write_corpus(&data.corpus, &args.out.join(CORPUS))?;
    write_vectors(&data.vectors, &args.out.join(VECTORS))?;
    let features: Vec<Vec<f64>> = data.corpus.images.iter().map(|i| i.feature.clone()).collect();
    write_features(&features, &args.out.join(FEATURES))?;
    let lexicon = data.corpus.lexicon.as_ref().context("generated corpus has no lexicon")?;
    Dictionary::from_lexicon(lexicon, 0)?.write(&args.out.join(DICTIONARY), &data.corpus.languages)?;
    log::info!("wrote {} images, {} sentences to {}", data.corpus.images.len(), data.corpus.sentences.len(), args.out.display());
    let summary = GenDataSummary {
        config: &cfg,
        corpus_hash: data.corpus.content_hash(),
    };
    Run {
        command: "gen-data",
        seed: cfg.seed,
        inputs: &[],
    }
    .finish(&args.out, &summary)
}

/// Where a command finds its corpus.
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Directory written by `gen-data` (corpus.jsonl, vectors.tsv, dict.tsv).
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Replace the corpus image features with `image_id \t f0 … fD` rows.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Noise rate of the simulated translator used by translation modes.
    #[arg(long, default_value_t = 0.1)]
    pub translation_noise: f64,
}

pub struct Data {
    pub corpus: Corpus,
    pub vectors: PretrainedVectors,
    pub inputs: Vec<PathBuf>,
}

impl DataArgs {
    pub fn load(&self) -> Result<Data> {
        let corpus_path = self.data.join(CORPUS);
        let vectors_path = self.data.join(VECTORS);
        let mut corpus = read_corpus(&corpus_path).with_context(|| format!("reading {}", corpus_path.display()))?;
        let vectors = read_vectors(&vectors_path).with_context(|| format!("reading {}", vectors_path.display()))?;
        let mut inputs = vec![corpus_path, vectors_path];
        if let Some(path) = &self.features {
            let features = read_features(path).with_context(|| format!("reading {}", path.display()))?;
            replace_features(&mut corpus, features)?;
            inputs.push(path.clone());
        }
        vectors.check_against(&corpus)?;
        Ok(Data { corpus, vectors, inputs })
    }

    /// The dictionary file, if `gen-data` (or the user) provided one.
    pub fn dictionary(&self, corpus: &Corpus, pivot: usize) -> Result<Option<Dictionary>> {
        let path = self.data.join(DICTIONARY);
        if !path.is_file() {
            return Ok(None);
        }
        let dict = Dictionary::read(&path, &corpus.languages, pivot)?;
        dict.validate(&corpus.vocab_sizes)?;
        Ok(Some(dict))
    }

    pub fn translator(&self, corpus: &Corpus) -> Result<Translator> {
        Translator::from_corpus(corpus, self.translation_noise).context("translation needs the corpus lexicon")
    }
}

fn replace_features(corpus: &mut Corpus, features: Vec<Vec<f64>>) -> Result<()> {
    if features.len() != corpus.images.len() {
        bail!("feature file has {} images, corpus has {}", features.len(), corpus.images.len());
    }
    corpus.feature_dim = features.first().map_or(0, Vec::len);
    for (image, f) in corpus.images.iter_mut().zip(features) {
        image.feature = f;
    }
    corpus.validate()?;
    Ok(())
}

pub fn input_refs(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}
