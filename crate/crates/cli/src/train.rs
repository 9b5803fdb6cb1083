use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use polyembed_core::corpus::{LanguageId, Split};
use polyembed_core::eval::{evaluate, EvalMode, EvalOptions, MetricsReport};
use polyembed_core::hem::{pretrain_latent, Pretrained};
use polyembed_core::model::{train, ModelConfig, TrainInputs, TrainedModel, VocabChoice};
use polyembed_core::vocab::{write_reduction_report, Dictionary, ReductionRow};
use serde::Serialize;

use crate::config::{read_config_file, ModelArgs};
use crate::data::{input_refs, Data, DataArgs};
use crate::run::Run;

pub const METRICS: &str = "metrics.csv";
pub const REDUCTION_REPORT: &str = "reduction_report.csv";

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.model.resolve()?;
    let data = args.data.load()?;
    let out = pretrain_latent(&data.corpus, &data.vectors, &cfg.pretrain)?;
    if let Some(last) = out.log.last() {
        log::info!("pretraining done: loss {:.4}, {} latent rows in use", last.mean_loss, last.used_rows);
    }
    out.save(&args.out)?;
    Run {
        command: "pretrain-latent",
        seed: cfg.pretrain.seed,
        inputs: &input_refs(&data.inputs),
    }
    .finish(&args.out, &cfg)
}

/// Loads a `pretrain-latent` directory. Its recorded pretraining config
/// replaces the one from flags so the run record describes what was used.
fn load_pretrained(dir: &Path, cfg: &mut ModelConfig) -> Result<Pretrained> {
    let pretrained = Pretrained::load(dir).with_context(|| format!("loading pretrained vocabulary from {}", dir.display()))?;
    let record = dir.join("run.json");
    if record.is_file() {
        let used: ModelConfig = serde_json::from_value(read_config_file(&record)?)
            .with_context(|| format!("config in {}", record.display()))?;
        if used.pretrain != cfg.pretrain {
            log::warn!("using the pretraining config recorded in {}", record.display());
        }
        cfg.pretrain = used.pretrain;
    }
    Ok(pretrained)
}

fn fit(data: &Data, cfg: &ModelConfig, pretrained: Option<&Pretrained>, dictionary: Option<&Dictionary>) -> Result<TrainedModel> {
    let trained = train(
        TrainInputs {
            corpus: &data.corpus,
            vectors: &data.vectors,
            pretrained,
            dictionary,
        },
        cfg,
    )?;
    if let Some(best) = trained.validation.get(trained.model.best_epoch) {
        log::info!("kept epoch {} (validation mR {:.1})", best.epoch, best.val_mean_recall);
    }
    Ok(trained)
}

/// Saves the model and logs, evaluates on the test split and writes
/// `metrics.csv` and a one-row `reduction_report.csv`.
fn finish_model(
    out: &Path,
    data: &Data,
    trained: &TrainedModel,
    mode: &EvalMode,
    opts: &EvalOptions<'_>,
    method: &str,
    setting: String,
) -> Result<(MetricsReport, ReductionRow)> {
    trained.model.save(&trained.store, out)?;
    trained.write_logs(out)?;
    let report = evaluate(&trained.model, &trained.store, &data.corpus, Split::Test, mode, opts)?;
    std::fs::write(out.join(METRICS), report.to_csv())?;
    let row = ReductionRow {
        method: method.into(),
        setting,
        vocab_size: trained.model.embedder.vocab_size(&trained.store)?,
        params: trained.model.parameter_count(&trained.store)?,
        average_recall: Some(report.a),
    };
    write_reduction_report(std::slice::from_ref(&row), &out.join(REDUCTION_REPORT))?;
    log::info!("{method} {}: test A {:.1}, {} parameters", row.setting, report.a, row.params);
    Ok((report, row))
}

fn hybrid_method(cfg: &ModelConfig) -> (&'static str, String) {
    let k = cfg.pretrain.hem.k;
    (if k == 0 { "la" } else { "hem" }, format!("K={k}"))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a `pretrain-latent` output instead of pretraining here.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

pub fn train_cmd(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.model.resolve()?;
    train_hybrid("train", args, &mut cfg)
}

fn train_hybrid(command: &str, args: &TrainArgs, cfg: &mut ModelConfig) -> Result<()> {
    let data = args.data.load()?;
    let pretrained = args.pretrained.as_deref().map(|d| load_pretrained(d, cfg)).transpose()?;
    let trained = fit(&data, cfg, pretrained.as_ref(), None)?;
    let (method, setting) = hybrid_method(cfg);
    finish_model(&args.out, &data, &trained, &EvalMode::Direct, &EvalOptions::default(), method, setting)?;
    let mut inputs = input_refs(&data.inputs);
    let assign = args.pretrained.as_ref().map(|d| d.join("assign.tsv"));
    inputs.extend(assign.as_deref());
    Run {
        command,
        seed: cfg.seed,
        inputs: &inputs,
    }
    .finish(&args.out, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    /// Per-language frequency thresholding (settings: thresholds).
    Freq,
    /// PCA-reduced pretrained vectors over the full vocabulary (settings: dims).
    Pca,
    /// Rare words mapped to their pivot translation (settings: thresholds).
    Dict,
    /// Shared latent vocabulary only (K = 0).
    La,
    /// Pivot-only model; other languages translated at test time.
    TransPivot,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    pub kind: BaselineKind,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated thresholds (freq, dict) or dimensions (pca).
    #[arg(long, value_delimiter = ',')]
    pub settings: Vec<u64>,
    /// Pivot language code; defaults to the first corpus language.
    #[arg(long)]
    pub pivot: Option<String>,
    /// Seeds the simulated test-time translations.
    #[arg(long, default_value_t = 0)]
    pub translation_seed: u64,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Serialize)]
struct BaselineRecord<'a> {
    baseline: &'a str,
    settings: &'a [u64],
    pivot: Option<&'a LanguageId>,
    translation_noise: Option<f64>,
    translation_seed: Option<u64>,
    model: &'a ModelConfig,
}

fn pivot_of(data: &Data, code: Option<&str>) -> Result<(usize, LanguageId)> {
    let corpus = &data.corpus;
    let idx = match code {
        Some(c) => corpus.language_index(c).with_context(|| format!("pivot {c:?} is not a corpus language"))?,
        None => 0,
    };
    Ok((idx, corpus.languages[idx].clone()))
}

pub fn baseline(args: &BaselineArgs) -> Result<()> {
    let mut cfg = args.model.resolve()?;
    let name = args.kind.to_possible_value().expect("no skipped variants").get_name().to_string();
    if args.kind == BaselineKind::La {
        cfg.pretrain.hem.k = 0;
        cfg.vocab = VocabChoice::Hybrid;
        let train_args = TrainArgs {
            data: args.data.clone(),
            model: args.model.clone(),
            out: args.out.clone(),
            pretrained: args.pretrained.clone(),
        };
        return train_hybrid("baseline la", &train_args, &mut cfg);
    }
    let data = args.data.load()?;
    let mut rows = Vec::new();
    let mut record = BaselineRecord {
        baseline: &name,
        settings: &args.settings,
        pivot: None,
        translation_noise: None,
        translation_seed: None,
        model: &cfg,
    };
    let mut configs = Vec::new();
    match args.kind {
        BaselineKind::TransPivot => {
            let (pivot_idx, pivot) = pivot_of(&data, args.pivot.as_deref())?;
            let mut c = cfg.clone();
            c.languages = Some(vec![pivot.clone()]);
            c.vocab = VocabChoice::Hybrid;
            let pretrained = args.pretrained.as_deref().map(|d| load_pretrained(d, &mut c)).transpose()?;
            let trained = fit(&data, &c, pretrained.as_ref(), None)?;
            let translator = args.data.translator(&data.corpus)?;
            let opts = EvalOptions {
                translator: Some(&translator),
                classifier: None,
                seed: args.translation_seed,
            };
            let mode = EvalMode::TransPivot { pivot: pivot.clone() };
            let (_, row) = finish_model(&args.out, &data, &trained, &mode, &opts, &name, pivot.to_string())?;
            rows.push(row);
            configs.push(c);
            record.pivot = Some(&data.corpus.languages[pivot_idx]);
            record.translation_noise = Some(args.data.translation_noise);
            record.translation_seed = Some(args.translation_seed);
        }
        BaselineKind::Freq | BaselineKind::Pca | BaselineKind::Dict => {
            let settings = if args.settings.is_empty() {
                match args.kind {
                    BaselineKind::Pca => vec![5, 10],
                    _ => vec![1, 2, 3, 5],
                }
            } else {
                args.settings.clone()
            };
            let (pivot_idx, pivot) = pivot_of(&data, args.pivot.as_deref())?;
            let dictionary = match args.kind {
                BaselineKind::Dict => args.data.dictionary(&data.corpus, pivot_idx)?,
                _ => None,
            };
            for &s in &settings {
                let mut c = cfg.clone();
                let (label, setting) = match args.kind {
                    BaselineKind::Freq => {
                        c.vocab = VocabChoice::Frequency { threshold: s };
                        (format!("t{s}"), format!("t={s}"))
                    }
                    BaselineKind::Pca => {
                        c.vocab = VocabChoice::Pca { dim: s as usize };
                        (format!("d{s}"), format!("d={s}"))
                    }
                    _ => {
                        c.vocab = VocabChoice::Dictionary {
                            threshold: s,
                            pivot: pivot.clone(),
                        };
                        (format!("t{s}"), format!("t={s}"))
                    }
                };
                let trained = fit(&data, &c, None, dictionary.as_ref())?;
                let dir = args.out.join(format!("{name}-{label}"));
                let (_, row) = finish_model(&dir, &data, &trained, &EvalMode::Direct, &EvalOptions::default(), &name, setting)?;
                rows.push(row);
                configs.push(c);
            }
            if args.kind == BaselineKind::Dict {
                record.pivot = Some(&data.corpus.languages[pivot_idx]);
            }
        }
        BaselineKind::La => unreachable!("handled above"),
    }
    if configs.is_empty() {
        bail!("no baseline settings to run");
    }
    std::fs::create_dir_all(&args.out)?;
    write_reduction_report(&rows, &args.out.join(REDUCTION_REPORT))?;
    let mut inputs = input_refs(&data.inputs);
    let dict_path = args.data.data.join(crate::data::DICTIONARY);
    if args.kind == BaselineKind::Dict {
        inputs.push(&dict_path);
    }
    record.model = &configs[0];
    Run {
        command: "baseline",
        seed: cfg.seed,
        inputs: &inputs,
    }
    .finish(&args.out, &record)
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated values of the masked cross-language weight.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    parameter: &'a str,
    grid: &'a [f64],
    model: &'a ModelConfig,
}

pub const SWEEP_CSV: &str = "sweep_lambda2.csv";

/// Trains once per grid value; the latent vocabulary does not depend on the
/// swept weight, so it is pretrained once and shared.
pub fn sweep_lambda2(args: &SweepArgs) -> Result<()> {
    let mut cfg = args.model.resolve()?;
    let data = args.data.load()?;
    let pretrained = match &args.pretrained {
        Some(d) => load_pretrained(d, &mut cfg)?,
        None => pretrain_latent(&data.corpus, &data.vectors, &cfg.pretrain)?,
    };
    std::fs::create_dir_all(&args.out)?;
    let mut csv = String::from("lambda2,val_A,A\n");
    for &value in &args.grid {
        let mut c = cfg.clone();
        c.weights.lambda_mask = value;
        let trained = fit(&data, &c, Some(&pretrained), None)?;
        let best = trained
            .validation
            .get(trained.model.best_epoch)
            .map(|r| r.val_mean_recall)
            .context("training recorded no validation epochs")?;
        let report = evaluate(&trained.model, &trained.store, &data.corpus, Split::Test, &EvalMode::Direct, &EvalOptions::default())?;
        log::info!("lambda2 {value:e}: validation A {best:.1}, test A {:.1}", report.a);
        csv.push_str(&format!("{value:e},{best:.1},{:.1}\n", report.a));
    }
    std::fs::write(args.out.join(SWEEP_CSV), csv)?;
    Run {
        command: "sweep lambda2",
        seed: cfg.seed,
        inputs: &input_refs(&data.inputs),
    }
    .finish(
        &args.out,
        &SweepRecord {
            parameter: "lambda_mask",
            grid: &args.grid,
            model: &cfg,
        },
    )
}
