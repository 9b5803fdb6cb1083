use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use polyembed_core::clc::{clc_adam, train_clc, ClcClassifier};
use polyembed_core::corpus::Split;
use polyembed_core::eval::{clc_blocks, evaluate, EvalMode, EvalOptions};
use polyembed_core::model::RetrievalModel;
use serde::Serialize;

use crate::data::{input_refs, DataArgs};
use crate::run::Run;
use crate::train::METRICS;

pub const CLC_WEIGHTS: &str = "clc.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Direct,
    TransPivot,
    ClcAverage,
    ClcClassifier,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory written by `train` or `baseline`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "direct")]
    pub mode: ModeArg,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Pivot language for trans-pivot; defaults to the model's first language.
    #[arg(long)]
    pub pivot: Option<String>,
    /// Classifier weights for clc-classifier.
    #[arg(long)]
    pub clc: Option<PathBuf>,
    /// Seeds the simulated test-time translations.
    #[arg(long, default_value_t = 0)]
    pub translation_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalRecord<'a> {
    mode: &'a EvalMode,
    split: Split,
    model_dir: String,
    model_config_hash: &'a str,
    translation_noise: f64,
    translation_seed: u64,
    classifier: Option<String>,
}

fn load_model(dir: &std::path::Path) -> Result<(RetrievalModel, polyembed_core::tensor::ParamStore)> {
    RetrievalModel::load(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn load_classifier(path: &std::path::Path, model: &RetrievalModel) -> Result<ClcClassifier> {
    let clf = ClcClassifier::load(path).with_context(|| format!("loading classifier from {}", path.display()))?;
    anyhow::ensure!(
        clf.languages == model.languages.len(),
        "classifier expects {} languages, the model has {}",
        clf.languages,
        model.languages.len()
    );
    Ok(clf)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let data = args.data.load()?;
    let (model, store) = load_model(&args.model)?;
    let mode = match args.mode {
        ModeArg::Direct => EvalMode::Direct,
        ModeArg::TransPivot => EvalMode::TransPivot {
            pivot: match &args.pivot {
                Some(code) => polyembed_core::corpus::LanguageId::new(code.as_str()),
                None => model.languages[0].clone(),
            },
        },
        ModeArg::ClcAverage => EvalMode::ClcAverage,
        ModeArg::ClcClassifier => EvalMode::ClcClassifier,
    };
    let translator = match args.mode {
        ModeArg::Direct => None,
        _ => Some(args.data.translator(&data.corpus)?),
    };
    let classifier = match (args.mode, &args.clc) {
        (ModeArg::ClcClassifier, Some(path)) => Some(load_classifier(path, &model)?),
        (ModeArg::ClcClassifier, None) => anyhow::bail!("--mode clc-classifier needs --clc <clc.tsv>"),
        _ => None,
    };
    let opts = EvalOptions {
        translator: translator.as_ref(),
        classifier: classifier.as_ref(),
        seed: args.translation_seed,
    };
    write_report(&args.out, &data.corpus, &model, &store, args.split, &mode, &opts)?;
    let mut inputs = input_refs(&data.inputs);
    let ckpt = args.model.join("model.ckpt");
    inputs.push(&ckpt);
    inputs.extend(args.clc.as_deref());
    Run {
        command: "eval",
        seed: args.translation_seed,
        inputs: &inputs,
    }
    .finish(
        &args.out,
        &EvalRecord {
            mode: &mode,
            split: args.split,
            model_dir: args.model.display().to_string(),
            model_config_hash: &model.config_hash,
            translation_noise: args.data.translation_noise,
            translation_seed: args.translation_seed,
            classifier: args.clc.as_ref().map(|p| p.display().to_string()),
        },
    )
}

fn write_report(
    out: &std::path::Path,
    corpus: &polyembed_core::corpus::Corpus,
    model: &RetrievalModel,
    store: &polyembed_core::tensor::ParamStore,
    split: Split,
    mode: &EvalMode,
    opts: &EvalOptions<'_>,
) -> Result<()> {
    let report = evaluate(model, store, corpus, split, mode, opts)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(METRICS), report.to_csv())?;
    log::info!("HA {:.1}, A {:.1}", report.ha, report.a);
    Ok(())
}

#[derive(Subcommand, Debug)]
pub enum ClcCommand {
    /// Fit the score-fusion classifier on score vectors from one split.
    Train(ClcTrainArgs),
    /// Evaluate with average or learned fusion.
    Eval(ClcEvalArgs),
}

#[derive(Args, Debug)]
pub struct ClcTrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: Split,
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    /// Also learn the 32→1 output layer (385 parameters at ten languages
    /// instead of 352).
    #[arg(long)]
    pub clc_trainable_output: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ClcTrainRecord<'a> {
    split: Split,
    iterations: usize,
    trainable_output: bool,
    learning_rate: f64,
    model_config_hash: &'a str,
    translation_noise: f64,
    parameters: usize,
    initial_loss: f64,
    final_loss: f64,
}

pub fn clc_train(args: &ClcTrainArgs) -> Result<()> {
    let data = args.data.load()?;
    let (model, store) = load_model(&args.model)?;
    let translator = args.data.translator(&data.corpus)?;
    let blocks = clc_blocks(&model, &store, &data.corpus, args.split, &translator, args.seed)?;
    let mut clf = ClcClassifier::new(model.languages.len(), args.clc_trainable_output, args.seed);
    let adam = polyembed_core::tensor::AdamConfig {
        learning_rate: args.lr,
        ..clc_adam()
    };
    let report = train_clc(&mut clf, &blocks, args.iterations, &model.config.weights, adam)?;
    log::info!("fusion loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
    std::fs::create_dir_all(&args.out)?;
    clf.save(&args.out.join(CLC_WEIGHTS))?;
    let mut log_csv = String::from("iteration,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        log_csv.push_str(&format!("{},{l}\n", i + 1));
    }
    std::fs::write(args.out.join("clc_log.csv"), log_csv)?;
    let mut inputs = input_refs(&data.inputs);
    let ckpt = args.model.join("model.ckpt");
    inputs.push(&ckpt);
    Run {
        command: "clc train",
        seed: args.seed,
        inputs: &inputs,
    }
    .finish(
        &args.out,
        &ClcTrainRecord {
            split: args.split,
            iterations: report.iterations,
            trainable_output: args.clc_trainable_output,
            learning_rate: args.lr,
            model_config_hash: &model.config_hash,
            translation_noise: args.data.translation_noise,
            parameters: clf.parameter_count(),
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FusionArg {
    Average,
    Classifier,
}

#[derive(Args, Debug)]
pub struct ClcEvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "average")]
    pub mode: FusionArg,
    /// Weights written by `clc train` (classifier mode).
    #[arg(long)]
    pub clc: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub translation_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn clc_eval(args: &ClcEvalArgs) -> Result<()> {
    eval(&EvalArgs {
        data: args.data.clone(),
        model: args.model.clone(),
        mode: match args.mode {
            FusionArg::Average => ModeArg::ClcAverage,
            FusionArg::Classifier => ModeArg::ClcClassifier,
        },
        split: args.split,
        pivot: None,
        clc: args.clc.clone(),
        translation_seed: args.translation_seed,
        out: args.out.clone(),
    })
}
