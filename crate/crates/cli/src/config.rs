//! Config files and flag overrides. Precedence: built-in defaults, then the
//! `--config` file, then `--paper-dims`, then individual flags.

use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use polyembed_core::hem::HemConfig;
use polyembed_core::model::ModelConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Reads a JSON or TOML file. A `run.json` contributes its `config` object,
/// so any earlier run can be replayed.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).with_context(|| format!("parsing TOML {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON {}", path.display()))?
    };
    Ok(match value {
        Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
            map.remove("config").expect("checked")
        }
        v => v,
    })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the file's fields laid over it.
pub fn layered<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(base);
    };
    let mut value = serde_json::to_value(&base)?;
    merge(&mut value, read_config_file(path)?);
    serde_json::from_value(value).with_context(|| format!("config {} does not match the expected shape", path.display()))
}

/// Model, vocabulary and loss settings shared by every training command.
#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// JSON or TOML config (a previous run.json also works).
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 512-D universal/joint spaces, 50-D reduced vectors, 40000 latent rows, K = 5000.
    #[arg(long)]
    pub paper_dims: bool,
    #[arg(long)]
    pub joint_dim: Option<usize>,
    #[arg(long)]
    pub image_hidden: Option<usize>,
    /// Top-K frequent words per language kept language-specific (0 = language-agnostic only).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub universal_dim: Option<usize>,
    #[arg(long)]
    pub reduced_dim: Option<usize>,
    /// Latent vocabulary size before pruning.
    #[arg(long)]
    pub latent_size: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the masked cross-language term (λ2).
    #[arg(long, alias = "lambda2")]
    pub lambda_mask: Option<f64>,
    #[arg(long)]
    pub lambda_adv: Option<f64>,
    #[arg(long)]
    pub lambda_nc: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub explore_p: Option<f64>,
    #[arg(long)]
    pub explore_m: Option<usize>,
    /// Always take the best-matching latent token during pretraining.
    #[arg(long)]
    pub no_explore: bool,
    /// Drop the masked cross-language terms.
    #[arg(long)]
    pub no_mclm: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_batch_size: Option<usize>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = layered(ModelConfig::default(), self.config.as_deref())?;
        if self.paper_dims {
            let full = ModelConfig::full_scale();
            cfg.joint_dim = full.joint_dim;
            cfg.image_hidden = full.image_hidden;
            cfg.pretrain.hem = HemConfig {
                specific_mode: cfg.pretrain.hem.specific_mode,
                ..full.pretrain.hem
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.pretrain.seed = s;
        }
        let hem = &mut cfg.pretrain.hem;
        set(&mut cfg.joint_dim, self.joint_dim);
        set(&mut cfg.image_hidden, self.image_hidden);
        set(&mut hem.k, self.k);
        set(&mut hem.universal_dim, self.universal_dim);
        set(&mut hem.reduced_dim, self.reduced_dim);
        set(&mut hem.latent_size, self.latent_size);
        let w = &mut cfg.weights;
        set(&mut w.lambda1, self.lambda1);
        set(&mut w.lambda_mask, self.lambda_mask);
        set(&mut w.lambda_adv, self.lambda_adv);
        set(&mut w.lambda_nc, self.lambda_nc);
        set(&mut w.margin, self.margin);
        set(&mut w.top_n, self.top_n);
        set(&mut w.mask_ratio, self.mask_ratio);
        // Pretraining mines with the same margin and top-N.
        set(&mut cfg.pretrain.margin, self.margin);
        set(&mut cfg.pretrain.top_n, self.top_n);
        if self.no_explore {
            cfg.pretrain.explore = None;
        } else if self.explore_p.is_some() || self.explore_m.is_some() {
            let mut e = cfg.pretrain.explore.unwrap_or_default();
            set(&mut e.p, self.explore_p);
            set(&mut e.m, self.explore_m);
            cfg.pretrain.explore = Some(e);
        }
        if self.no_mclm {
            cfg.mclm = false;
        }
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.adam.learning_rate, self.lr);
        set(&mut cfg.pretrain.epochs, self.pretrain_epochs);
        set(&mut cfg.pretrain.batch_size, self.pretrain_batch_size);
        cfg.check()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
