//! `run.json`: what produced the files in an output directory.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use polyembed_core::digest::{canonical_hash, file_sha256};
use serde::Serialize;

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a str,
    argv: Vec<String>,
    config: &'a C,
    config_hash: String,
    seed: u64,
    git_describe: String,
    /// Input files by path.
    inputs: BTreeMap<String, String>,
    /// Output files in the run directory by name.
    artifacts: BTreeMap<String, String>,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Collects every regular file under `dir` (relative names), except
/// `run.json` itself.
fn artifact_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/");
            if name == "run.json" {
                continue;
            }
            out.insert(name, file_sha256(&path)?);
        }
    }
    Ok(out)
}

pub struct Run<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub inputs: &'a [&'a Path],
}

impl Run<'_> {
    /// Writes `dir/run.json` after the outputs are in place.
    pub fn finish<C: Serialize>(&self, dir: &Path, config: &C) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for p in self.inputs {
            if p.is_file() {
                inputs.insert(p.display().to_string(), file_sha256(p)?);
            }
        }
        let record = RunRecord {
            command: self.command,
            argv: std::env::args().collect(),
            config,
            config_hash: canonical_hash(config),
            seed: self.seed,
            git_describe: git_describe(),
            inputs,
            artifacts: artifact_hashes(dir)?,
        };
        let path = dir.join("run.json");
        std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}
