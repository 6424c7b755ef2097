//! Per-run manifest: enough to rerun bit for bit.

use std::path::Path;
use std::process::Command;

use serde::Serialize;

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub seed: u64,
    pub threads: usize,
    pub git_describe: String,
    pub crate_version: &'static str,
    pub optimizer: &'static str,
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.into(),
            config_hash: cfg.hash(),
            config: cfg.as_map(),
            seed: cfg.seed,
            threads: cfg.threads,
            git_describe: git_describe(),
            crate_version: env!("CARGO_PKG_VERSION"),
            optimizer: "rmsprop(decay=0.99, eps=1e-8) + warmup/cosine, global-norm clipping",
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(dir.join("config.txt"), self.config.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>())?;
        Ok(())
    }
}
