//! Run manifests: the resolved config snapshot plus per-seed artifact paths,
//! written before training starts and never modified afterwards. Wall-clock
//! timings go to a sibling file so the manifest can stay immutable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub condition: String,
    pub task: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedArtifacts>,
}

impl RunManifest {
    pub fn new(subcommand: &str, condition: &str, cfg: &ExperimentConfig, dir: &Path) -> Self {
        let seeds = cfg
            .seeds
            .iter()
            .map(|&seed| {
                let sd = dir.join(format!("seed-{seed}"));
                SeedArtifacts {
                    seed,
                    checkpoint: sd.join("policy.ckpt"),
                    report_csv: sd.join("train.csv"),
                    report_json: sd.join("train.json"),
                    dir: sd,
                }
            })
            .collect();
        RunManifest {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            condition: condition.to_string(),
            task: cfg.task.clone(),
            config: cfg.clone(),
            seeds,
        }
    }

    /// Serialize to `dir/manifest.json`. Refuses to overwrite an existing
    /// manifest with different content (immutability); an identical rerun is
    /// allowed.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self)?;
        if path.exists() {
            let old = std::fs::read_to_string(&path)?;
            if old != body {
                return Err(CliError::Config(format!(
                    "manifest {} already exists with a different config; \
                     choose a fresh --out directory",
                    path.display()
                )));
            }
            return Ok(path);
        }
        atomic_write(&path, body.as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact {
            path: path.clone(),
            producer: "train-ppo",
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Write via a temp file + rename so readers never see partial content.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Append wall-clock timings without touching the manifest.
pub fn record_timing(dir: &Path, label: &str, seconds: f64) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("timings.csv"))?;
    writeln!(f, "{label},{seconds:.3}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_and_is_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let m = RunManifest::new("train-ppo", "pr2l", &cfg, dir.path());
        m.write(dir.path()).unwrap();
        // Identical rewrite allowed.
        m.write(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.condition, "pr2l");
        assert_eq!(loaded.seeds.len(), cfg.seeds.len());

        // Different content refused.
        let mut cfg2 = cfg;
        cfg2.task = "combat_zombie".into();
        let m2 = RunManifest::new("train-ppo", "pr2l", &cfg2, dir.path());
        assert!(m2.write(dir.path()).is_err());
    }
}
