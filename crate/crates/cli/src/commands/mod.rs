//! Subcommand implementations.

pub mod analyze;
pub mod data;
pub mod evalcmd;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use pr2l_core::learners::iqm;
use pr2l_core::policy::PolicyConfig;
use pr2l_core::repr::{Condition, EnvFamily, MergeMode};
use pr2l_core::vlm::VlmModel;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::atomic_write;

/// Load the pretrained VLM named by the config.
pub fn load_vlm(cfg: &ExperimentConfig) -> Result<VlmModel> {
    let path = cfg.vlm_checkpoint.as_ref().ok_or_else(|| CliError::MissingArtifact {
        path: PathBuf::from("vlm_checkpoint (config key unset)"),
        producer: "pretrain-vlm",
    })?;
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path: path.clone(),
            producer: "pretrain-vlm",
        });
    }
    Ok(VlmModel::load(path)?)
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    atomic_write(path, body.as_bytes())
}

pub fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    atomic_write(path, body.as_bytes())
}

/// Central tendency over per-seed results: IQM with a standard error when
/// four or more seeds exist, plain mean otherwise (stderr omitted for a
/// single seed).
#[derive(Debug, Clone, Copy)]
pub struct Aggregate {
    pub center: f64,
    pub stderr: Option<f64>,
    pub kind: &'static str,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(CliError::Other("no values to aggregate".into()));
    }
    if values.len() >= 4 {
        let (center, se) = iqm(values)?;
        return Ok(Aggregate {
            center,
            stderr: Some(se),
            kind: "iqm",
            n: values.len(),
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Some((var / n).sqrt())
    } else {
        None
    };
    Ok(Aggregate {
        center: mean,
        stderr,
        kind: "mean",
        n: values.len(),
    })
}

impl Aggregate {
    pub fn stderr_str(&self) -> String {
        self.stderr.map(|s| format!("{s:.6}")).unwrap_or_default()
    }
}

/// Packet width produced by a condition given the VLM dimensions.
pub fn packet_dim(model: &VlmModel, cond: &Condition) -> usize {
    match cond.merge {
        MergeMode::ConcatSeq => model.config.d_model,
        MergeMode::StackDim => cond.layers * model.config.d_model,
    }
}

/// Policy configuration for a training run under the given condition.
pub fn policy_config(cfg: &ExperimentConfig, model: &VlmModel, cond: &Condition) -> PolicyConfig {
    let proprio = match cfg.family {
        EnvFamily::Gridcraft => crate::envs::GRIDCRAFT_PROPRIO_DIM,
        EnvFamily::Navhome => crate::envs::NAVHOME_PROPRIO_DIM,
    };
    let actions = match cfg.family {
        EnvFamily::Gridcraft => pr2l_core::gridcraft::NUM_ACTIONS,
        EnvFamily::Navhome => pr2l_core::navhome::NAV_ACTIONS,
    };
    let mut pc = PolicyConfig::new(packet_dim(model, cond), proprio, actions);
    pc.projection = cfg.policy.projection;
    pc.heads = cfg.policy.heads;
    pc.ff = cfg.policy.ff;
    pc.mlp_hidden = cfg.policy.mlp_hidden;
    pc.dropout = cfg.policy.dropout;
    pc
}

/// Shared cache directory for one (model, condition): reused only when the
/// model hash and prompt id match, which the cache enforces internally.
pub fn cache_dir_for(cfg: &ExperimentConfig) -> Option<PathBuf> {
    cfg.cache_dir.clone()
}
