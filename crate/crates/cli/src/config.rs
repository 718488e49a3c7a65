//! Experiment configuration: JSON file + flag overrides, validated against
//! the condition registry with nearest-key suggestions for typos.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use pr2l_core::learners::{CQLConfig, PPOConfig};
use pr2l_core::repr::{EnvFamily, GRIDCRAFT_CONDITIONS, NAVHOME_CONDITIONS};
use pr2l_core::tensor::optim::LRSchedule;
use pr2l_core::vlm::VlmConfig;

use crate::error::{CliError, Result};

/// VQA generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqaSection {
    pub per_family: usize,
    pub seed: u64,
}

impl Default for VqaSection {
    fn default() -> Self {
        VqaSection {
            per_family: 5000,
            seed: 1,
        }
    }
}

/// VLM pretraining parameters (epochs/batch/lr mirror the core defaults).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f32,
    pub holdout_frac: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 3,
            batch_size: 16,
            lr: 3e-4,
            grad_clip: 1.0,
            holdout_frac: 0.1,
            seed: 0,
        }
    }
}

impl PretrainSection {
    pub fn to_core(&self) -> pr2l_core::vlm::pretrain::PretrainConfig {
        pr2l_core::vlm::pretrain::PretrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: LRSchedule::Constant(self.lr),
            grad_clip: self.grad_clip,
            holdout_frac: self.holdout_frac,
            seed: self.seed,
        }
    }
}

/// Data collection parameters: expert episodes for gridcraft, noisy offline
/// trajectories for navhome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectSection {
    /// Gridcraft: expert episodes to roll.
    pub episodes: usize,
    /// Navhome: number of training-house layouts.
    pub layouts: usize,
    /// Navhome: held-out validation layouts (disjoint seeds).
    pub holdout_layouts: usize,
    pub layout_size: usize,
    pub episodes_per_goal: usize,
    pub seed: u64,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection {
            episodes: 240,
            layouts: 6,
            holdout_layouts: 4,
            layout_size: 16,
            episodes_per_goal: 12,
            seed: 7,
        }
    }
}

/// Prompt-eval / probe clip collection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipSection {
    pub clips: usize,
    pub frames_per_clip: usize,
    pub seed: u64,
}

impl Default for ClipSection {
    fn default() -> Self {
        ClipSection {
            clips: 120,
            frames_per_clip: 6,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySection {
    pub projection: usize,
    pub heads: usize,
    pub ff: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            projection: 64,
            heads: 2,
            ff: 128,
            mlp_hidden: 64,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// "gridcraft" or "navhome".
    pub family: EnvFamily,
    /// Gridcraft task name (combat_spider, combat_zombie, ..., milk, shear)
    /// or navhome goal class (toilet, bed, sofa).
    pub task: String,
    pub condition: String,
    /// Extra conditions for sweep fan-out (comparison columns).
    pub conditions: Vec<String>,
    /// Learner the sweep subcommand drives: "ppo", "bc", or "cql".
    pub learner: String,
    pub vlm_checkpoint: Option<PathBuf>,
    /// Dataset artifact consumed by offline learners (produced by
    /// collect-data).
    pub data: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
    pub eval_episodes: usize,
    /// Navhome evaluation episodes per (held-out layout, goal) pair.
    pub nav_eval_episodes_per_goal: usize,
    pub vqa: VqaSection,
    pub pretrain: PretrainSection,
    pub vlm: VlmConfig,
    pub collect: CollectSection,
    pub clips: ClipSection,
    pub policy: PolicySection,
    pub ppo: PPOConfig,
    pub bc_epochs: usize,
    pub bc_lr: f64,
    pub cql: CQLConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            family: EnvFamily::Gridcraft,
            task: "combat_spider".into(),
            condition: "pr2l".into(),
            conditions: Vec::new(),
            learner: "ppo".into(),
            vlm_checkpoint: None,
            data: None,
            seeds: (0..8).collect(),
            out: PathBuf::from("runs/default"),
            workers: 1,
            cache_dir: None,
            eval_episodes: 16,
            nav_eval_episodes_per_goal: 2,
            vqa: VqaSection::default(),
            pretrain: PretrainSection::default(),
            vlm: VlmConfig::default(),
            collect: CollectSection::default(),
            clips: ClipSection::default(),
            policy: PolicySection::default(),
            ppo: PPOConfig::default(),
            bc_epochs: 3,
            bc_lr: 1e-4,
            cql: CQLConfig::default(),
        }
    }
}

/// Flag overrides (beat file values).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub condition: Option<String>,
    pub task: Option<String>,
}

fn edit_distance(a: &str, b: &str) -> usize {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, &cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            cur.push((prev[j] + cost).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn nearest<'a>(key: &str, valid: impl Iterator<Item = &'a String>) -> Option<String> {
    valid
        .map(|v| (edit_distance(key, v), v))
        .min()
        .map(|(_, v)| v.clone())
}

/// Recursively verify that every key in `user` exists in `schema` (the JSON
/// serialization of the defaults), suggesting the nearest valid key.
fn check_keys(user: &Value, schema: &Value, path: &str) -> Result<()> {
    let (Value::Object(u), Value::Object(s)) = (user, schema) else {
        return Ok(());
    };
    for (k, v) in u {
        match s.get(k) {
            None => {
                let mut msg = format!("unknown config key {:?}", join_path(path, k));
                if let Some(n) = nearest(k, s.keys()) {
                    msg.push_str(&format!("; nearest valid key is {:?}", join_path(path, &n)));
                }
                return Err(CliError::Config(msg));
            }
            Some(sv) => check_keys(v, sv, &join_path(path, k))?,
        }
    }
    Ok(())
}

fn join_path(path: &str, k: &str) -> String {
    if path.is_empty() {
        k.to_string()
    } else {
        format!("{path}.{k}")
    }
}

/// Merge `user` over `base` (objects recursively, everything else replaced).
fn merge(base: &mut Value, user: &Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// All conditions the CLI accepts per family, including the rationale alias.
pub fn registry(family: EnvFamily) -> Vec<&'static str> {
    match family {
        EnvFamily::Gridcraft => GRIDCRAFT_CONDITIONS.to_vec(),
        EnvFamily::Navhome => {
            let mut v = NAVHOME_CONDITIONS.to_vec();
            v.push("pr2l_cot");
            v
        }
    }
}

/// Resolve user-facing condition names to core registry names.
pub fn resolve_condition(family: EnvFamily, name: &str) -> Result<String> {
    if name == "pr2l_cot" || name == "pr2l_rationale" {
        if family == EnvFamily::Gridcraft {
            return Err(CliError::Config(format!(
                "condition {name:?} is invalid for gridcraft: rationale prompts are navhome-only"
            )));
        }
        return Ok("pr2l_rationale".to_string());
    }
    if name == "random" {
        // Pseudo-condition handled by eval/sweep; never needs a provider.
        return Ok("random".to_string());
    }
    let known = registry(family);
    if known.contains(&name) {
        Ok(name.to_string())
    } else {
        let owned: Vec<String> = known.iter().map(|s| s.to_string()).collect();
        let hint = nearest(name, owned.iter())
            .map(|n| format!("; nearest valid condition is {n:?}"))
            .unwrap_or_default();
        Err(CliError::Config(format!(
            "unknown condition {name:?} for {family:?}{hint}"
        )))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, over: &Overrides) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let user: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let mut base = serde_json::to_value(ExperimentConfig::default()).expect("serializable");
        check_keys(&user, &base, "")?;
        merge(&mut base, &user);
        let mut cfg: ExperimentConfig = serde_json::from_value(base)
            .map_err(|e| CliError::Config(format!("invalid config value: {e}")))?;

        if let Some(s) = over.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &over.out {
            cfg.out = o.clone();
        }
        if let Some(w) = over.workers {
            cfg.workers = w;
        }
        if let Some(c) = &over.condition {
            cfg.condition = c.clone();
        }
        if let Some(t) = &over.task {
            cfg.task = t.clone();
        }
        if cfg.cache_dir.is_none() {
            if let Ok(dir) = std::env::var("PR2L_CACHE_DIR") {
                if !dir.is_empty() {
                    cfg.cache_dir = Some(PathBuf::from(dir));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Config("duplicate seeds in seed list".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if !["ppo", "bc", "cql"].contains(&self.learner.as_str()) {
            return Err(CliError::Config(format!(
                "unknown learner {:?}; expected ppo, bc, or cql",
                self.learner
            )));
        }
        resolve_condition(self.family, &self.condition)?;
        for c in &self.conditions {
            resolve_condition(self.family, c)?;
        }
        match self.family {
            EnvFamily::Gridcraft => {
                pr2l_core::gridcraft::TaskSpec::by_name(&self.task)
                    .map_err(|e| CliError::Config(format!("invalid gridcraft task: {e}")))?;
            }
            EnvFamily::Navhome => {
                crate::envs::parse_goal(&self.task)?;
            }
        }
        // The checkpoint's existence is checked at use time (load_vlm), so
        // the producing subcommands can run with the same config.
        Ok(())
    }

    /// The VLM target word for the configured task.
    pub fn target(&self) -> String {
        match self.family {
            EnvFamily::Gridcraft => {
                let task = pr2l_core::gridcraft::TaskSpec::by_name(&self.task).expect("validated");
                format!("{:?}", task.kind.target_kind()).to_lowercase()
            }
            EnvFamily::Navhome => self.task.clone(),
        }
    }

    pub fn condition_for(&self, name: &str) -> Result<pr2l_core::repr::Condition> {
        let resolved = resolve_condition(self.family, name)?;
        pr2l_core::repr::make_condition(&resolved, self.family, &self.target())
            .map_err(|e| CliError::Config(format!("condition {name:?}: {e}")))
    }
}
