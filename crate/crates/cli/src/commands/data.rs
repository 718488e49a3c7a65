//! Data-stage subcommands: gen-vqa, pretrain-vlm, collect-data.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use pr2l_core::gridcraft::{self, GridObservation, TaskSpec};
use pr2l_core::navhome::{generate_offline_dataset, NavTrajectory, NAV_ACTIONS};
use pr2l_core::repr::EnvFamily;
use pr2l_core::vlm::vqa::{make_gridcraft_vqa, make_navhome_vqa, VqaDataset};
use pr2l_core::vlm::vocab::Vocab;
use pr2l_core::vlm::{pretrain::pretrain, VlmModel};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::record_timing;

use super::{write_json, write_text};

fn build_vqa(cfg: &ExperimentConfig) -> Result<VqaDataset> {
    Ok(match cfg.family {
        EnvFamily::Gridcraft => make_gridcraft_vqa(cfg.vqa.per_family, cfg.vqa.seed)?,
        EnvFamily::Navhome => make_navhome_vqa(cfg.vqa.per_family, cfg.vqa.seed)?,
    })
}

pub fn gen_vqa(cfg: &ExperimentConfig) -> Result<()> {
    let data = build_vqa(cfg)?;
    let vocab = Vocab::new();
    let dir = cfg.out.join("vqa");
    write_text(&dir.join("vqa.jsonl"), &data.to_jsonl(&vocab))?;
    write_json(
        &dir.join("vqa_stats.json"),
        &json!({
            "samples": data.samples.len(),
            "yes_fraction": data.yes_fraction(),
            "per_family": cfg.vqa.per_family,
            "seed": cfg.vqa.seed,
        }),
    )?;
    println!("gen-vqa: {} samples -> {}", data.samples.len(), dir.display());
    Ok(())
}

pub fn pretrain_vlm(cfg: &ExperimentConfig) -> Result<()> {
    let data = build_vqa(cfg)?;
    let mut model = VlmModel::init(cfg.vlm.clone(), cfg.pretrain.seed);
    let t0 = Instant::now();
    let report = pretrain(&mut model, &data.samples, &cfg.pretrain.to_core())?;
    std::fs::create_dir_all(&cfg.out)?;
    record_timing(&cfg.out, "pretrain-vlm", t0.elapsed().as_secs_f64())?;

    let ckpt = cfg.out.join("vlm.ckpt");
    model.save(&ckpt)?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        curve.push_str(&format!("{e},{l:.6}\n"));
    }
    write_text(&cfg.out.join("pretrain_curve.csv"), &curve)?;
    write_json(
        &cfg.out.join("pretrain_report.json"),
        &serde_json::to_value(&report)?,
    )?;
    for f in &report.holdout {
        println!(
            "pretrain-vlm: {:<22} holdout {:.3} ({} samples)",
            f.family,
            f.accuracy(),
            f.n
        );
    }
    if report.aborted {
        return Err(CliError::Numerical(
            "pretraining hit a non-finite loss and reverted to the last finite parameters".into(),
        ));
    }
    println!("pretrain-vlm: saved {}", ckpt.display());
    Ok(())
}

/// One recorded expert step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertStep {
    pub obs: GridObservation,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertEpisode {
    pub world_seed: u64,
    pub success: bool,
    pub steps: Vec<ExpertStep>,
}

pub fn roll_expert_episodes(task: &TaskSpec, episodes: usize, seed: u64) -> Result<Vec<ExpertEpisode>> {
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let world_seed = seed.wrapping_add(ep as u64);
        let mut st = gridcraft::create_world(task, world_seed)?;
        let mut steps = Vec::new();
        let mut info = gridcraft::StepInfo::default();
        while !st.done {
            let obs = st.observe();
            let action = gridcraft::expert_action(&st);
            let (_, reward, done, i) = gridcraft::step(&mut st, action)?;
            info = i;
            steps.push(ExpertStep {
                obs,
                action,
                reward,
                done,
            });
        }
        out.push(ExpertEpisode {
            world_seed,
            success: info.successes > 0,
            steps,
        });
    }
    Ok(out)
}

pub fn load_expert_episodes(path: &Path) -> Result<Vec<ExpertEpisode>> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingArtifact {
        path: path.to_path_buf(),
        producer: "collect-data",
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn load_nav_trajectories(path: &Path) -> Result<Vec<NavTrajectory>> {
    let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingArtifact {
        path: path.to_path_buf(),
        producer: "collect-data",
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// One-sample Kolmogorov-Smirnov statistic against uniform [0, hi].
pub fn ks_uniform(samples: &[f64], hi: f64) -> f64 {
    let mut s: Vec<f64> = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let mut ks = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let cdf = (x / hi).clamp(0.0, 1.0);
        let lo_emp = i as f64 / n;
        let hi_emp = (i + 1) as f64 / n;
        ks = ks.max((cdf - lo_emp).abs()).max((hi_emp - cdf).abs());
    }
    ks
}

pub fn collect_data(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.out.join("data");
    std::fs::create_dir_all(&dir)?;
    match cfg.family {
        EnvFamily::Gridcraft => {
            let task = TaskSpec::by_name(&cfg.task)?;
            let episodes = roll_expert_episodes(&task, cfg.collect.episodes, cfg.collect.seed)?;
            let mut body = String::new();
            for e in &episodes {
                body.push_str(&serde_json::to_string(e)?);
                body.push('\n');
            }
            write_text(&dir.join("expert.jsonl"), &body)?;
            let successes = episodes.iter().filter(|e| e.success).count();
            let transitions: usize = episodes.iter().map(|e| e.steps.len()).sum();
            write_json(
                &dir.join("stats.json"),
                &json!({
                    "kind": "gridcraft-expert",
                    "task": cfg.task,
                    "episodes": episodes.len(),
                    "transitions": transitions,
                    "expert_success_rate": successes as f64 / episodes.len().max(1) as f64,
                    "seed": cfg.collect.seed,
                }),
            )?;
            println!(
                "collect-data: {} expert episodes ({} transitions, {:.1}% success)",
                episodes.len(),
                transitions,
                100.0 * successes as f64 / episodes.len().max(1) as f64
            );
        }
        EnvFamily::Navhome => {
            let layouts =
                crate::envs::training_layouts(cfg.collect.layouts, cfg.collect.layout_size)?;
            let (trajs, stats) =
                generate_offline_dataset(&layouts, cfg.collect.episodes_per_goal, cfg.collect.seed);
            let mut body = String::new();
            for t in &trajs {
                body.push_str(&serde_json::to_string(t)?);
                body.push('\n');
            }
            write_text(&dir.join("offline.jsonl"), &body)?;
            let total_random: u64 = stats.random_branch_counts.iter().sum();
            let freqs: Vec<f64> = (0..NAV_ACTIONS)
                .map(|a| stats.random_branch_counts[a] as f64 / total_random.max(1) as f64)
                .collect();
            let transitions: usize = trajs.iter().map(|t| t.transitions.len()).sum();
            let successes = trajs.iter().filter(|t| t.result.success).count();
            write_json(
                &dir.join("stats.json"),
                &json!({
                    "kind": "navhome-offline",
                    "layouts": layouts.len(),
                    "trajectories": trajs.len(),
                    "transitions": transitions,
                    "data_success_rate": successes as f64 / trajs.len().max(1) as f64,
                    "random_branch_frequencies": freqs,
                    "inject_frac_ks_vs_uniform": ks_uniform(&stats.inject_fracs, 0.9),
                    "seed": cfg.collect.seed,
                }),
            )?;
            println!(
                "collect-data: {} trajectories ({} transitions) over {} layouts",
                trajs.len(),
                transitions,
                layouts.len()
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_statistic_is_zero_for_perfect_grid_and_large_for_shifted() {
        let n = 1000;
        let grid: Vec<f64> = (0..n).map(|i| 0.9 * (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_uniform(&grid, 0.9) < 1e-3);
        let shifted: Vec<f64> = (0..n).map(|i| 0.45 + 0.45 * (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_uniform(&shifted, 0.9) > 0.4);
    }

    #[test]
    fn expert_episodes_round_trip_through_jsonl() {
        let task = TaskSpec::by_name("combat_spider").unwrap();
        let eps = roll_expert_episodes(&task, 3, 42).unwrap();
        assert_eq!(eps.len(), 3);
        assert!(eps.iter().all(|e| !e.steps.is_empty()));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("expert.jsonl");
        let mut body = String::new();
        for e in &eps {
            body.push_str(&serde_json::to_string(e).unwrap());
            body.push('\n');
        }
        std::fs::write(&p, &body).unwrap();
        let back = load_expert_episodes(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].steps.len(), eps[0].steps.len());
        assert_eq!(back[0].success, eps[0].success);
    }

    #[test]
    fn missing_dataset_names_collect_data() {
        let err = load_expert_episodes(Path::new("/nonexistent/expert.jsonl")).unwrap_err();
        assert!(matches!(
            err,
            CliError::MissingArtifact { producer: "collect-data", .. }
        ));
    }
}
