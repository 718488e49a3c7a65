//! analyze: PCA projections of packet embeddings over expert data.
//!
//! Gridcraft: scatter colored by decoded yes/no with a bimodality score and
//! the fraction of rewarded functional-action states in the "yes" cluster.
//! Navhome: scatter colored by expert return with per-room boxes.

use pr2l_core::evalkit::{
    answer_from_decoded, bimodality_score, pca_scatter, tokenwise_mean, value_coloring, PointTag,
    ScatterPoint,
};
use pr2l_core::gridcraft::WINDOW;
use pr2l_core::navhome::{generate_layout, NAV_WINDOW};
use pr2l_core::repr::{EnvFamily, Extractor};
use pr2l_core::vlm::vocab::Vocab;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

use super::{load_vlm, write_json};

/// Actions whose effect is on the world rather than the agent's pose.
const FUNCTIONAL_ACTIONS: [usize; 2] = [10, 11];
const REWARD_THRESHOLD: f64 = 0.1;

fn data_path(cfg: &ExperimentConfig, default_name: &str) -> std::path::PathBuf {
    cfg.data
        .clone()
        .unwrap_or_else(|| cfg.out.join("data").join(default_name))
}

fn analyze_gridcraft(cfg: &ExperimentConfig) -> Result<()> {
    let model = load_vlm(cfg)?;
    let cond = cfg.condition_for(&cfg.condition)?;
    let episodes = super::data::load_expert_episodes(&data_path(cfg, "expert.jsonl"))?;
    let vocab = Vocab::new();
    let mut extractor = Extractor::new(&model, cond.clone(), 0)?;
    if let Some(dir) = super::cache_dir_for(cfg) {
        extractor = extractor.with_cache(&dir)?;
    }
    let mut points = Vec::new();
    for e in &episodes {
        for s in &e.steps {
            let packet = extractor.packet(&s.obs.window, WINDOW, s.obs.hash64())?;
            let decoded_yes = answer_from_decoded(&packet.decoded, &vocab);
            let Some(yes) = decoded_yes else { continue };
            points.push(ScatterPoint {
                features: tokenwise_mean(&packet),
                tag: PointTag {
                    functional: FUNCTIONAL_ACTIONS.contains(&s.action),
                    rewarded: s.reward > REWARD_THRESHOLD,
                    decoded_yes: Some(yes),
                    room: None,
                    value: None,
                },
            });
        }
    }
    extractor.flush()?;
    if points.is_empty() {
        return Err(CliError::Other("no decodable expert states to analyze".into()));
    }
    let scatter = pca_scatter(&points, 0)?;
    let dir = cfg.out.join("analysis");
    std::fs::create_dir_all(&dir)?;
    scatter
        .export
        .write(&dir.join("scatter.csv"), &dir.join("scatter.svg"))?;
    let decoded_yes: Vec<bool> = points
        .iter()
        .map(|p| p.tag.decoded_yes.unwrap())
        .collect();
    let rewarded_functional: Vec<bool> = points
        .iter()
        .map(|p| p.tag.functional && p.tag.rewarded)
        .collect();
    let score = bimodality_score(&scatter.coords, &decoded_yes, &rewarded_functional)?;
    write_json(
        &dir.join("bimodality.json"),
        &serde_json::json!({
            "condition": cfg.condition,
            "task": cfg.task,
            "points": points.len(),
            "yes_points": decoded_yes.iter().filter(|&&y| y).count(),
            "rewarded_functional_points": rewarded_functional.iter().filter(|&&r| r).count(),
            "purity": score.purity,
            "rewarded_yes_fraction": score.rewarded_yes_fraction,
            "explained_variance": scatter.projection.explained,
        }),
    )?;
    println!(
        "analyze: {} points, purity {:.3}, rewarded-functional yes fraction {:.3}",
        points.len(),
        score.purity,
        score.rewarded_yes_fraction
    );
    Ok(())
}

fn analyze_navhome(cfg: &ExperimentConfig) -> Result<()> {
    let model = load_vlm(cfg)?;
    let cond = cfg.condition_for(&cfg.condition)?;
    let trajs = super::data::load_nav_trajectories(&data_path(cfg, "offline.jsonl"))?;
    let mut extractor = Extractor::new(&model, cond.clone(), 0)?;
    if let Some(dir) = super::cache_dir_for(cfg) {
        extractor = extractor.with_cache(&dir)?;
    }
    let mut points = Vec::new();
    for traj in &trajs {
        let layout = generate_layout(traj.layout_seed, cfg.collect.layout_size)?;
        // Monte Carlo return-to-go along the recorded trajectory.
        let mut rtg = vec![0.0f64; traj.transitions.len()];
        let mut acc = 0.0;
        for (i, tr) in traj.transitions.iter().enumerate().rev() {
            acc += tr.reward;
            rtg[i] = acc;
        }
        for (tr, &value) in traj.transitions.iter().zip(&rtg) {
            let packet = extractor.packet(&tr.obs.window, NAV_WINDOW, tr.obs.hash64())?;
            let idx = tr.obs.y as usize * layout.size + tr.obs.x as usize;
            let room = layout
                .room_of
                .get(idx)
                .filter(|&&r| r < layout.room_types.len())
                .map(|&r| layout.room_types[r].word().to_string());
            points.push(ScatterPoint {
                features: tokenwise_mean(&packet),
                tag: PointTag {
                    functional: false,
                    rewarded: tr.reward > REWARD_THRESHOLD,
                    decoded_yes: None,
                    room,
                    value: Some(value),
                },
            });
        }
    }
    extractor.flush()?;
    if points.is_empty() {
        return Err(CliError::Other("no offline states to analyze".into()));
    }
    let scatter = pca_scatter(&points, 0)?;
    let dir = cfg.out.join("analysis");
    std::fs::create_dir_all(&dir)?;
    scatter
        .export
        .write(&dir.join("scatter.csv"), &dir.join("scatter.svg"))?;
    let tags: Vec<PointTag> = points.iter().map(|p| p.tag.clone()).collect();
    let colored = value_coloring(&scatter.coords, &tags)?;
    colored
        .export
        .write(&dir.join("value_scatter.csv"), &dir.join("value_scatter.svg"))?;
    write_json(
        &dir.join("rooms.json"),
        &serde_json::json!({
            "condition": cfg.condition,
            "points": points.len(),
            "rooms": colored
                .boxes
                .iter()
                .map(|b| serde_json::json!({
                    "room": b.room,
                    "n": b.n,
                    "center": [b.cx, b.cy],
                    "spread": [b.sx, b.sy],
                }))
                .collect::<Vec<_>>(),
            "explained_variance": scatter.projection.explained,
        }),
    )?;
    println!(
        "analyze: {} points across {} room groups",
        points.len(),
        colored.boxes.len()
    );
    Ok(())
}

pub fn analyze(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.family {
        EnvFamily::Gridcraft => analyze_gridcraft(cfg),
        EnvFamily::Navhome => analyze_navhome(cfg),
    }
}
