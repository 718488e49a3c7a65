//! Evaluation subcommands: eval, prompt-eval, probe.

use std::path::PathBuf;

use serde_json::json;

use pr2l_core::evalkit::{
    collect_labeled_clips, decoded_token_mean, detection_rates, train_linear_probe, ClipFrame,
    ProbeConfig,
};
use pr2l_core::gridcraft::{TargetPosition, TaskSpec, WINDOW};
use pr2l_core::policy::{act, ActMode, Policy, RecurrentState};
use pr2l_core::repr::{Extractor, EnvFamily};
use pr2l_core::rng::RunRng;

use crate::config::ExperimentConfig;
use crate::envs::{holdout_layouts, navhome_success_rate, GridcraftPpoEnv};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

use super::{aggregate, load_vlm, write_json, write_text};

// ---------------------------------------------------------------------------
// eval: re-evaluate trained checkpoints
// ---------------------------------------------------------------------------

/// Find the manifest for the requested run: either cfg.out is the condition
/// directory itself, or it is the experiment root holding cond-<name>/.
fn locate_run(cfg: &ExperimentConfig) -> Result<(PathBuf, RunManifest)> {
    let mut candidates = vec![cfg.out.clone()];
    for learner in [cfg.learner.as_str(), "ppo", "bc", "cql"] {
        candidates.push(cfg.out.join(learner).join(format!("cond-{}", cfg.condition)));
    }
    for dir in &candidates {
        if dir.join("manifest.json").exists() {
            let m = RunManifest::load(dir)?;
            return Ok((dir.clone(), m));
        }
    }
    // Report against the most likely location.
    let m = RunManifest::load(&candidates[1])?;
    Ok((candidates[1].clone(), m))
}

/// Deterministic greedy evaluation of a gridcraft policy (recurrent or not).
pub fn gridcraft_eval_success(
    policy: &Policy,
    env: &mut GridcraftPpoEnv<'_>,
    episodes: usize,
) -> Result<f64> {
    use pr2l_core::learners::ppo::PpoEnv as _;
    let mut rng = RunRng::new(0).stream("eval-unused", 0);
    let mut successes = 0usize;
    for ep in 0..episodes {
        env.reset_eval(ep).map_err(|e| CliError::Other(e.to_string()))?;
        let mut rs = RecurrentState::initial(ep as u64, policy.config.mlp_hidden);
        let mut t = 0u32;
        loop {
            let (packet, proprio) = env.observe().map_err(|e| CliError::Other(e.to_string()))?;
            let out = if policy.config.recurrent {
                let (out, next) = policy.recurrent_step(&packet, &proprio, &rs, ep as u64, t)?;
                rs = next;
                t += 1;
                out
            } else {
                policy.forward_obs(&packet, &proprio)?
            };
            let a = act(&out, &policy.config, ActMode::Greedy, &mut rng)?;
            let (_, done) = env.step(a).map_err(|e| CliError::Other(e.to_string()))?;
            if done {
                break;
            }
        }
        successes += usize::from(env.episode_success());
    }
    Ok(successes as f64 / episodes.max(1) as f64)
}

pub fn eval_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let (dir, manifest) = locate_run(cfg)?;
    if manifest.condition != cfg.condition {
        return Err(CliError::Config(format!(
            "checkpoint at {} was trained under condition {:?} but eval requested {:?}",
            dir.display(),
            manifest.condition,
            cfg.condition
        )));
    }
    if manifest.task != cfg.task {
        return Err(CliError::Config(format!(
            "checkpoint at {} was trained on task {:?} but eval requested {:?}",
            dir.display(),
            manifest.task,
            cfg.task
        )));
    }
    let model = load_vlm(cfg)?;
    let cond = cfg.condition_for(&cfg.condition)?;
    let cache = super::cache_dir_for(cfg);

    let mut rates = Vec::new();
    for sa in &manifest.seeds {
        if !sa.checkpoint.exists() {
            return Err(CliError::MissingArtifact {
                path: sa.checkpoint.clone(),
                producer: match manifest.subcommand.as_str() {
                    "train-bc" => "train-bc",
                    "train-cql" => "train-cql",
                    _ => "train-ppo",
                },
            });
        }
        let policy = Policy::load(&sa.checkpoint)?;
        let rate = match cfg.family {
            EnvFamily::Gridcraft => {
                let task = TaskSpec::by_name(&cfg.task)?;
                let mut env = GridcraftPpoEnv::new(
                    &task,
                    sa.seed,
                    &model,
                    cond.clone(),
                    sa.seed,
                    cache.as_deref(),
                )?;
                let r = gridcraft_eval_success(&policy, &mut env, cfg.eval_episodes)?;
                env.flush()?;
                r
            }
            EnvFamily::Navhome => {
                let layouts = holdout_layouts(cfg.collect.holdout_layouts, cfg.collect.layout_size)?;
                navhome_success_rate(
                    &policy,
                    &layouts,
                    &model,
                    &cond,
                    cfg.nav_eval_episodes_per_goal,
                    sa.seed,
                    cache.as_deref(),
                )?
            }
        };
        println!("eval seed {}: success {rate:.4}", sa.seed);
        rates.push(rate);
    }
    let agg = aggregate(&rates)?;
    let mut csv = String::from("condition,seed,success_rate\n");
    for (sa, &r) in manifest.seeds.iter().zip(&rates) {
        csv.push_str(&format!("{},{},{r:.6}\n", cfg.condition, sa.seed));
    }
    write_text(&dir.join("eval_report.csv"), &csv)?;
    write_json(
        &dir.join("eval_report.json"),
        &json!({
            "condition": cfg.condition,
            "task": cfg.task,
            "seeds": manifest.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(),
            "success_rates": rates,
            "aggregate": agg.center,
            "aggregate_kind": agg.kind,
            "stderr": agg.stderr,
        }),
    )?;
    println!(
        "eval: {} {} {:.4}{}",
        cfg.condition,
        agg.kind,
        agg.center,
        agg.stderr.map(|s| format!(" +/- {s:.4}")).unwrap_or_default()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// prompt-eval: detection quality of the presence prompts
// ---------------------------------------------------------------------------

const PRESENCE_CONDITIONS: [&str; 3] = ["pr2l", "with_aux", "changed_aux"];

pub fn prompt_eval(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.family != EnvFamily::Gridcraft {
        return Err(CliError::Config("prompt-eval runs on gridcraft tasks".into()));
    }
    let model = load_vlm(cfg)?;
    let task = TaskSpec::by_name(&cfg.task)?;
    let target = cfg.target();
    let set = collect_labeled_clips(&task, cfg.clips.clips, cfg.clips.frames_per_clip, cfg.clips.seed)?;

    let mut csv = String::from("condition,tpr,tnr,present_frames,absent_frames,undecodable\n");
    let mut per_cond = serde_json::Map::new();
    let mut tprs = std::collections::HashMap::new();
    for name in PRESENCE_CONDITIONS {
        let cond = cfg.condition_for(name)?;
        let rates = detection_rates(&model, &cond.prompt, &target, &set)?;
        csv.push_str(&format!(
            "{name},{:.6},{:.6},{},{},{}\n",
            rates.tpr, rates.tnr, rates.present_frames, rates.absent_frames, rates.undecodable
        ));
        println!(
            "prompt-eval {name:<12} tpr {:.3} tnr {:.3} ({} present / {} absent frames)",
            rates.tpr, rates.tnr, rates.present_frames, rates.absent_frames
        );
        tprs.insert(name, (rates.tpr, rates.tnr));
        per_cond.insert(name.to_string(), serde_json::to_value(&rates)?);
    }
    let plain = tprs["pr2l"];
    let hinted = tprs["with_aux"];
    let dir = cfg.out.join("prompt_eval");
    write_text(&dir.join("prompt_eval.csv"), &csv)?;
    write_json(
        &dir.join("prompt_eval.json"),
        &json!({
            "task": cfg.task,
            "target": target,
            "clips": cfg.clips.clips,
            "frames_per_clip": cfg.clips.frames_per_clip,
            "conditions": per_cond,
            "hint_tpr_gain": hinted.0 - plain.0,
            "hinted_tnr": hinted.1,
        }),
    )?;
    println!(
        "prompt-eval: hint tpr gain {:+.3} (hinted tnr {:.3})",
        hinted.0 - plain.0,
        hinted.1
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// probe: linear position probes on the decoded segment
// ---------------------------------------------------------------------------

fn position_label(p: TargetPosition) -> Option<usize> {
    match p {
        TargetPosition::Left => Some(0),
        TargetPosition::Middle => Some(1),
        TargetPosition::Right => Some(2),
        TargetPosition::Absent => None,
    }
}

/// Features for present-labeled frames: mean of the decoded-segment rows of
/// the condition's packet.
fn probe_features(
    cfg: &ExperimentConfig,
    model: &pr2l_core::vlm::VlmModel,
    cond: &pr2l_core::repr::Condition,
    frames: &[&ClipFrame],
) -> Result<Vec<Vec<f32>>> {
    let mut extractor = Extractor::new(model, cond.clone(), cfg.clips.seed)?;
    if let Some(dir) = super::cache_dir_for(cfg) {
        extractor = extractor.with_cache(&dir)?;
    }
    let mut feats = Vec::with_capacity(frames.len());
    for f in frames {
        let packet = extractor.packet(&f.window, WINDOW, f.obs_hash)?;
        let feat = decoded_token_mean(&packet).ok_or_else(|| {
            CliError::Config(format!(
                "condition {:?} produces no decoded tokens to probe",
                cond.name
            ))
        })?;
        feats.push(feat);
    }
    extractor.flush()?;
    Ok(feats)
}

pub fn probe(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.family != EnvFamily::Gridcraft {
        return Err(CliError::Config("probe runs on gridcraft tasks".into()));
    }
    let model = load_vlm(cfg)?;
    let task = TaskSpec::by_name(&cfg.task)?;
    let set = collect_labeled_clips(&task, cfg.clips.clips, cfg.clips.frames_per_clip, cfg.clips.seed)?;
    let frames: Vec<&ClipFrame> = set.frames().filter(|f| f.present).collect();
    let labels: Vec<usize> = frames
        .iter()
        .filter_map(|f| position_label(f.position))
        .collect();
    if labels.len() != frames.len() {
        return Err(CliError::Other("present frame without a position band".into()));
    }

    let probe_cfg = ProbeConfig::default();
    let dir = cfg.out.join("probe");
    let mut results = serde_json::Map::new();
    for name in PRESENCE_CONDITIONS {
        let cond = cfg.condition_for(name)?;
        let feats = probe_features(cfg, &model, &cond, &frames)?;
        let probe = train_linear_probe(&feats, &labels, &probe_cfg, cfg.clips.seed)?;
        // Control: same features, labels shuffled; accuracy should collapse
        // to chance.
        let mut shuffled = labels.clone();
        RunRng::new(cfg.clips.seed).stream("probe-shuffle", 0).shuffle(&mut shuffled);
        let control = train_linear_probe(&feats, &shuffled, &probe_cfg, cfg.clips.seed)?;
        let acc = probe.final_holdout_accuracy();
        let ctrl = control.final_holdout_accuracy();
        write_text(
            &dir.join(format!("curve_{name}.csv")),
            &pr2l_core::evalkit::probe_curve_csv(&probe),
        )?;
        results.insert(
            name.to_string(),
            json!({
                "prompt_id": cond.prompt.id,
                "holdout_accuracy": acc,
                "shuffled_control_accuracy": ctrl,
                "frames": frames.len(),
            }),
        );
        println!("probe {name:<12} holdout {acc:.3}, shuffled control {ctrl:.3}");
    }
    write_json(
        &dir.join("probe.json"),
        &json!({
            "task": cfg.task,
            "classes": 3,
            "chance": 1.0 / 3.0,
            "prompts": results,
        }),
    )?;
    Ok(())
}
