//! Training subcommands: train-ppo, train-bc, train-cql.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use pr2l_core::gridcraft::{TaskSpec, NUM_ACTIONS, WINDOW};
use pr2l_core::learners::cql::{cql_train, OfflineTransition, ReplayBuffer};
use pr2l_core::learners::ppo::{evaluate_random, ppo_train};
use pr2l_core::learners::{bc_train, BCConfig, Trajectory};
use pr2l_core::navhome::{generate_layout, NAV_WINDOW};
use pr2l_core::policy::{Policy, RecurrentState};
use pr2l_core::repr::{Condition, DecodeScheme, EnvFamily, Extractor};
use pr2l_core::vlm::VlmModel;

use crate::config::ExperimentConfig;
use crate::envs::{
    gridcraft_proprio, holdout_layouts, navhome_proprio, navhome_random_success_rate,
    navhome_success_rate, GridcraftPpoEnv,
};
use crate::error::{CliError, Result};
use crate::manifest::{record_timing, RunManifest};

use super::data::{load_expert_episodes, load_nav_trajectories};
use super::{cache_dir_for, load_vlm, policy_config, write_json};

/// Sampled decoding depends on the run seed, so those caches cannot be
/// shared across seeds.
fn seed_cache(base: Option<&PathBuf>, cond: &Condition, seed: u64) -> Option<PathBuf> {
    let base = base?;
    let dir = match cond.prompt.decode.scheme {
        DecodeScheme::Sampled { .. } => base.join(&cond.prompt.id).join(format!("seed-{seed}")),
        _ => base.join(&cond.prompt.id),
    };
    std::fs::create_dir_all(&dir).ok()?;
    Some(dir)
}

pub fn run_dir(cfg: &ExperimentConfig, learner: &str, condition: &str) -> PathBuf {
    cfg.out.join(learner).join(format!("cond-{condition}"))
}

/// Fan a per-seed job out over at most `workers` threads.
fn fan_out<F>(seeds: &[u64], workers: usize, job: F) -> Result<Vec<f64>>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    let job = &job;
    let mut results: Vec<Option<Result<f64>>> = seeds.iter().map(|_| None).collect();
    for (chunk_idx, chunk) in seeds.chunks(workers.max(1)).enumerate() {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| scope.spawn(move || job(seed)))
                .collect();
            for (i, h) in handles.into_iter().enumerate() {
                results[chunk_idx * workers.max(1) + i] =
                    Some(h.join().unwrap_or_else(|_| {
                        Err(CliError::Other("training thread panicked".into()))
                    }));
            }
        });
    }
    results
        .into_iter()
        .map(|r| r.expect("every seed filled"))
        .collect()
}

fn finish_condition(
    dir: &Path,
    condition: &str,
    seeds: &[u64],
    rates: &[f64],
    extra: serde_json::Value,
) -> Result<()> {
    let agg = super::aggregate(rates)?;
    let mut csv = String::from("condition,seed,success_rate\n");
    for (&s, &r) in seeds.iter().zip(rates) {
        csv.push_str(&format!("{condition},{s},{r:.6}\n"));
    }
    super::write_text(&dir.join("aggregate.csv"), &csv)?;
    let mut summary = json!({
        "condition": condition,
        "seeds": seeds,
        "success_rates": rates,
        "aggregate": agg.center,
        "aggregate_kind": agg.kind,
        "stderr": agg.stderr,
    });
    if let (serde_json::Value::Object(m), serde_json::Value::Object(e)) = (&mut summary, extra) {
        m.extend(e);
    }
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{condition}: {} success {:.4}{} over {} seeds",
        agg.kind,
        agg.center,
        agg.stderr.map(|s| format!(" +/- {s:.4}")).unwrap_or_default(),
        seeds.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

pub fn train_ppo(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.family != EnvFamily::Gridcraft {
        return Err(CliError::Config("train-ppo runs on gridcraft tasks".into()));
    }
    let model = load_vlm(cfg)?;
    let cond = cfg.condition_for(&cfg.condition)?;
    let task = TaskSpec::by_name(&cfg.task)?;
    let dir = run_dir(cfg, "ppo", &cfg.condition);
    let manifest = RunManifest::new("train-ppo", &cfg.condition, cfg, &dir);
    manifest.write(&dir)?;
    let cache = cache_dir_for(cfg);

    let job = |seed: u64| -> Result<f64> {
        let t0 = Instant::now();
        let sd = dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&sd)?;
        let seed_cache = seed_cache(cache.as_ref(), &cond, seed);
        let mut env = GridcraftPpoEnv::new(&task, seed, &model, cond.clone(), seed, seed_cache.as_deref())?;
        let mut eval_env =
            GridcraftPpoEnv::new(&task, seed, &model, cond.clone(), seed, seed_cache.as_deref())?;
        let mut policy = Policy::init(policy_config(cfg, &model, &cond), seed);
        let report = ppo_train(&mut env, &mut eval_env, &mut policy, &cfg.ppo, seed)?;
        policy.save(&sd.join("policy.ckpt"))?;
        report.write(&sd.join("train.csv"), &sd.join("train.json"))?;
        let random =
            evaluate_random(&mut eval_env, cfg.eval_episodes, seed)? as f64 / cfg.eval_episodes as f64;
        env.flush()?;
        eval_env.flush()?;
        let final_rate = report.summary["final_eval_success_rate"]
            .as_f64()
            .unwrap_or(f64::NAN);
        write_json(
            &sd.join("eval.json"),
            &json!({
                "seed": seed,
                "final_eval_success_rate": final_rate,
                "random_success_rate": random,
                "eval_episodes": cfg.eval_episodes,
            }),
        )?;
        record_timing(&sd, "train-ppo", t0.elapsed().as_secs_f64())?;
        println!("train-ppo seed {seed}: success {final_rate:.4}, random {random:.4}");
        Ok(final_rate)
    };
    let rates = fan_out(&cfg.seeds, cfg.workers, job)?;

    // Random baseline aggregated from the per-seed eval files.
    let randoms: Vec<f64> = cfg
        .seeds
        .iter()
        .map(|&s| {
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
                dir.join(format!("seed-{s}")).join("eval.json"),
            )?)?;
            Ok(v["random_success_rate"].as_f64().unwrap_or(f64::NAN))
        })
        .collect::<Result<_>>()?;
    let random_agg = super::aggregate(&randoms)?;
    finish_condition(
        &dir,
        &cfg.condition,
        &cfg.seeds,
        &rates,
        json!({ "random_aggregate": random_agg.center, "random_rates": randoms }),
    )
}

// ---------------------------------------------------------------------------
// BC
// ---------------------------------------------------------------------------

fn expert_data_path(cfg: &ExperimentConfig, default_name: &str) -> PathBuf {
    cfg.data
        .clone()
        .unwrap_or_else(|| cfg.out.join("data").join(default_name))
}

/// Gridcraft BC defaults: turn actions upweighted 1.5 (the movement-choice
/// analogue of the stop/turn upweights used for navigation).
fn gridcraft_bc_config(cfg: &ExperimentConfig) -> BCConfig {
    let mut bc = BCConfig::new(NUM_ACTIONS);
    bc.epochs = cfg.bc_epochs;
    bc.lr = cfg.bc_lr;
    for a in [0usize, 1, 3, 4] {
        bc.action_weights[a] = 1.5;
    }
    bc
}

/// Greedy recurrent rollout evaluation for BC policies.
fn bc_eval_success(
    policy: &Policy,
    env: &mut GridcraftPpoEnv<'_>,
    episodes: usize,
) -> Result<f64> {
    use pr2l_core::learners::ppo::PpoEnv as _;
    let mut successes = 0usize;
    for ep in 0..episodes {
        env.reset_eval(ep).map_err(|e| CliError::Other(e.to_string()))?;
        let mut rs = RecurrentState::initial(ep as u64, policy.config.mlp_hidden);
        let mut t = 0u32;
        loop {
            let (packet, proprio) = env.observe().map_err(|e| CliError::Other(e.to_string()))?;
            let (out, next) = policy.recurrent_step(&packet, &proprio, &rs, ep as u64, t)?;
            rs = next;
            t += 1;
            let action = out
                .logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let (_, done) = env.step(action).map_err(|e| CliError::Other(e.to_string()))?;
            if done {
                break;
            }
        }
        successes += usize::from(env.episode_success());
    }
    Ok(successes as f64 / episodes.max(1) as f64)
}

pub fn train_bc(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.family != EnvFamily::Gridcraft {
        return Err(CliError::Config("train-bc runs on gridcraft expert data".into()));
    }
    let model = load_vlm(cfg)?;
    let cond = cfg.condition_for(&cfg.condition)?;
    let task = TaskSpec::by_name(&cfg.task)?;
    let data_path = expert_data_path(cfg, "expert.jsonl");
    let episodes = load_expert_episodes(&data_path)?;
    let dir = run_dir(cfg, "bc", &cfg.condition);
    let manifest = RunManifest::new("train-bc", &cfg.condition, cfg, &dir);
    manifest.write(&dir)?;
    let cache = cache_dir_for(cfg);
    let world = task.world_size;

    // Packets are seed-independent for greedy/none decoding; build the
    // trajectory tensors once and share them across seeds.
    let shared_cache = seed_cache(cache.as_ref(), &cond, 0);
    let mut extractor = Extractor::new(&model, cond.clone(), 0)?;
    if let Some(d) = &shared_cache {
        extractor = extractor.with_cache(d)?;
    }
    let mut dataset: Vec<Trajectory> = Vec::with_capacity(episodes.len());
    for e in &episodes {
        let mut traj = Trajectory::default();
        for s in &e.steps {
            let packet = extractor.packet(&s.obs.window, WINDOW, s.obs.hash64())?;
            traj.steps.push(pr2l_core::learners::bc::BcStep {
                packet,
                proprio: gridcraft_proprio(&s.obs, world),
                action: s.action,
            });
        }
        dataset.push(traj);
    }
    extractor.flush()?;
    let bc_cfg = gridcraft_bc_config(cfg);

    let job = |seed: u64| -> Result<f64> {
        let t0 = Instant::now();
        let sd = dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&sd)?;
        let seed_cache = seed_cache(cache.as_ref(), &cond, seed);
        let mut pc = policy_config(cfg, &model, &cond);
        pc.recurrent = true;
        let mut policy = Policy::init(pc, seed);
        let mut eval_env =
            GridcraftPpoEnv::new(&task, seed, &model, cond.clone(), seed, seed_cache.as_deref())?;
        let eval_episodes = cfg.eval_episodes;
        let mut eval = |p: &Policy| -> pr2l_core::learners::Result<f64> {
            bc_eval_success(p, &mut eval_env, eval_episodes).map_err(|e| {
                pr2l_core::learners::LearnError::Tensor(pr2l_core::tensor::TensorError::Invalid(
                    e.to_string(),
                ))
            })
        };
        let report = bc_train(&dataset, &mut policy, &bc_cfg, seed, Some(&mut eval))?;
        policy.save(&sd.join("policy.ckpt"))?;
        report.write(&sd.join("train.csv"), &sd.join("train.json"))?;
        // Success after the first epoch is the quantity of interest.
        let first_epoch = report.rows.first().map(|r| r[3]).unwrap_or(f64::NAN);
        let final_rate = report.rows.last().map(|r| r[3]).unwrap_or(f64::NAN);
        write_json(
            &sd.join("eval.json"),
            &json!({
                "seed": seed,
                "success_after_one_epoch": first_epoch,
                "final_success_rate": final_rate,
                "eval_episodes": cfg.eval_episodes,
            }),
        )?;
        record_timing(&sd, "train-bc", t0.elapsed().as_secs_f64())?;
        println!("train-bc seed {seed}: epoch-1 success {first_epoch:.4}, final {final_rate:.4}");
        Ok(first_epoch)
    };
    let rates = fan_out(&cfg.seeds, cfg.workers, job)?;
    let data_success = episodes.iter().filter(|e| e.success).count() as f64
        / episodes.len().max(1) as f64;
    finish_condition(
        &dir,
        &cfg.condition,
        &cfg.seeds,
        &rates,
        json!({ "metric": "success_after_one_epoch", "data_policy_success_rate": data_success }),
    )
}

// ---------------------------------------------------------------------------
// CQL
// ---------------------------------------------------------------------------

fn build_replay_buffer(
    cfg: &ExperimentConfig,
    model: &VlmModel,
    cond: &Condition,
    cache: Option<&Path>,
) -> Result<(ReplayBuffer, f64)> {
    let data_path = expert_data_path(cfg, "offline.jsonl");
    let trajs = load_nav_trajectories(&data_path)?;
    let mut extractor = Extractor::new(model, cond.clone(), 0)?;
    if let Some(d) = cache {
        extractor = extractor.with_cache(d)?;
    }
    let mut buffer = ReplayBuffer::new();
    for traj in &trajs {
        let layout = generate_layout(traj.layout_seed, cfg.collect.layout_size)?;
        let size = layout.size;
        let n = traj.transitions.len();
        for (t, tr) in traj.transitions.iter().enumerate() {
            let packet = extractor.packet(&tr.obs.window, NAV_WINDOW, tr.obs.hash64())?;
            let (next_packet, next_proprio) = if t + 1 < n {
                let next = &traj.transitions[t + 1].obs;
                (
                    extractor.packet(&next.window, NAV_WINDOW, next.hash64())?,
                    navhome_proprio(next, size),
                )
            } else {
                // Terminal transition: the target never reads this packet.
                (packet.clone(), navhome_proprio(&tr.obs, size))
            };
            buffer.push(OfflineTransition {
                proprio: navhome_proprio(&tr.obs, size),
                packet,
                action: tr.action,
                reward: tr.reward,
                done: tr.done,
                next_packet,
                next_proprio,
            });
        }
    }
    extractor.flush()?;
    let data_success =
        trajs.iter().filter(|t| t.result.success).count() as f64 / trajs.len().max(1) as f64;
    Ok((buffer, data_success))
}

pub fn train_cql(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.family != EnvFamily::Navhome {
        return Err(CliError::Config("train-cql runs on navhome offline data".into()));
    }
    let model = load_vlm(cfg)?;
    let cond = cfg.condition_for(&cfg.condition)?;
    let dir = run_dir(cfg, "cql", &cfg.condition);
    let manifest = RunManifest::new("train-cql", &cfg.condition, cfg, &dir);
    manifest.write(&dir)?;
    let cache = cache_dir_for(cfg);
    let layouts = holdout_layouts(cfg.collect.holdout_layouts, cfg.collect.layout_size)?;

    // The buffer is seed-independent only under deterministic decoding;
    // rationale conditions rebuild it per seed.
    let sampled = matches!(cond.prompt.decode.scheme, DecodeScheme::Sampled { .. });
    let shared = if sampled {
        None
    } else {
        let c = seed_cache(cache.as_ref(), &cond, 0);
        Some(build_replay_buffer(cfg, &model, &cond, c.as_deref())?)
    };

    let job = |seed: u64| -> Result<f64> {
        let t0 = Instant::now();
        let sd = dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&sd)?;
        let seed_cache = seed_cache(cache.as_ref(), &cond, seed);
        let owned;
        let (buffer, _) = match &shared {
            Some(b) => b,
            None => {
                owned = build_replay_buffer(cfg, &model, &cond, seed_cache.as_deref())?;
                &owned
            }
        };
        let pc = policy_config(cfg, &model, &cond).with_quantiles(cfg.cql.quantiles);
        let mut policy = Policy::init(pc, seed);
        let per_goal = cfg.nav_eval_episodes_per_goal;
        let mut eval = |p: &Policy| -> pr2l_core::learners::Result<f64> {
            navhome_success_rate(p, &layouts, &model, &cond, per_goal, seed, seed_cache.as_deref())
                .map_err(|e| {
                    pr2l_core::learners::LearnError::Tensor(
                        pr2l_core::tensor::TensorError::Invalid(e.to_string()),
                    )
                })
        };
        let report = cql_train(buffer, &mut policy, &cfg.cql, seed, Some(&mut eval))?;
        policy.save(&sd.join("policy.ckpt"))?;
        report.write(&sd.join("train.csv"), &sd.join("train.json"))?;
        let final_rate = report.summary["final_eval_success_rate"]
            .as_f64()
            .unwrap_or(f64::NAN);
        let random = navhome_random_success_rate(&layouts, per_goal, seed)?;
        write_json(
            &sd.join("eval.json"),
            &json!({
                "seed": seed,
                "final_eval_success_rate": final_rate,
                "random_success_rate": random,
                "holdout_layouts": layouts.len(),
                "episodes_per_goal": per_goal,
            }),
        )?;
        record_timing(&sd, "train-cql", t0.elapsed().as_secs_f64())?;
        println!("train-cql seed {seed}: success {final_rate:.4}, random {random:.4}");
        Ok(final_rate)
    };
    let rates = fan_out(&cfg.seeds, cfg.workers, job)?;
    let randoms: Vec<f64> = cfg
        .seeds
        .iter()
        .map(|&s| navhome_random_success_rate(&layouts, cfg.nav_eval_episodes_per_goal, s))
        .collect::<Result<_>>()?;
    let random_agg = super::aggregate(&randoms)?;
    let data_success = shared.as_ref().map(|(_, s)| *s);
    finish_condition(
        &dir,
        &cfg.condition,
        &cfg.seeds,
        &rates,
        json!({ "random_aggregate": random_agg.center, "data_success_rate": data_success }),
    )
}
