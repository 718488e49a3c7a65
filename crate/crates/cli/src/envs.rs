//! Environment plumbing: representation-backed PPO environment for
//! gridcraft, proprio feature builders, and navhome rollout evaluation for
//! offline-trained policies.

use pr2l_core::gridcraft::{self, GridObservation, GridWorldState, TaskSpec, NUM_ACTIONS, WINDOW};
use pr2l_core::learners::ppo::PpoEnv;
use pr2l_core::learners::{LearnError, Result as LearnResult};
use pr2l_core::navhome::{
    nav_step, GoalClass, HouseLayout, NavObservation, NavState, GOALS, NAV_ACTIONS, NAV_WINDOW,
};
use pr2l_core::policy::{act, ActMode, Policy};
use pr2l_core::repr::{Condition, Extractor, ReprPacket};
use pr2l_core::rng::RunRng;
use pr2l_core::vlm::VlmModel;

use crate::error::{CliError, Result};

pub fn parse_goal(task: &str) -> Result<GoalClass> {
    GOALS
        .into_iter()
        .find(|g| g.name() == task)
        .ok_or_else(|| {
            CliError::Config(format!(
                "unknown navhome goal {task:?}; expected toilet, bed, or sofa"
            ))
        })
}

/// Pose + previous action, normalized to the world size.
pub fn gridcraft_proprio(obs: &GridObservation, world: usize) -> Vec<f32> {
    let mut p = Vec::with_capacity(2 + 8 + NUM_ACTIONS);
    p.push(obs.x as f32 / world as f32);
    p.push(obs.y as f32 / world as f32);
    for h in 0..8u8 {
        p.push(f32::from(h == obs.heading));
    }
    p.extend(obs.prev_action.iter().map(|&b| b as f32));
    p
}

pub const GRIDCRAFT_PROPRIO_DIM: usize = 2 + 8 + NUM_ACTIONS;

/// Pose + previous action + goal one-hot.
pub fn navhome_proprio(obs: &NavObservation, size: usize) -> Vec<f32> {
    let mut p = Vec::with_capacity(2 + 4 + NAV_ACTIONS + 3);
    p.push(obs.x as f32 / size as f32);
    p.push(obs.y as f32 / size as f32);
    for h in 0..4u8 {
        p.push(f32::from(h == obs.heading));
    }
    p.extend(obs.prev_action.iter().map(|&b| b as f32));
    p.extend(obs.goal.iter().map(|&b| b as f32));
    p
}

pub const NAVHOME_PROPRIO_DIM: usize = 2 + 4 + NAV_ACTIONS + 3;

/// Oracle one-hot for the oracle_detector condition.
fn oracle_one_hot(state: &GridWorldState) -> [f32; 4] {
    use pr2l_core::gridcraft::TargetPosition::*;
    let (_, pos) = gridcraft::oracle_target_visible(state);
    let mut v = [0.0f32; 4];
    v[match pos {
        Left => 0,
        Middle => 1,
        Right => 2,
        Absent => 3,
    }] = 1.0;
    v
}

/// Gridcraft wrapped as a PPO environment: observations go through the
/// representation extractor of the configured condition.
pub struct GridcraftPpoEnv<'m> {
    state: GridWorldState,
    extractor: Extractor<'m>,
    world: usize,
    oracle: bool,
    last_success: bool,
}

impl<'m> GridcraftPpoEnv<'m> {
    pub fn new(
        task: &TaskSpec,
        world_seed: u64,
        model: &'m VlmModel,
        cond: Condition,
        run_seed: u64,
        cache_dir: Option<&std::path::Path>,
    ) -> Result<Self> {
        let oracle = cond.oracle;
        let mut extractor = Extractor::new(model, cond, run_seed)?;
        if let Some(dir) = cache_dir {
            extractor = extractor.with_cache(dir)?;
        }
        Ok(GridcraftPpoEnv {
            state: gridcraft::create_world(task, world_seed)?,
            extractor,
            world: task.world_size,
            oracle,
            last_success: false,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.extractor.flush()?)
    }

    pub fn packet_for(&mut self, obs: &GridObservation) -> Result<ReprPacket> {
        let mut packet = self
            .extractor
            .packet(&obs.window, WINDOW, obs.hash64())
            .map_err(|e| CliError::Other(e.to_string()))?;
        if self.oracle {
            pr2l_core::repr::append_oracle_feature(&mut packet, oracle_one_hot(&self.state));
        }
        Ok(packet)
    }

}

fn learn_err(e: CliError) -> LearnError {
    LearnError::Tensor(pr2l_core::tensor::TensorError::Invalid(e.to_string()))
}

impl PpoEnv for GridcraftPpoEnv<'_> {
    fn reset(&mut self) -> LearnResult<()> {
        gridcraft::fast_reset(&mut self.state)
            .map_err(|e| learn_err(CliError::Other(e.to_string())))
    }

    fn reset_eval(&mut self, episode: usize) -> LearnResult<()> {
        // Episode spawns are deterministic per (world seed, episode index);
        // pinning the index makes evaluation episodes reproducible.
        self.state.episode = episode as u32;
        self.reset()
    }

    fn observe(&mut self) -> LearnResult<(ReprPacket, Vec<f32>)> {
        let obs = self.state.observe();
        let packet = self.packet_for(&obs).map_err(learn_err)?;
        Ok((packet, gridcraft_proprio(&obs, self.world)))
    }

    fn step(&mut self, action: usize) -> LearnResult<(f64, bool)> {
        let (_, reward, done, info) = gridcraft::step(&mut self.state, action)
            .map_err(|e| learn_err(CliError::Other(e.to_string())))?;
        if done {
            self.last_success = info.successes > 0;
        }
        Ok((reward, done))
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn episode_success(&self) -> bool {
        self.last_success
    }
}

/// Layout seed conventions: training layouts use small seeds, held-out
/// validation layouts a disjoint block.
pub const HOLDOUT_LAYOUT_BASE: u64 = 10_000;

pub fn training_layouts(n: usize, size: usize) -> Result<Vec<HouseLayout>> {
    (0..n as u64)
        .map(|s| Ok(pr2l_core::navhome::generate_layout(s, size)?))
        .collect()
}

pub fn holdout_layouts(n: usize, size: usize) -> Result<Vec<HouseLayout>> {
    (0..n as u64)
        .map(|s| Ok(pr2l_core::navhome::generate_layout(HOLDOUT_LAYOUT_BASE + s, size)?))
        .collect()
}

/// Greedy policy rollouts on navhome layouts; returns success rate over
/// layouts x goals x episodes. Deterministic per eval_seed.
pub fn navhome_success_rate(
    policy: &Policy,
    layouts: &[HouseLayout],
    model: &VlmModel,
    cond: &Condition,
    episodes_per_goal: usize,
    eval_seed: u64,
    cache_dir: Option<&std::path::Path>,
) -> Result<f64> {
    let mode = match policy.config.head {
        pr2l_core::policy::HeadKind::Quantile { .. } => ActMode::MeanQuantileArgmax,
        pr2l_core::policy::HeadKind::Categorical => ActMode::Greedy,
    };
    let mut extractor = Extractor::new(model, cond.clone(), eval_seed)?;
    if let Some(dir) = cache_dir {
        extractor = extractor.with_cache(dir)?;
    }
    let root = RunRng::new(eval_seed);
    let mut rng_unused = root.stream("nav-eval-act", 0);
    let size = layouts.first().map(|l| l.size).unwrap_or(16);
    let (mut successes, mut total) = (0usize, 0usize);
    for (li, layout) in layouts.iter().enumerate() {
        for goal in GOALS {
            for ep in 0..episodes_per_goal {
                let idx = ((li * 3 + goal.index()) * episodes_per_goal + ep) as u64;
                let mut rng = root.stream("nav-eval-start", idx);
                let &start = rng.choice(&layout.start_cells);
                let heading = rng.below(4) as u8;
                let mut st = NavState::new(layout, goal, start, heading);
                while !st.done {
                    let obs = st.observe();
                    let packet = extractor.packet(&obs.window, NAV_WINDOW, obs.hash64())?;
                    let proprio = navhome_proprio(&obs, size);
                    let out = policy.forward_obs(&packet, &proprio)?;
                    let a = act(&out, &policy.config, mode, &mut rng_unused)?;
                    nav_step(&mut st, a)?;
                }
                successes += usize::from(st.result().success);
                total += 1;
            }
        }
    }
    extractor.flush()?;
    Ok(successes as f64 / total.max(1) as f64)
}

/// Uniform-random baseline on the same episode protocol.
pub fn navhome_random_success_rate(
    layouts: &[HouseLayout],
    episodes_per_goal: usize,
    eval_seed: u64,
) -> Result<f64> {
    let root = RunRng::new(eval_seed);
    let (mut successes, mut total) = (0usize, 0usize);
    for (li, layout) in layouts.iter().enumerate() {
        for goal in GOALS {
            for ep in 0..episodes_per_goal {
                let idx = ((li * 3 + goal.index()) * episodes_per_goal + ep) as u64;
                let mut rng = root.stream("nav-eval-start", idx);
                let &start = rng.choice(&layout.start_cells);
                let heading = rng.below(4) as u8;
                let mut act_rng = root.stream("nav-random-act", idx);
                let mut st = NavState::new(layout, goal, start, heading);
                while !st.done {
                    nav_step(&mut st, act_rng.below(NAV_ACTIONS))?;
                }
                successes += usize::from(st.result().success);
                total += 1;
            }
        }
    }
    Ok(successes as f64 / total.max(1) as f64)
}
