//! Proximal policy optimization with clipped surrogate, GAE, entropy bonus,
//! value regression, global gradient clipping, and a cosine LR schedule.

use serde::{Deserialize, Serialize};

use super::{compute_gae, LearnError, Result, TrainReport};
use crate::policy::{act, build_forward, ActMode, NodeMap, Policy, PolicyConfig};
use crate::repr::ReprPacket;
use crate::rng::RunRng;
use crate::tensor::optim::{accumulate_grads, clip_global_norm, LRSchedule, OptimState};
use crate::tensor::{Elem, NodeId, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PPOConfig {
    pub total_steps: u64,
    pub rollout_len: usize,
    pub batch: usize,
    pub update_epochs: usize,
    pub clip: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub max_grad_norm: f64,
    pub lr: LRSchedule,
    pub adv_norm: bool,
    /// Deterministic evaluation cadence, in updates.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            total_steps: 60_000,
            rollout_len: 2048,
            batch: 64,
            update_epochs: 10,
            clip: 0.2,
            ent_coef: 5e-3,
            vf_coef: 0.5,
            gamma: 0.99,
            lambda: 0.95,
            max_grad_norm: 0.5,
            lr: LRSchedule::Cosine {
                max: 5e-5,
                min: 5e-6,
                total: 60_000 / 2048 + 1,
            },
            adv_norm: true,
            eval_every: 7,
            eval_episodes: 16,
        }
    }
}

impl PPOConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_len == 0 || self.rollout_len % self.batch != 0 {
            return Err(LearnError::BadConfig(format!(
                "rollout length {} must be a positive multiple of batch {}",
                self.rollout_len, self.batch
            )));
        }
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(LearnError::BadConfig(format!("{name} {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub packet: ReprPacket,
    pub proprio: Vec<f32>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub value: f64,
    pub log_prob: f64,
}

/// On-policy storage for one rollout. Advantages exist only after
/// [`RolloutBuffer::finalize`] sees the complete rollout.
#[derive(Debug, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    finalized: bool,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: Transition) {
        assert!(!self.finalized, "rollout already finalized");
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn finalize(&mut self, bootstrap: f64, gamma: f64, lambda: f64) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(LearnError::EmptyDataset);
        }
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = self.transitions.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda)?;
        self.advantages = adv;
        self.returns = ret;
        self.finalized = true;
        Ok(())
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }
}

/// Clipped surrogate objective for a single sample (maximized):
/// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A).
pub fn surrogate_scalar(ratio: f64, adv: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * adv).min(clipped * adv)
}

/// One minibatch sample with its frozen statistics.
pub struct MbSample<'a> {
    pub packet: &'a ReprPacket,
    pub proprio: &'a [f32],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

pub struct MbNodes {
    pub loss: NodeId,
    pub policy_loss: NodeId,
    pub value_loss: NodeId,
    pub entropy: NodeId,
}

/// Build the PPO minibatch loss graph:
/// -mean(min(r A, clip(r) A)) + vf_coef * mean((V - ret)^2)
/// - ent_coef * mean(entropy).
pub fn ppo_minibatch_graph<E: Elem>(
    tape: &mut Tape<E>,
    nodes: &NodeMap,
    pcfg: &PolicyConfig,
    samples: &[MbSample<'_>],
    cfg: &PPOConfig,
) -> Result<MbNodes> {
    assert!(!samples.is_empty());
    let a = pcfg.num_actions;
    let mut surr_terms = Vec::with_capacity(samples.len());
    let mut vf_terms = Vec::with_capacity(samples.len());
    let mut ent_terms = Vec::with_capacity(samples.len());
    for s in samples {
        let tokens = tape.input(
            vec![s.packet.t, s.packet.d],
            s.packet.embedding.iter().map(|&x| E::from_f64(x as f64)).collect(),
            false,
        );
        let pr = tape.input(
            vec![1, s.proprio.len()],
            s.proprio.iter().map(|&x| E::from_f64(x as f64)).collect(),
            false,
        );
        let heads = build_forward(tape, nodes, pcfg, tokens, &s.packet.mask, pr, None)?;
        let lp = tape.log_softmax_last(heads.output)?;
        let mut onehot = vec![E::ZERO; a];
        onehot[s.action] = E::ONE;
        let oh = tape.constant(vec![1, a], onehot);
        let picked = tape.mul(lp, oh)?;
        let lpa = tape.sum(picked)?;
        let delta = tape.add_const(lpa, -s.old_log_prob)?;
        let ratio = tape.exp(delta)?;
        let s1 = tape.scale(ratio, s.advantage)?;
        let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
        let s2 = tape.scale(clipped, s.advantage)?;
        surr_terms.push(tape.min(s1, s2)?);

        let v = heads.value.expect("PPO needs the categorical actor-critic head");
        let d = tape.add_const(v, -s.ret)?;
        let sq = tape.mul(d, d)?;
        vf_terms.push(tape.sum(sq)?);

        let probs = tape.softmax_last(heads.output)?;
        let plogp = tape.mul(probs, lp)?;
        let negent = tape.sum(plogp)?;
        ent_terms.push(tape.scale(negent, -1.0)?);
    }
    let m = samples.len() as f64;
    let total = |terms: &[NodeId], tape: &mut Tape<E>| -> crate::tensor::Result<NodeId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        tape.scale(acc, 1.0 / m)
    };
    let surr_mean = total(&surr_terms, tape)?;
    let vf_mean = total(&vf_terms, tape)?;
    let ent_mean = total(&ent_terms, tape)?;
    let policy_loss = tape.scale(surr_mean, -1.0)?;
    let vf_scaled = tape.scale(vf_mean, cfg.vf_coef)?;
    let ent_scaled = tape.scale(ent_mean, -cfg.ent_coef)?;
    let partial = tape.add(policy_loss, vf_scaled)?;
    let loss = tape.add(partial, ent_scaled)?;
    Ok(MbNodes {
        loss,
        policy_loss,
        value_loss: vf_mean,
        entropy: ent_mean,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// One PPO update over a finalized rollout: `update_epochs` passes of
/// shuffled minibatches with per-minibatch advantage normalization.
pub fn ppo_update(
    policy: &mut Policy,
    buffer: &RolloutBuffer,
    cfg: &PPOConfig,
    opt: &mut OptimState,
    lr: f64,
    run: &RunRng,
    update_index: u64,
) -> Result<UpdateStats> {
    cfg.validate()?;
    if !buffer.is_finalized() || buffer.len() != cfg.rollout_len {
        return Err(LearnError::BadConfig(format!(
            "ppo_update needs a finalized rollout of exactly {} transitions, got {} (finalized: {})",
            cfg.rollout_len,
            buffer.len(),
            buffer.is_finalized()
        )));
    }
    opt.lr = lr;
    let n = buffer.len();
    let mut stats = UpdateStats::default();
    let mut batches = 0usize;
    for epoch in 0..cfg.update_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = run.stream("ppo-shuffle", update_index * cfg.update_epochs as u64 + epoch as u64);
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            // Per-minibatch advantage normalization.
            let advs: Vec<f64> = chunk.iter().map(|&i| buffer.advantages[i]).collect();
            let (mean, std) = if cfg.adv_norm {
                let m = advs.iter().sum::<f64>() / advs.len() as f64;
                let var = advs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / advs.len() as f64;
                (m, var.sqrt().max(1e-8))
            } else {
                (0.0, 1.0)
            };
            let samples: Vec<MbSample<'_>> = chunk
                .iter()
                .zip(&advs)
                .map(|(&i, &adv)| {
                    let t = &buffer.transitions[i];
                    MbSample {
                        packet: &t.packet,
                        proprio: &t.proprio,
                        action: t.action,
                        old_log_prob: t.log_prob,
                        advantage: (adv - mean) / std,
                        ret: buffer.returns[i],
                    }
                })
                .collect();
            let mut tape: Tape<f32> = Tape::new();
            let nodes = policy.params.stage(&mut tape);
            let mb = ppo_minibatch_graph(&mut tape, &nodes, &policy.config, &samples, cfg)?;
            let loss_val = tape.value(mb.loss)[0] as f64;
            if !loss_val.is_finite() {
                return Err(LearnError::NonFinite {
                    step: update_index,
                    detail: format!(
                        "ppo loss {loss_val} (epoch {epoch}, pi {}, vf {}, ent {})",
                        tape.value(mb.policy_loss)[0],
                        tape.value(mb.value_loss)[0],
                        tape.value(mb.entropy)[0]
                    ),
                });
            }
            stats.loss += loss_val;
            stats.policy_loss += tape.value(mb.policy_loss)[0] as f64;
            stats.value_loss += tape.value(mb.value_loss)[0] as f64;
            stats.entropy += tape.value(mb.entropy)[0] as f64;
            tape.backward(mb.loss)?;
            let mut grads = crate::tensor::optim::GradMap::new();
            accumulate_grads(&tape, &nodes, &policy.params, &mut grads);
            stats.grad_norm += clip_global_norm(&mut grads, cfg.max_grad_norm as f32) as f64;
            if !crate::tensor::optim::adam_step(&mut policy.params, &grads, opt) {
                return Err(LearnError::NonFinite {
                    step: update_index,
                    detail: "non-finite gradient in adam step".into(),
                });
            }
            batches += 1;
        }
    }
    let b = batches as f64;
    stats.loss /= b;
    stats.policy_loss /= b;
    stats.value_loss /= b;
    stats.entropy /= b;
    stats.grad_norm /= b;
    Ok(stats)
}

/// Environment interface for on-policy training. Implementations own their
/// world generation, observation-to-packet extraction, and proprioception.
pub trait PpoEnv {
    /// Begin the next training episode (drawn from the env's own seed stream).
    fn reset(&mut self) -> Result<()>;
    /// Begin a deterministic evaluation episode with the given index.
    fn reset_eval(&mut self, episode: usize) -> Result<()>;
    /// Representation packet and proprio features of the current observation.
    fn observe(&mut self) -> Result<(ReprPacket, Vec<f32>)>;
    fn step(&mut self, action: usize) -> Result<(f64, bool)>;
    fn num_actions(&self) -> usize;
    /// Whether the episode that just finished counts as a success.
    fn episode_success(&self) -> bool;
}

fn log_prob_of(logits: &[f32], action: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&l| ((l as f64) - mx).exp()).sum::<f64>().ln() + mx;
    logits[action] as f64 - lse
}

/// Deterministic greedy evaluation: runs `episodes` episodes, returns the
/// success count.
pub fn evaluate_policy(env: &mut dyn PpoEnv, policy: &Policy, episodes: usize) -> Result<usize> {
    let mut successes = 0;
    let mut rng = RunRng::new(0).stream("ppo-eval-unused", 0);
    for ep in 0..episodes {
        env.reset_eval(ep)?;
        loop {
            let (packet, proprio) = env.observe()?;
            let out = policy.forward_obs(&packet, &proprio)?;
            let action = act(&out, &policy.config, ActMode::Greedy, &mut rng)?;
            let (_, done) = env.step(action)?;
            if done {
                if env.episode_success() {
                    successes += 1;
                }
                break;
            }
        }
    }
    Ok(successes)
}

/// Full PPO training loop: alternate rollout collection (sampled actions)
/// with updates, plus periodic deterministic evaluation.
pub fn ppo_train(
    env: &mut dyn PpoEnv,
    eval_env: &mut dyn PpoEnv,
    policy: &mut Policy,
    cfg: &PPOConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let run = RunRng::new(seed);
    let mut act_rng = run.stream("ppo-act", 0);
    let mut opt = OptimState::new(cfg.lr.at(0));
    let mut report = TrainReport::new(
        &[
            "step",
            "lr",
            "loss",
            "policy_loss",
            "value_loss",
            "entropy",
            "grad_norm",
            "episode_return_mean",
            "eval_success_rate",
        ],
        serde_json::json!({ "algorithm": "ppo", "seed": seed, "config": cfg }),
    );
    env.reset()?;
    let mut steps: u64 = 0;
    let mut update_index: u64 = 0;
    let mut last_eval_rate = f64::NAN;
    let mut episode_return = 0.0;
    let mut final_eval_successes = 0usize;
    while steps < cfg.total_steps {
        let mut buffer = RolloutBuffer::new();
        let mut completed_returns: Vec<f64> = Vec::new();
        let mut last_done = false;
        for _ in 0..cfg.rollout_len {
            let (packet, proprio) = env.observe()?;
            let out = policy.forward_obs(&packet, &proprio)?;
            let action = act(&out, &policy.config, ActMode::Sample, &mut act_rng)?;
            let log_prob = log_prob_of(&out.logits, action);
            let (reward, done) = env.step(action)?;
            episode_return += reward;
            buffer.push(Transition {
                packet,
                proprio,
                action,
                reward,
                done,
                value: out.value.expect("categorical head") as f64,
                log_prob,
            });
            last_done = done;
            if done {
                completed_returns.push(episode_return);
                episode_return = 0.0;
                env.reset()?;
            }
        }
        let bootstrap = if last_done {
            0.0
        } else {
            let (packet, proprio) = env.observe()?;
            policy.forward_obs(&packet, &proprio)?.value.unwrap() as f64
        };
        buffer.finalize(bootstrap, cfg.gamma, cfg.lambda)?;
        let lr = cfg.lr.at(update_index);
        let stats = ppo_update(policy, &buffer, cfg, &mut opt, lr, &run, update_index)?;
        update_index += 1;
        steps += cfg.rollout_len as u64;
        let is_last = steps >= cfg.total_steps;
        if update_index % cfg.eval_every as u64 == 0 || is_last {
            let s = evaluate_policy(eval_env, policy, cfg.eval_episodes)?;
            last_eval_rate = s as f64 / cfg.eval_episodes as f64;
            if is_last {
                final_eval_successes = s;
            }
        }
        let ret_mean = if completed_returns.is_empty() {
            f64::NAN
        } else {
            completed_returns.iter().sum::<f64>() / completed_returns.len() as f64
        };
        report.push(vec![
            steps as f64,
            lr,
            stats.loss,
            stats.policy_loss,
            stats.value_loss,
            stats.entropy,
            stats.grad_norm,
            ret_mean,
            last_eval_rate,
        ]);
    }
    report.summary["final_eval_successes"] = serde_json::json!(final_eval_successes);
    report.summary["eval_episodes"] = serde_json::json!(cfg.eval_episodes);
    report.summary["final_eval_success_rate"] =
        serde_json::json!(final_eval_successes as f64 / cfg.eval_episodes as f64);
    Ok(report)
}

/// Success count of a uniform-random policy, the floor baseline.
pub fn evaluate_random(env: &mut dyn PpoEnv, episodes: usize, seed: u64) -> Result<usize> {
    let mut rng = RunRng::new(seed).stream("random-policy", 0);
    let mut successes = 0;
    let n = env.num_actions();
    for ep in 0..episodes {
        env.reset_eval(ep)?;
        loop {
            let action = rng.below(n);
            let (_, done) = env.step(action)?;
            if done {
                if env.episode_success() {
                    successes += 1;
                }
                break;
            }
        }
    }
    Ok(successes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::HeadKind;
    use crate::repr::{MergeMode, SegLabel};
    use crate::rng::RunRng;

    fn packet(t: usize, d: usize, seed: u64) -> ReprPacket {
        let mut rng = RunRng::new(seed).stream("pkt", 0);
        ReprPacket {
            t,
            d,
            embedding: (0..t * d).map(|_| rng.normal() as f32 * 0.4).collect(),
            mask: vec![true; t],
            segments: vec![SegLabel::Image; t],
            decoded: vec![],
            decoded_text: String::new(),
            prompt_id: "test".into(),
            model_hash: 0,
            merge: MergeMode::ConcatSeq,
        }
    }

    fn tiny_policy() -> Policy {
        let mut c = PolicyConfig::new(6, 2, 4);
        c.projection = 8;
        c.heads = 2;
        c.ff = 10;
        c.mlp_hidden = 6;
        c.dropout = 0.0;
        Policy::init(c, 5)
    }

    fn tiny_cfg() -> PPOConfig {
        PPOConfig {
            total_steps: 64,
            rollout_len: 16,
            batch: 8,
            update_epochs: 2,
            lr: LRSchedule::Constant(1e-3),
            eval_every: 2,
            eval_episodes: 4,
            ..PPOConfig::default()
        }
    }

    #[test]
    fn surrogate_clipping_definition() {
        // ratio 1.5, clip 0.2, A > 0 -> clipped branch 1.2 * A.
        assert_eq!(surrogate_scalar(1.5, 2.0, 0.2), 1.2 * 2.0);
        // Inside the clip band the raw ratio applies.
        assert_eq!(surrogate_scalar(1.1, 2.0, 0.2), 1.1 * 2.0);
        // Negative advantage: min picks the unclipped (more pessimistic) side.
        assert_eq!(surrogate_scalar(1.5, -1.0, 0.2), -1.5);
        assert_eq!(surrogate_scalar(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn config_invariants_enforced() {
        let mut c = tiny_cfg();
        c.rollout_len = 10; // not a multiple of 8
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    /// Build a synthetic finalized rollout over random packets.
    fn synthetic_buffer(policy: &Policy, cfg: &PPOConfig, seed: u64) -> RolloutBuffer {
        let mut rng = RunRng::new(seed).stream("buf", 0);
        let mut buf = RolloutBuffer::new();
        for i in 0..cfg.rollout_len {
            let p = packet(5, 6, seed * 1000 + i as u64);
            let proprio = vec![rng.normal() as f32 * 0.1, 0.5];
            let out = policy.forward_obs(&p, &proprio).unwrap();
            // Bandit-like reward: action 1 pays off.
            let action = rng.below(4);
            let reward = if action == 1 { 1.0 } else { 0.0 };
            buf.push(Transition {
                packet: p,
                proprio,
                action,
                reward,
                done: true, // one-step episodes
                value: out.value.unwrap() as f64,
                log_prob: log_prob_of(&out.logits, action),
            });
        }
        buf.finalize(0.0, cfg.gamma, cfg.lambda).unwrap();
        buf
    }

    #[test]
    fn ratio_one_gives_zero_policy_gradient_term() {
        // With theta = theta_old the ratio is exactly 1, so the surrogate is
        // the normalized advantage and its minibatch mean is ~0.
        let policy = tiny_policy();
        let cfg = tiny_cfg();
        let buffer = synthetic_buffer(&policy, &cfg, 3);
        let advs: Vec<f64> = buffer.advantages.clone();
        let m = advs.iter().sum::<f64>() / advs.len() as f64;
        let sd = (advs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / advs.len() as f64)
            .sqrt()
            .max(1e-8);
        let samples: Vec<MbSample<'_>> = buffer
            .transitions
            .iter()
            .zip(&buffer.advantages)
            .zip(&buffer.returns)
            .map(|((t, &a), &r)| MbSample {
                packet: &t.packet,
                proprio: &t.proprio,
                action: t.action,
                old_log_prob: t.log_prob,
                advantage: (a - m) / sd,
                ret: r,
            })
            .collect();
        let mut tape: Tape<f32> = Tape::new();
        let nodes = policy.params.stage(&mut tape);
        let mb = ppo_minibatch_graph(&mut tape, &nodes, &policy.config, &samples, &cfg).unwrap();
        let pg = tape.value(mb.policy_loss)[0] as f64;
        assert!(pg.abs() < 1e-4, "policy-gradient term {pg}");
    }

    #[test]
    fn loss_decreases_on_fixed_synthetic_buffer() {
        let mut policy = tiny_policy();
        let cfg = tiny_cfg();
        let buffer = synthetic_buffer(&policy, &cfg, 7);
        let run = RunRng::new(11);
        let mut opt = OptimState::new(1e-3);
        let mut losses = Vec::new();
        for u in 0..10 {
            let s = ppo_update(&mut policy, &buffer, &cfg, &mut opt, 1e-3, &run, u).unwrap();
            losses.push(s.loss);
        }
        assert!(
            losses[9] < losses[0],
            "loss did not decrease: {losses:?}"
        );
    }

    #[test]
    fn update_rejects_partial_or_unfinalized_rollouts() {
        let mut policy = tiny_policy();
        let cfg = tiny_cfg();
        let run = RunRng::new(0);
        let mut opt = OptimState::new(1e-3);
        let mut buf = RolloutBuffer::new();
        buf.push(Transition {
            packet: packet(5, 6, 0),
            proprio: vec![0.0, 0.0],
            action: 0,
            reward: 0.0,
            done: true,
            value: 0.0,
            log_prob: -1.0,
        });
        assert!(ppo_update(&mut policy, &buf, &cfg, &mut opt, 1e-3, &run, 0).is_err());
        buf.finalize(0.0, 0.99, 0.95).unwrap();
        assert!(ppo_update(&mut policy, &buf, &cfg, &mut opt, 1e-3, &run, 0).is_err());
    }

    #[test]
    fn ppo_loss_graph_passes_grad_check() {
        use crate::tensor::gradcheck::grad_check;
        let policy = tiny_policy();
        let cfg = tiny_cfg();
        let pkts: Vec<ReprPacket> = (0..3).map(|i| packet(4, 6, 100 + i)).collect();
        let proprios = [vec![0.1f32, -0.2], vec![0.0, 0.3], vec![0.4, 0.4]];
        let meta = [(0usize, -1.2f64, 0.8f64, 0.5f64), (2, -1.6, -0.4, -0.2), (1, -1.0, 1.3, 0.9)];
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = policy
            .params
            .0
            .values()
            .map(|p| (p.shape.clone(), p.data.iter().map(|&x| x as f64).collect()))
            .collect();
        let names: Vec<String> = policy.params.0.keys().cloned().collect();
        let pcfg = policy.config.clone();
        let r = grad_check(
            |tape, ids| {
                let nodes: NodeMap = names.iter().cloned().zip(ids.iter().copied()).collect();
                let samples: Vec<MbSample<'_>> = pkts
                    .iter()
                    .zip(&proprios)
                    .zip(&meta)
                    .map(|((p, pr), &(action, old_lp, adv, ret))| MbSample {
                        packet: p,
                        proprio: pr,
                        action,
                        old_log_prob: old_lp,
                        advantage: adv,
                        ret,
                    })
                    .collect();
                let mb = ppo_minibatch_graph(tape, &nodes, &pcfg, &samples, &cfg)
                    .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                Ok(mb.loss)
            },
            &inputs,
            1e-5,
            1e-4,
            Some(7),
        )
        .unwrap();
        assert!(r.pass, "ppo loss grad check: {r:?}");
    }

    /// Minimal deterministic environment: a 2-step corridor where action 1
    /// advances and anything else wastes the step.
    struct CorridorEnv {
        pos: usize,
        steps: u32,
        success: bool,
        packets: Vec<ReprPacket>,
    }

    impl CorridorEnv {
        fn new() -> Self {
            CorridorEnv {
                pos: 0,
                steps: 0,
                success: false,
                packets: (0..3).map(|i| packet(5, 6, 900 + i)).collect(),
            }
        }
    }

    impl PpoEnv for CorridorEnv {
        fn reset(&mut self) -> Result<()> {
            self.pos = 0;
            self.steps = 0;
            self.success = false;
            Ok(())
        }
        fn reset_eval(&mut self, _episode: usize) -> Result<()> {
            self.reset()
        }
        fn observe(&mut self) -> Result<(ReprPacket, Vec<f32>)> {
            Ok((self.packets[self.pos].clone(), vec![self.pos as f32, 1.0]))
        }
        fn step(&mut self, action: usize) -> Result<(f64, bool)> {
            self.steps += 1;
            if action == 1 {
                self.pos += 1;
            }
            let done = self.pos >= 2 || self.steps >= 8;
            if self.pos >= 2 {
                self.success = true;
            }
            Ok((if action == 1 { 0.5 } else { 0.0 }, done))
        }
        fn num_actions(&self) -> usize {
            4
        }
        fn episode_success(&self) -> bool {
            self.success
        }
    }

    #[test]
    fn train_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let mut r1 = {
            let mut env = CorridorEnv::new();
            let mut ev = CorridorEnv::new();
            let mut p = tiny_policy();
            ppo_train(&mut env, &mut ev, &mut p, &cfg, 42).unwrap()
        };
        let r2 = {
            let mut env = CorridorEnv::new();
            let mut ev = CorridorEnv::new();
            let mut p = tiny_policy();
            ppo_train(&mut env, &mut ev, &mut p, &cfg, 42).unwrap()
        };
        assert_eq!(r1.to_csv(), r2.to_csv());
        assert_eq!(r1.summary, r2.summary);
        // A different seed diverges.
        let r3 = {
            let mut env = CorridorEnv::new();
            let mut ev = CorridorEnv::new();
            let mut p = tiny_policy();
            ppo_train(&mut env, &mut ev, &mut p, &cfg, 43).unwrap()
        };
        assert_ne!(r1.to_csv(), r3.to_csv());
        r1.summary["note"] = serde_json::json!("mutation does not affect csv");
        assert_eq!(r1.to_csv(), r2.to_csv());
    }

    #[test]
    fn quantile_head_is_rejected_by_train_loop() {
        let mut c = PolicyConfig::new(6, 2, 4);
        c.projection = 8;
        c.heads = 2;
        c.ff = 10;
        c.mlp_hidden = 6;
        c.dropout = 0.0;
        c.head = HeadKind::Quantile { count: 3 };
        let policy = Policy::init(c, 0);
        let p = packet(5, 6, 1);
        let out = policy.forward_obs(&p, &[0.0, 0.0]).unwrap();
        assert!(out.value.is_none());
        // ppo_train would panic on the missing value; the act-mode contract
        // already rejects sampling from a quantile head.
        let mut rng = RunRng::new(0).stream("x", 0);
        assert!(act(&out, &policy.config, ActMode::Sample, &mut rng).is_err());
    }

    #[test]
    fn random_baseline_counts_successes() {
        let mut env = CorridorEnv::new();
        let s = evaluate_random(&mut env, 20, 9).unwrap();
        // Uniform over 4 actions, needs two successes of action 1 within 8
        // steps; empirically most episodes succeed, but determinism is the
        // contract here.
        let mut env2 = CorridorEnv::new();
        let s2 = evaluate_random(&mut env2, 20, 9).unwrap();
        assert_eq!(s, s2);
        assert!(s <= 20);
    }
}
