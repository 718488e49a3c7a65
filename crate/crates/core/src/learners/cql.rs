//! Conservative Q-learning on a quantile-regression Q-network: quantile
//! Huber TD loss (scaled by the configured multiplier) plus the conservative
//! penalty logsumexp_a Qbar(s, a) - Qbar(s, a_data), with hard target-network
//! copies.

use serde::{Deserialize, Serialize};

use super::{quantile_huber_graph, LearnError, Result, TrainReport};
use crate::policy::{build_forward, HeadKind, Policy};
use crate::repr::ReprPacket;
use crate::rng::RunRng;
use crate::tensor::optim::{accumulate_grads, adam_step, GradMap, OptimState};
use crate::tensor::{Elem, NodeId, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CQLConfig {
    /// Multiplier on the QR-DQN TD component (0.2, i.e. penalty weight
    /// alpha = 1 / 0.2 = 5 relative to TD).
    pub td_multiplier: f64,
    /// Target-network update coefficient; 1.0 means hard copies.
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    pub quantiles: usize,
    pub huber_kappa: f64,
    /// Buffer loads at most this many transitions per pass.
    pub buffer_fill: usize,
    pub batch: usize,
    pub grad_steps_per_batch: usize,
    /// Evaluation cadence in epochs.
    pub eval_every: usize,
}

impl Default for CQLConfig {
    fn default() -> Self {
        CQLConfig {
            td_multiplier: 0.2,
            tau: 1.0,
            gamma: 0.99,
            lr: 1e-4,
            epochs: 100,
            quantiles: 50,
            huber_kappa: 1.0,
            buffer_fill: 32_768,
            batch: 512,
            grad_steps_per_batch: 8,
            eval_every: 5,
        }
    }
}

impl CQLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.td_multiplier <= 0.0 {
            return Err(LearnError::BadConfig("td multiplier must be > 0".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(LearnError::BadConfig(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.batch == 0 || self.quantiles < 2 {
            return Err(LearnError::BadConfig("batch and quantiles must be positive".into()));
        }
        Ok(())
    }

    /// Batches sampled per buffer load: each transition seen once in
    /// expectation.
    pub fn batches_per_buffer(&self, buffer_len: usize) -> usize {
        buffer_len.div_ceil(self.batch)
    }
}

#[derive(Debug, Clone)]
pub struct OfflineTransition {
    pub packet: ReprPacket,
    pub proprio: Vec<f32>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub next_packet: ReprPacket,
    pub next_proprio: Vec<f32>,
}

/// Offline transition storage.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    pub transitions: Vec<OfflineTransition>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: OfflineTransition) {
        self.transitions.push(t);
    }
}

/// Conservative penalty over mean-quantile action values:
/// logsumexp_a Qbar(s, a) - Qbar(s, a_data). Always >= 0 when a_data is the
/// argmax (logsumexp dominates the max).
pub fn cql_penalty_scalar(qbar: &[f64], data_action: usize) -> f64 {
    let mx = qbar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = qbar.iter().map(|q| (q - mx).exp()).sum::<f64>().ln() + mx;
    lse - qbar[data_action]
}

/// TD target quantiles: r + gamma * (1 - done) * theta'(s', a*), where a* is
/// the argmax of the target network's mean-quantile values. `next_quantiles`
/// is row-major [A, Q] from the target network.
pub fn quantile_td_target(
    next_quantiles: &[f32],
    num_actions: usize,
    quantiles: usize,
    reward: f64,
    gamma: f64,
    done: bool,
) -> Vec<f64> {
    if done {
        return vec![reward; quantiles];
    }
    let mut best = 0usize;
    let mut best_mean = f64::NEG_INFINITY;
    for a in 0..num_actions {
        let mean = next_quantiles[a * quantiles..(a + 1) * quantiles]
            .iter()
            .map(|&q| q as f64)
            .sum::<f64>()
            / quantiles as f64;
        if mean > best_mean {
            best_mean = mean;
            best = a;
        }
    }
    next_quantiles[best * quantiles..(best + 1) * quantiles]
        .iter()
        .map(|&q| reward + gamma * q as f64)
        .collect()
}

pub struct CqlSampleNodes {
    pub loss: NodeId,
    pub td: NodeId,
    pub penalty: NodeId,
}

/// Per-sample CQL loss graph over a quantile output node [A, Q]:
/// td_multiplier * quantile-Huber TD + (logsumexp_a Qbar - Qbar(a_data)).
pub fn cql_sample_graph<E: Elem>(
    tape: &mut Tape<E>,
    output: NodeId,
    data_action: usize,
    target: &[f64],
    cfg: &CQLConfig,
) -> crate::tensor::Result<NodeId>
where
    E: Elem,
{
    let (loss, _, _) = cql_sample_graph_parts(tape, output, data_action, target, cfg)?;
    Ok(loss)
}

pub fn cql_sample_graph_parts<E: Elem>(
    tape: &mut Tape<E>,
    output: NodeId,
    data_action: usize,
    target: &[f64],
    cfg: &CQLConfig,
) -> crate::tensor::Result<(NodeId, NodeId, NodeId)> {
    let q = tape.shape(output)[1];
    let pred = tape.slice_rows(output, data_action, data_action + 1)?; // [1, Q]
    let td = quantile_huber_graph(tape, pred, target, cfg.huber_kappa)?;

    // Mean-quantile values per action: [A, Q] x [Q, 1]/Q -> [A, 1] -> [1, A].
    let ones = tape.constant(vec![q, 1], vec![E::from_f64(1.0 / q as f64); q]);
    let qbar_col = tape.matmul(output, ones)?;
    let qbar = tape.transpose(qbar_col)?;
    let lse = tape.logsumexp_last(qbar)?;
    let qbar_data = tape.mean(pred)?;
    let penalty = tape.sub(lse, qbar_data)?;

    let td_scaled = tape.scale(td, cfg.td_multiplier)?;
    let loss = tape.add(td_scaled, penalty)?;
    Ok((loss, td, penalty))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CqlStats {
    pub loss: f64,
    pub td: f64,
    pub penalty: f64,
}

/// One gradient step over a sampled batch of transitions.
pub fn cql_update(
    policy: &mut Policy,
    target_net: &Policy,
    buffer: &ReplayBuffer,
    batch: &[usize],
    cfg: &CQLConfig,
    opt: &mut OptimState,
) -> Result<CqlStats> {
    cfg.validate()?;
    let HeadKind::Quantile { count } = policy.config.head else {
        return Err(LearnError::BadConfig("CQL needs a quantile head".into()));
    };
    if count != cfg.quantiles {
        return Err(LearnError::BadConfig(format!(
            "policy has {count} quantiles, config says {}",
            cfg.quantiles
        )));
    }
    let a_count = policy.config.num_actions;
    let mut tape: Tape<f32> = Tape::new();
    let nodes = policy.params.stage(&mut tape);
    let mut loss_terms = Vec::with_capacity(batch.len());
    let mut td_terms = Vec::with_capacity(batch.len());
    let mut pen_terms = Vec::with_capacity(batch.len());
    for &i in batch {
        let tr = &buffer.transitions[i];
        // Target quantiles from the frozen target network (no gradient).
        let next_out = target_net.forward_obs(&tr.next_packet, &tr.next_proprio)?;
        let target = quantile_td_target(
            &next_out.logits,
            a_count,
            cfg.quantiles,
            tr.reward,
            cfg.gamma,
            tr.done,
        );
        let tokens = tape.input(
            vec![tr.packet.t, tr.packet.d],
            tr.packet.embedding.clone(),
            false,
        );
        let pr = tape.input(vec![1, tr.proprio.len()], tr.proprio.clone(), false);
        let heads = build_forward(&mut tape, &nodes, &policy.config, tokens, &tr.packet.mask, pr, None)?;
        let (loss, td, pen) = cql_sample_graph_parts(&mut tape, heads.output, tr.action, &target, cfg)?;
        loss_terms.push(loss);
        td_terms.push(td);
        pen_terms.push(pen);
    }
    let m = batch.len() as f64;
    let mean_of = |terms: &[NodeId], tape: &mut Tape<f32>| -> crate::tensor::Result<NodeId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        tape.scale(acc, 1.0 / m)
    };
    let loss = mean_of(&loss_terms, &mut tape)?;
    let td_mean = mean_of(&td_terms, &mut tape)?;
    let pen_mean = mean_of(&pen_terms, &mut tape)?;
    let loss_val = tape.value(loss)[0] as f64;
    if !loss_val.is_finite() {
        return Err(LearnError::NonFinite {
            step: opt.step,
            detail: format!("cql loss {loss_val}"),
        });
    }
    let stats = CqlStats {
        loss: loss_val,
        td: tape.value(td_mean)[0] as f64,
        penalty: tape.value(pen_mean)[0] as f64,
    };
    tape.backward(loss)?;
    let mut grads = GradMap::new();
    accumulate_grads(&tape, &nodes, &policy.params, &mut grads);
    if !adam_step(&mut policy.params, &grads, opt) {
        return Err(LearnError::NonFinite {
            step: opt.step,
            detail: "non-finite gradient in adam step".into(),
        });
    }
    Ok(stats)
}

/// Hard (tau = 1) or Polyak target update.
pub fn refresh_target(target_net: &mut Policy, policy: &Policy, tau: f64) {
    for (name, p) in policy.params.0.iter() {
        let t = target_net.params.0.get_mut(name).expect("matching params");
        for (tv, &pv) in t.data.iter_mut().zip(&p.data) {
            *tv = (1.0 - tau) as f32 * *tv + tau as f32 * pv;
        }
    }
}

/// Offline training: epochs over buffer loads; per load, ceil(len/batch)
/// sampled batches, each reused for `grad_steps_per_batch` gradient steps;
/// hard target refresh after every buffer pass.
pub fn cql_train(
    dataset: &ReplayBuffer,
    policy: &mut Policy,
    cfg: &CQLConfig,
    seed: u64,
    mut eval: Option<&mut dyn FnMut(&Policy) -> Result<f64>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    let run = RunRng::new(seed);
    let mut opt = OptimState::new(cfg.lr);
    let mut target_net = policy.clone();
    let mut report = TrainReport::new(
        &["epoch", "loss", "td", "penalty", "eval_success_rate"],
        serde_json::json!({ "algorithm": "cql", "seed": seed, "config": cfg }),
    );
    let n = dataset.len();
    let mut pass_index: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut stats = CqlStats::default();
        let mut steps = 0usize;
        // Buffer loads cover the dataset in chunks of at most buffer_fill.
        for chunk_start in (0..n).step_by(cfg.buffer_fill.max(1)) {
            let chunk_end = (chunk_start + cfg.buffer_fill).min(n);
            let chunk_len = chunk_end - chunk_start;
            let batches = cfg.batches_per_buffer(chunk_len);
            let mut rng = run.stream("cql-batch", pass_index);
            for _ in 0..batches {
                let batch: Vec<usize> = (0..cfg.batch.min(chunk_len))
                    .map(|_| chunk_start + rng.below(chunk_len))
                    .collect();
                for _ in 0..cfg.grad_steps_per_batch {
                    let s = cql_update(policy, &target_net, dataset, &batch, cfg, &mut opt)?;
                    stats.loss += s.loss;
                    stats.td += s.td;
                    stats.penalty += s.penalty;
                    steps += 1;
                }
            }
            refresh_target(&mut target_net, policy, cfg.tau);
            pass_index += 1;
        }
        let success = if epoch % cfg.eval_every == cfg.eval_every - 1 || epoch + 1 == cfg.epochs {
            match eval.as_deref_mut() {
                Some(f) => f(policy)?,
                None => f64::NAN,
            }
        } else {
            f64::NAN
        };
        let d = steps as f64;
        report.push(vec![
            epoch as f64,
            stats.loss / d,
            stats.td / d,
            stats.penalty / d,
            success,
        ]);
    }
    if let Some(last) = report.rows.last() {
        report.summary["final_eval_success_rate"] = serde_json::json!(last[4]);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
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

    fn tiny_policy(quantiles: usize) -> Policy {
        let mut c = PolicyConfig::new(6, 2, 3).with_quantiles(quantiles);
        c.projection = 8;
        c.heads = 2;
        c.ff = 10;
        c.mlp_hidden = 6;
        c.dropout = 0.0;
        Policy::init(c, 23)
    }

    fn tiny_cfg(quantiles: usize) -> CQLConfig {
        CQLConfig {
            quantiles,
            epochs: 2,
            buffer_fill: 8,
            batch: 4,
            grad_steps_per_batch: 2,
            lr: 1e-3,
            eval_every: 1,
            ..CQLConfig::default()
        }
    }

    fn synthetic_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let mut rng = RunRng::new(seed).stream("buf", 0);
        let mut buf = ReplayBuffer::new();
        for i in 0..n {
            buf.push(OfflineTransition {
                packet: packet(4, 6, seed * 100 + i as u64),
                proprio: vec![0.1, -0.1],
                action: rng.below(3),
                reward: rng.uniform(),
                done: rng.bernoulli(0.3),
                next_packet: packet(4, 6, seed * 100 + 50 + i as u64),
                next_proprio: vec![0.0, 0.2],
            });
        }
        buf
    }

    #[test]
    fn penalty_hand_value_and_degenerate_case() {
        // Qbar = [1, 2], data action = argmax -> ln(e + e^2) - 2.
        let want = (1f64.exp() + 2f64.exp()).ln() - 2.0;
        assert!((cql_penalty_scalar(&[1.0, 2.0], 1) - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
        // Single action: logsumexp of one value is itself.
        assert_eq!(cql_penalty_scalar(&[7.5], 0), 0.0);
    }

    #[test]
    fn penalty_nonnegative_when_data_action_is_argmax() {
        let mut rng = RunRng::new(4).stream("pen", 0);
        for _ in 0..200 {
            let n = 2 + rng.below(5);
            let q: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
            let argmax = (0..n).max_by(|&a, &b| q[a].partial_cmp(&q[b]).unwrap()).unwrap();
            assert!(cql_penalty_scalar(&q, argmax) >= 0.0);
        }
    }

    #[test]
    fn graph_penalty_matches_scalar() {
        let quantiles = 4;
        let cfg = tiny_cfg(quantiles);
        // Constant [A, Q] input with known mean-quantile values.
        let rows = vec![
            vec![1.0f64, 1.0, 1.0, 1.0], // Qbar = 1
            vec![2.0, 2.0, 2.0, 2.0],    // Qbar = 2
            vec![0.0, 0.0, 0.0, 0.0],    // Qbar = 0
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let mut tape: Tape<f64> = Tape::new();
        let out = tape.input(vec![3, quantiles], flat, false);
        let (_, _, pen) = cql_sample_graph_parts(&mut tape, out, 1, &[0.0; 4], &cfg).unwrap();
        let want = cql_penalty_scalar(&[1.0, 2.0, 0.0], 1);
        assert!((tape.value(pen)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn terminal_td_target_is_reward_exactly() {
        let next = vec![0.3f32; 3 * 4];
        let t = quantile_td_target(&next, 3, 4, 6.25, 0.99, true);
        assert_eq!(t, vec![6.25; 4]);
        // Non-terminal: r + gamma * best-mean action's quantiles.
        let mut next = vec![0.0f32; 12];
        next[4..8].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]); // action 1 mean 2.5
        let t = quantile_td_target(&next, 3, 4, 1.0, 0.5, false);
        assert_eq!(t, vec![1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn cql_loss_graph_passes_grad_check() {
        use crate::tensor::gradcheck::grad_check;
        let quantiles = 5;
        let policy = tiny_policy(quantiles);
        let cfg = tiny_cfg(quantiles);
        let pkt = packet(4, 6, 77);
        let target = [0.4, -0.3, 0.8, 0.1, 0.6];
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = policy
            .params
            .0
            .values()
            .map(|p| (p.shape.clone(), p.data.iter().map(|&x| x as f64).collect()))
            .collect();
        let names: Vec<String> = policy.params.0.keys().cloned().collect();
        let pcfg = policy.config.clone();
        let emb: Vec<f64> = pkt.embedding.iter().map(|&x| x as f64).collect();
        let mask = pkt.mask.clone();
        let r = grad_check(
            |tape, ids| {
                let nodes: NodeMap = names.iter().cloned().zip(ids.iter().copied()).collect();
                let tokens = tape.input(vec![4, 6], emb.clone(), false);
                let pr = tape.input(vec![1, 2], vec![0.1, -0.1], false);
                let heads = build_forward(tape, &nodes, &pcfg, tokens, &mask, pr, None)
                    .map_err(|e| crate::tensor::TensorError::Invalid(e.to_string()))?;
                cql_sample_graph(tape, heads.output, 2, &target, &cfg)
            },
            &inputs,
            1e-5,
            1e-4,
            Some(7),
        )
        .unwrap();
        assert!(r.pass, "cql loss grad check: {r:?}");
    }

    #[test]
    fn batches_per_buffer_arithmetic() {
        let cfg = CQLConfig::default();
        assert_eq!(cfg.batches_per_buffer(32_768), 64);
        assert_eq!(cfg.batches_per_buffer(513), 2);
        assert_eq!(cfg.batches_per_buffer(512), 1);
        assert_eq!(cfg.batches_per_buffer(100), 1);
    }

    #[test]
    fn hard_target_refresh_copies_params() {
        let mut policy = tiny_policy(4);
        let mut target = tiny_policy(4);
        // Perturb the online network.
        for p in policy.params.0.values_mut() {
            for v in p.data.iter_mut() {
                *v += 0.25;
            }
        }
        refresh_target(&mut target, &policy, 1.0);
        for (a, b) in target.params.0.values().zip(policy.params.0.values()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn training_is_deterministic_and_runs_loss_down() {
        let data = synthetic_buffer(16, 3);
        let cfg = tiny_cfg(4);
        let mut p1 = tiny_policy(4);
        let r1 = cql_train(&data, &mut p1, &cfg, 31, None).unwrap();
        let mut p2 = tiny_policy(4);
        let r2 = cql_train(&data, &mut p2, &cfg, 31, None).unwrap();
        assert_eq!(r1.to_csv(), r2.to_csv());
        for (a, b) in p1.params.0.values().zip(p2.params.0.values()) {
            assert_eq!(a.data, b.data);
        }
        assert!(r1.rows.iter().all(|r| r[1].is_finite()));
    }

    #[test]
    fn config_invariants() {
        let mut c = CQLConfig::default();
        c.td_multiplier = 0.0;
        assert!(c.validate().is_err());
        let mut c = CQLConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = CQLConfig::default();
        c.tau = 1.5;
        assert!(c.validate().is_err());
        assert!(CQLConfig::default().validate().is_ok());
    }
}
