//! Behavior cloning on full trajectories with a recurrent policy core,
//! inflection upweighting, and per-action categorical upweighting.

use serde::{Deserialize, Serialize};

use super::{LearnError, Result, TrainReport};
use crate::policy::{build_forward, NodeMap, Policy};
use crate::repr::ReprPacket;
use crate::rng::RunRng;
use crate::tensor::optim::{accumulate_grads, clip_global_norm, adam_step, GradMap, OptimState};
use crate::tensor::{Elem, NodeId, Tape};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BCConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight applied when the expert's action differs from its previous one.
    pub inflection_weight: f64,
    /// Per-action categorical upweights (len = action count); all >= 1.
    pub action_weights: Vec<f64>,
    /// Batches contain whole trajectories, greedily packed until at least
    /// this many transitions are gathered.
    pub transitions_per_batch: usize,
    pub max_grad_norm: f64,
}

impl BCConfig {
    pub fn new(num_actions: usize) -> Self {
        BCConfig {
            epochs: 40,
            lr: 1e-4,
            inflection_weight: 2.0,
            action_weights: vec![1.0; num_actions],
            transitions_per_batch: 256,
            max_grad_norm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inflection_weight < 1.0 || self.action_weights.iter().any(|&w| w < 1.0) {
            return Err(LearnError::BadConfig(
                "upweights must all be >= 1".into(),
            ));
        }
        if self.transitions_per_batch == 0 || self.epochs == 0 {
            return Err(LearnError::BadConfig(
                "epochs and transitions_per_batch must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BcStep {
    pub packet: ReprPacket,
    pub proprio: Vec<f32>,
    pub action: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<BcStep>,
}

/// Per-step weights: inflection_weight where a_t != a_{t-1} (never on the
/// first step), multiplied by the categorical weight of a_t.
pub fn bc_step_weights(actions: &[usize], cfg: &BCConfig) -> Vec<f64> {
    actions
        .iter()
        .enumerate()
        .map(|(t, &a)| {
            let inflect = t > 0 && actions[t - 1] != a;
            let w = if inflect { cfg.inflection_weight } else { 1.0 };
            w * cfg.action_weights[a]
        })
        .collect()
}

/// Weighted cross-entropy over a row-per-step logits matrix [N, A]:
/// mean_t( w_t * -log softmax(logits_t)[a_t] ).
pub fn bc_loss_graph<E: Elem>(
    tape: &mut Tape<E>,
    logits: NodeId,
    actions: &[usize],
    weights: &[f64],
) -> crate::tensor::Result<NodeId> {
    let n = tape.shape(logits)[0];
    let a = tape.shape(logits)[1];
    assert_eq!(actions.len(), n, "one action per logits row");
    assert_eq!(weights.len(), n, "one weight per logits row");
    let lp = tape.log_softmax_last(logits)?;
    let mut pick = vec![E::ZERO; n * a];
    for (t, (&act, &w)) in actions.iter().zip(weights).enumerate() {
        pick[t * a + act] = E::from_f64(-w / n as f64);
    }
    let sel = tape.constant(vec![n, a], pick);
    let weighted = tape.mul(lp, sel)?;
    tape.sum(weighted)
}

/// Scalar oracle for [`bc_loss_graph`].
pub fn bc_loss_scalar(logits: &[Vec<f64>], actions: &[usize], weights: &[f64]) -> f64 {
    let n = logits.len();
    let mut total = 0.0;
    for t in 0..n {
        let row = &logits[t];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|l| (l - mx).exp()).sum::<f64>().ln() + mx;
        total += weights[t] * (lse - row[actions[t]]);
    }
    total / n as f64
}

/// Unrolled forward over one whole trajectory, carrying the recurrent state,
/// returning per-step weighted-CE sum (not yet normalized).
fn trajectory_loss_graph<E: Elem>(
    tape: &mut Tape<E>,
    nodes: &NodeMap,
    policy: &Policy,
    traj: &Trajectory,
    cfg: &BCConfig,
) -> Result<NodeId> {
    let pcfg = &policy.config;
    let actions: Vec<usize> = traj.steps.iter().map(|s| s.action).collect();
    let weights = bc_step_weights(&actions, cfg);
    let w = pcfg.mlp_hidden;
    let mut h = tape.constant(vec![1, w], vec![E::ZERO; w]);
    let mut acc: Option<NodeId> = None;
    for (step, weight) in traj.steps.iter().zip(&weights) {
        let tokens = tape.input(
            vec![step.packet.t, step.packet.d],
            step.packet.embedding.iter().map(|&x| E::from_f64(x as f64)).collect(),
            false,
        );
        let pr = tape.input(
            vec![1, step.proprio.len()],
            step.proprio.iter().map(|&x| E::from_f64(x as f64)).collect(),
            false,
        );
        let heads = if pcfg.recurrent {
            let heads = build_forward(tape, nodes, pcfg, tokens, &step.packet.mask, pr, Some(h))?;
            h = heads.features;
            heads
        } else {
            build_forward(tape, nodes, pcfg, tokens, &step.packet.mask, pr, None)?
        };
        let term = bc_loss_graph(tape, heads.output, &[step.action], &[*weight])?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("non-empty trajectory"))
}

/// Greedy full-trajectory packing: consecutive trajectories until the batch
/// holds at least `transitions_per_batch` transitions.
pub fn pack_batches(lengths: &[usize], target: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut cur_n = 0usize;
    for (i, &len) in lengths.iter().enumerate() {
        cur.push(i);
        cur_n += len;
        if cur_n >= target {
            batches.push(std::mem::take(&mut cur));
            cur_n = 0;
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Behavior-cloning training over full trajectories. `eval` (if given) maps
/// the current policy to a held-out success rate, reported once per epoch.
pub fn bc_train(
    dataset: &[Trajectory],
    policy: &mut Policy,
    cfg: &BCConfig,
    seed: u64,
    mut eval: Option<&mut dyn FnMut(&Policy) -> Result<f64>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() || dataset.iter().any(|t| t.steps.is_empty()) {
        return Err(LearnError::EmptyDataset);
    }
    let run = RunRng::new(seed);
    let mut opt = OptimState::new(cfg.lr);
    let mut report = TrainReport::new(
        &["epoch", "train_loss", "grad_norm", "eval_success_rate"],
        serde_json::json!({ "algorithm": "bc", "seed": seed, "config": cfg }),
    );
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        run.stream("bc-shuffle", epoch as u64).shuffle(&mut order);
        let lengths: Vec<usize> = order.iter().map(|&i| dataset[i].steps.len()).collect();
        let batches = pack_batches(&lengths, cfg.transitions_per_batch);
        let mut epoch_loss = 0.0;
        let mut epoch_norm = 0.0;
        let mut epoch_n = 0usize;
        for batch in &batches {
            let mut tape: Tape<f32> = Tape::new();
            let nodes = policy.params.stage(&mut tape);
            let mut acc: Option<NodeId> = None;
            let mut n_trans = 0usize;
            for &slot in batch {
                let traj = &dataset[order[slot]];
                let t = trajectory_loss_graph(&mut tape, &nodes, policy, traj, cfg)?;
                n_trans += traj.steps.len();
                acc = Some(match acc {
                    None => t,
                    Some(prev) => tape.add(prev, t)?,
                });
            }
            let loss = tape.scale(acc.unwrap(), 1.0 / n_trans as f64)?;
            let loss_val = tape.value(loss)[0] as f64;
            if !loss_val.is_finite() {
                return Err(LearnError::NonFinite {
                    step: epoch as u64,
                    detail: format!("bc loss {loss_val}"),
                });
            }
            tape.backward(loss)?;
            let mut grads = GradMap::new();
            accumulate_grads(&tape, &nodes, &policy.params, &mut grads);
            epoch_norm += clip_global_norm(&mut grads, cfg.max_grad_norm as f32) as f64;
            if !adam_step(&mut policy.params, &grads, &mut opt) {
                return Err(LearnError::NonFinite {
                    step: epoch as u64,
                    detail: "non-finite gradient in adam step".into(),
                });
            }
            epoch_loss += loss_val * n_trans as f64;
            epoch_n += n_trans;
        }
        let success = match eval.as_deref_mut() {
            Some(f) => f(policy)?,
            None => f64::NAN,
        };
        report.push(vec![
            epoch as f64,
            epoch_loss / epoch_n as f64,
            epoch_norm / batches.len() as f64,
            success,
        ]);
    }
    Ok(report)
}
