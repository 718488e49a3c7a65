//! Supervised pretraining on the synthetic VQA mixture. Cross-entropy on
//! answer tokens only; reports held-out exact-match accuracy per family.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rng::RunRng;
use crate::tensor::optim::{
    accumulate_grads, adam_step, clip_global_norm, GradMap, LRSchedule, OptimState,
};
use crate::tensor::Tape;

use super::infer::FastVlm;
use super::vqa::VqaSample;
use super::{Result, VlmModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LRSchedule,
    pub grad_clip: f32,
    pub holdout_frac: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: LRSchedule::Constant(3e-4),
            grad_clip: 1.0,
            holdout_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyAccuracy {
    pub family: String,
    pub n: usize,
    pub correct: usize,
}

impl FamilyAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n.max(1) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub holdout: Vec<FamilyAccuracy>,
    /// True when training hit a non-finite loss and reverted to the last
    /// finite parameters.
    pub aborted: bool,
}

impl PretrainReport {
    pub fn family_accuracy(&self, family: &str) -> Option<f64> {
        self.holdout
            .iter()
            .find(|f| f.family == family)
            .map(|f| f.accuracy())
    }
}

/// Deterministic train/holdout split: shuffled indices, holdout first.
pub fn split_indices(n: usize, holdout_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RunRng::new(seed).stream("vlm-split", 0);
    rng.shuffle(&mut idx);
    let cut = ((n as f64) * holdout_frac).round() as usize;
    let (hold, train) = idx.split_at(cut.min(n));
    (train.to_vec(), hold.to_vec())
}

/// Held-out exact-match accuracy per family (teacher-forced argmax must equal
/// answer + END at every step).
pub fn evaluate_families(model: &VlmModel, samples: &[&VqaSample]) -> Result<Vec<FamilyAccuracy>> {
    let fast = FastVlm::new(model);
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in samples {
        let targets = s.targets();
        let pred = fast.predict_answer(&s.seq, &targets)?;
        let e = acc.entry(s.family.to_string()).or_insert((0, 0));
        e.0 += 1;
        if pred
            .iter()
            .zip(&targets)
            .all(|(p, t)| p == t)
        {
            e.1 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(family, (n, correct))| FamilyAccuracy { family, n, correct })
        .collect())
}

pub fn pretrain(
    model: &mut VlmModel,
    data: &[VqaSample],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    assert!(!data.is_empty(), "dataset must be non-empty");
    let (train_idx, hold_idx) = split_indices(data.len(), cfg.holdout_frac, cfg.seed);
    let root = RunRng::new(cfg.seed);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let mut opt = OptimState::new(cfg.lr.at(0));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut last_good = model.params.clone();
    let mut aborted = false;

    'train: for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        root.stream("vlm-shuffle", epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = (epoch * steps_per_epoch + b) as u64;
            let dropout = root.stream("vlm-dropout", step);
            let mut tape: Tape<f32> = Tape::new().train_mode(true, Some(dropout));
            let nodes = model.params.stage(&mut tape);
            let mut total = None;
            for &i in batch {
                let s = &data[i];
                let l = super::graph::answer_loss(&mut tape, &nodes, &model.config, &s.seq, &s.targets())?;
                let l = tape.scale(l, 1.0 / batch.len() as f64)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let total = total.expect("non-empty batch");
            let loss = tape.value(total)[0] as f64;
            if !loss.is_finite() {
                model.params = last_good;
                aborted = true;
                break 'train;
            }
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();
            tape.backward(total)?;
            let mut grads = GradMap::new();
            accumulate_grads(&tape, &nodes, &model.params, &mut grads);
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.lr = cfg.lr.at(step);
            if adam_step(&mut model.params, &grads, &mut opt) {
                last_good = model.params.clone();
            }
        }
        epoch_losses.push(epoch_loss / seen.max(1) as f64);
    }

    let hold: Vec<&VqaSample> = hold_idx.iter().map(|&i| &data[i]).collect();
    let holdout = evaluate_families(model, &hold)?;
    Ok(PretrainReport {
        epoch_losses,
        steps: opt.step,
        holdout,
        aborted,
    })
}
