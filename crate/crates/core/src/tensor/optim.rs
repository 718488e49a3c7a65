//! Parameter store, Adam, gradient clipping, and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named parameter blocks. BTreeMap keeps iteration order deterministic,
/// which the checkpoint format and the optimizer both rely on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params(pub BTreeMap<String, Param>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, param: Param) {
        self.0.insert(name.to_string(), param);
    }

    pub fn get(&self, name: &str) -> &Param {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(|p| p.data.len()).sum()
    }

    /// Register every parameter on a tape as a differentiable input.
    pub fn stage(&self, tape: &mut Tape<f32>) -> BTreeMap<String, NodeId> {
        self.0
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    tape.input(p.shape.clone(), p.data.clone(), true),
                )
            })
            .collect()
    }

    /// Same, widening to f64 for gradient checking.
    pub fn stage_f64(&self, tape: &mut Tape<f64>) -> BTreeMap<String, NodeId> {
        self.0
            .iter()
            .map(|(name, p)| {
                let data: Vec<f64> = p.data.iter().map(|&v| v as f64).collect();
                (name.clone(), tape.input(p.shape.clone(), data, true))
            })
            .collect()
    }
}

/// Accumulated gradients keyed like [`Params`].
pub type GradMap = BTreeMap<String, Vec<f32>>;

/// Pull gradients off a tape after backward, summing into `into`.
pub fn accumulate_grads(
    tape: &Tape<f32>,
    nodes: &BTreeMap<String, NodeId>,
    params: &Params,
    into: &mut GradMap,
) {
    for (name, &id) in nodes {
        let g = tape.grad(id);
        let buf = into
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; params.get(name).data.len()]);
        for (b, &v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update with standard bias correction. Non-finite gradients reject
/// the whole step (returns false) and leave the step counter unchanged.
pub fn adam_step(params: &mut Params, grads: &GradMap, state: &mut OptimState) -> bool {
    for g in grads.values() {
        if g.iter().any(|v| !v.is_finite()) {
            return false;
        }
    }
    state.step += 1;
    let (lr, beta1, beta2, eps, wd) = (
        state.lr,
        state.beta1,
        state.beta2,
        state.eps,
        state.weight_decay,
    );
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (name, param) in params.0.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; param.data.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; param.data.len()]);
        for i in 0..param.data.len() {
            let gi = g[i] as f64 + wd * param.data[i] as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            param.data[i] -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
        }
    }
    true
}

/// Cosine decay from `lr_max` to `lr_min` over `total` steps, clamped after.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum LRSchedule {
    Constant(f64),
    Cosine { max: f64, min: f64, total: u64 },
}

impl LRSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LRSchedule::Constant(lr) => lr,
            LRSchedule::Cosine { max, min, total } => cosine_lr(step, total, max, min),
        }
    }
}
