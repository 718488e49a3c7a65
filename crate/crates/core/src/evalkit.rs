//! Prompt evaluation and representation analysis: labeled clip collection,
//! decode-accuracy TPR/TNR, a linear position probe on decoded-token
//! embeddings, PCA scatter exports, a 2-means bimodality score, and
//! value-colored room maps.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridcraft::{self, TargetPosition, TaskSpec, WINDOW};
use crate::repr::pca::{fit_projection, PcaError, PcaProjection};
use crate::repr::{ReprPacket, SegLabel};
use crate::rng::RunRng;
use crate::vlm::infer::FastVlm;
use crate::vlm::vocab::{TokenId, Vocab};
use crate::vlm::VlmModel;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least one frame per clip")]
    NoFrames,
    #[error("world has no live target entity")]
    NoTarget,
    #[error("probe needs all 3 position classes, found {0}")]
    TooFewClasses(usize),
    #[error("bimodality needs both decode labels present")]
    SingleLabel,
    #[error("empty dataset")]
    Empty,
    #[error("feature length {got} does not match dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("value coloring needs a value for every point")]
    MissingValue,
    #[error(transparent)]
    Grid(#[from] gridcraft::GridError),
    #[error(transparent)]
    Vlm(#[from] crate::vlm::VlmError),
    #[error(transparent)]
    Repr(#[from] crate::repr::ReprError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// Labeled clips
// ---------------------------------------------------------------------------

/// One rendered frame plus the camera pose that produced it, labeled from
/// ground truth (never from the VLM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFrame {
    pub window: Vec<u8>,
    pub obs_hash: u64,
    pub agent_x: i32,
    pub agent_y: i32,
    pub heading: u8,
    pub present: bool,
    pub position: TargetPosition,
}

/// One scripted orbit; the target is held in a single position band for the
/// whole clip (or absent throughout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub world_seed: u64,
    pub held: TargetPosition,
    pub frames: Vec<ClipFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledClipSet {
    pub task: String,
    pub seed: u64,
    pub frames_per_clip: usize,
    pub clips: Vec<Clip>,
}

impl LabeledClipSet {
    pub fn frames(&self) -> impl Iterator<Item = &ClipFrame> {
        self.clips.iter().flat_map(|c| c.frames.iter())
    }
}

/// Camera pose for frame `f` of a clip holding the target in `held`:
/// (dx, dy, heading) offsets from the target cell, facing north so the
/// window's rightward axis is +x and forward is -y.
pub fn orbit_pose(held: TargetPosition, f: usize) -> (i32, i32, u8) {
    let df = 2 + (f % 3) as i32; // rows vary within the clip
    let r = match held {
        TargetPosition::Left => -(2 + (f % 3) as i32),
        TargetPosition::Middle => (f % 3) as i32 - 1,
        TargetPosition::Right => 2 + (f % 3) as i32,
        TargetPosition::Absent => 0,
    };
    (-r, df, 0)
}

/// Deterministic scripted orbits around the task target. Clips cycle through
/// the four held positions; for absent clips the target entity is removed
/// before rendering. Labels are re-derived from the ground-truth detector on
/// every frame, never assumed from the script.
pub fn collect_labeled_clips(
    task: &TaskSpec,
    clips: usize,
    frames_per_clip: usize,
    seed: u64,
) -> Result<LabeledClipSet> {
    if frames_per_clip == 0 {
        return Err(EvalError::NoFrames);
    }
    const HELD: [TargetPosition; 4] = [
        TargetPosition::Left,
        TargetPosition::Middle,
        TargetPosition::Right,
        TargetPosition::Absent,
    ];
    let mut out = Vec::with_capacity(clips);
    for c in 0..clips {
        let world_seed = seed.wrapping_add(c as u64);
        let mut state = gridcraft::create_world(task, world_seed)?;
        let held = HELD[c % 4];
        let t = state.target_index().ok_or(EvalError::NoTarget)?;
        let (tx, ty) = (state.entities[t].x, state.entities[t].y);
        if held == TargetPosition::Absent {
            state.entities[t].hp = 0;
        }
        let mut frames = Vec::with_capacity(frames_per_clip);
        for f in 0..frames_per_clip {
            let (dx, dy, heading) = orbit_pose(held, f);
            state.agent_x = tx + dx;
            state.agent_y = ty + dy;
            state.heading = heading;
            let (present, position) = gridcraft::oracle_target_visible(&state);
            let obs = state.observe();
            frames.push(ClipFrame {
                obs_hash: obs.hash64(),
                window: obs.window,
                agent_x: state.agent_x,
                agent_y: state.agent_y,
                heading,
                present,
                position,
            });
        }
        out.push(Clip {
            world_seed,
            held,
            frames,
        });
    }
    Ok(LabeledClipSet {
        task: task.kind.name().to_string(),
        seed,
        frames_per_clip,
        clips: out,
    })
}

// ---------------------------------------------------------------------------
// Detection rates
// ---------------------------------------------------------------------------

/// First yes/no token among the decoded ids, if any.
pub fn answer_from_decoded(decoded: &[TokenId], vocab: &Vocab) -> Option<bool> {
    let yes = vocab.id("yes");
    let no = vocab.id("no");
    decoded.iter().find_map(|&t| {
        if t == yes {
            Some(true)
        } else if t == no {
            Some(false)
        } else {
            None
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRates {
    pub tpr: f64,
    pub tnr: f64,
    pub present_frames: usize,
    pub absent_frames: usize,
    /// Frames whose decode contained neither yes nor no; each is already
    /// counted as wrong in the rate it belongs to.
    pub undecodable: usize,
}

/// Pure aggregation of per-frame answers against labels. `answers[i]` is the
/// extracted yes/no for frame `i` (None = undecodable, counted wrong).
pub fn rates_from_answers(answers: &[Option<bool>], present: &[bool]) -> DetectionRates {
    assert_eq!(answers.len(), present.len(), "one answer per frame");
    let (mut tp, mut tn, mut np, mut nn, mut und) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (&ans, &p) in answers.iter().zip(present) {
        if p {
            np += 1;
            if ans == Some(true) {
                tp += 1;
            }
        } else {
            nn += 1;
            if ans == Some(false) {
                tn += 1;
            }
        }
        if ans.is_none() {
            und += 1;
        }
    }
    DetectionRates {
        tpr: if np > 0 { tp as f64 / np as f64 } else { f64::NAN },
        tnr: if nn > 0 { tn as f64 / nn as f64 } else { f64::NAN },
        present_frames: np,
        absent_frames: nn,
        undecodable: und,
    }
}

/// Decode an answer for every frame of the set with the given prompt.
pub fn decode_answers(
    model: &VlmModel,
    prompt: &crate::repr::PromptSpec,
    target: &str,
    set: &LabeledClipSet,
) -> Result<Vec<Option<bool>>> {
    let vocab = Vocab::new();
    let tokens = prompt.tokens(&vocab, target)?;
    let n_dec = prompt.decode.tokens.max(1);
    let fast = FastVlm::new(model);
    let mut answers = Vec::new();
    for frame in set.frames() {
        let mut st = fast.run_prefix(&frame.window, WINDOW, &tokens)?;
        let decoded = fast.greedy_decode(&mut st, n_dec);
        answers.push(answer_from_decoded(&decoded, &vocab));
    }
    Ok(answers)
}

/// TPR over present-labeled frames and TNR over absent-labeled frames.
pub fn detection_rates(
    model: &VlmModel,
    prompt: &crate::repr::PromptSpec,
    target: &str,
    set: &LabeledClipSet,
) -> Result<DetectionRates> {
    let answers = decode_answers(model, prompt, target, set)?;
    let present: Vec<bool> = set.frames().map(|f| f.present).collect();
    Ok(rates_from_answers(&answers, &present))
}

// ---------------------------------------------------------------------------
// Linear position probe
// ---------------------------------------------------------------------------

/// Mean over the decoded-segment rows of a packet, if any.
pub fn decoded_token_mean(packet: &ReprPacket) -> Option<Vec<f32>> {
    segment_mean(packet, Some(SegLabel::Decoded))
}

/// Mean over all unmasked rows of a packet.
pub fn tokenwise_mean(packet: &ReprPacket) -> Vec<f32> {
    segment_mean(packet, None).expect("packets have at least one unmasked row")
}

fn segment_mean(packet: &ReprPacket, seg: Option<SegLabel>) -> Option<Vec<f32>> {
    let d = packet.d;
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for t in 0..packet.t {
        if !packet.mask[t] {
            continue;
        }
        if let Some(s) = seg {
            if packet.segments[t] != s {
                continue;
            }
        }
        for (a, &x) in acc.iter_mut().zip(&packet.embedding[t * d..(t + 1) * d]) {
            *a += x as f64;
        }
        n += 1;
    }
    if n == 0 {
        return None;
    }
    Some(acc.iter().map(|&a| (a / n as f64) as f32).collect())
}

pub const PROBE_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Every k-th shuffled sample is held out.
    pub holdout_every: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.1,
            holdout_every: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbePoint {
    pub epoch: usize,
    pub train_acc: f64,
    pub holdout_acc: f64,
}

/// Linear softmax classifier over left/middle/right — no hidden layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeModel {
    pub d: usize,
    /// Row-major 3 x d.
    pub w: Vec<f64>,
    pub b: [f64; PROBE_CLASSES],
    pub curve: Vec<ProbePoint>,
}

impl ProbeModel {
    pub fn logits(&self, x: &[f32]) -> [f64; PROBE_CLASSES] {
        let mut out = self.b;
        for (c, o) in out.iter_mut().enumerate() {
            for (wi, &xi) in self.w[c * self.d..(c + 1) * self.d].iter().zip(x) {
                *o += wi * xi as f64;
            }
        }
        out
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        let l = self.logits(x);
        (0..PROBE_CLASSES)
            .max_by(|&a, &b| l[a].partial_cmp(&l[b]).unwrap())
            .unwrap()
    }

    pub fn final_holdout_accuracy(&self) -> f64 {
        self.curve.last().map(|p| p.holdout_acc).unwrap_or(f64::NAN)
    }
}

fn accuracy(model: &ProbeModel, xs: &[&Vec<f32>], ys: &[usize]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| model.predict(x) == y)
        .count();
    hits as f64 / xs.len() as f64
}

/// Full-batch gradient descent on softmax cross-entropy; deterministic per
/// seed (the seed only drives the train/holdout shuffle).
pub fn train_linear_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeModel> {
    if features.is_empty() {
        return Err(EvalError::Empty);
    }
    assert_eq!(features.len(), labels.len(), "one label per feature row");
    let d = features[0].len();
    for f in features {
        if f.len() != d {
            return Err(EvalError::DimensionMismatch { got: f.len(), want: d });
        }
    }
    let mut seen = [false; PROBE_CLASSES];
    for &y in labels {
        assert!(y < PROBE_CLASSES, "probe label {y} out of range");
        seen[y] = true;
    }
    let classes = seen.iter().filter(|&&s| s).count();
    if classes < PROBE_CLASSES {
        return Err(EvalError::TooFewClasses(classes));
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    RunRng::new(seed).stream("probe-split", 0).shuffle(&mut order);
    let every = cfg.holdout_every.max(2);
    let (mut train_x, mut train_y) = (Vec::new(), Vec::new());
    let (mut hold_x, mut hold_y) = (Vec::new(), Vec::new());
    for (rank, &i) in order.iter().enumerate() {
        if rank % every == every - 1 {
            hold_x.push(&features[i]);
            hold_y.push(labels[i]);
        } else {
            train_x.push(&features[i]);
            train_y.push(labels[i]);
        }
    }

    let mut model = ProbeModel {
        d,
        w: vec![0.0; PROBE_CLASSES * d],
        b: [0.0; PROBE_CLASSES],
        curve: Vec::with_capacity(cfg.epochs),
    };
    let n = train_x.len() as f64;
    for epoch in 0..cfg.epochs {
        let mut gw = vec![0.0f64; PROBE_CLASSES * d];
        let mut gb = [0.0f64; PROBE_CLASSES];
        for (x, &y) in train_x.iter().zip(&train_y) {
            let l = model.logits(x);
            let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = l.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..PROBE_CLASSES {
                let err = exps[c] / z - if c == y { 1.0 } else { 0.0 };
                gb[c] += err;
                for (g, &xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x.iter()) {
                    *g += err * xi as f64;
                }
            }
        }
        for (wv, g) in model.w.iter_mut().zip(&gw) {
            *wv -= cfg.lr * g / n;
        }
        for (bv, g) in model.b.iter_mut().zip(&gb) {
            *bv -= cfg.lr * g / n;
        }
        model.curve.push(ProbePoint {
            epoch,
            train_acc: accuracy(&model, &train_x, &train_y),
            holdout_acc: accuracy(&model, &hold_x, &hold_y),
        });
    }
    Ok(model)
}

/// Probe curve as CSV (epoch, train accuracy, holdout accuracy).
pub fn probe_curve_csv(model: &ProbeModel) -> String {
    let mut s = String::from("epoch,train_acc,holdout_acc\n");
    for p in &model.curve {
        s.push_str(&format!("{},{:.6},{:.6}\n", p.epoch, p.train_acc, p.holdout_acc));
    }
    s
}

// ---------------------------------------------------------------------------
// PCA scatter, bimodality, value coloring
// ---------------------------------------------------------------------------

/// Per-point tags carried through analysis exports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointTag {
    /// Functional action (attack/use) vs movement.
    pub functional: bool,
    /// Expert received > 0.1 reward on this transition.
    pub rewarded: bool,
    /// Extracted yes/no from the decoded tokens, if decodable.
    pub decoded_yes: Option<bool>,
    /// Room word for navhome points; None renders as "unlabeled".
    pub room: Option<String>,
    /// Expert Monte Carlo return from this state, when available.
    pub value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ScatterPoint {
    /// Token-wise mean embedding of the observation.
    pub features: Vec<f32>,
    pub tag: PointTag,
}

/// Paired data CSV and rendered SVG.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisExport {
    pub csv: String,
    pub svg: String,
}

impl AnalysisExport {
    pub fn write(&self, csv_path: &Path, svg_path: &Path) -> Result<()> {
        std::fs::File::create(csv_path)?.write_all(self.csv.as_bytes())?;
        std::fs::File::create(svg_path)?.write_all(self.svg.as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScatterResult {
    pub projection: PcaProjection,
    pub coords: Vec<[f32; 2]>,
    pub export: AnalysisExport,
}

fn tag_csv_row(id: usize, xy: [f32; 2], tag: &PointTag) -> String {
    format!(
        "{},{:.6},{:.6},{},{},{},{},{}\n",
        id,
        xy[0],
        xy[1],
        tag.functional as u8,
        tag.rewarded as u8,
        match tag.decoded_yes {
            Some(true) => "yes",
            Some(false) => "no",
            None => "",
        },
        tag.room.as_deref().unwrap_or("unlabeled"),
        tag.value.map(|v| format!("{v:.6}")).unwrap_or_default(),
    )
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const SVG_PAD: f64 = 40.0;

struct SvgFrame {
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
}

impl SvgFrame {
    fn fit(coords: &[[f32; 2]]) -> SvgFrame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for c in coords {
            x0 = x0.min(c[0] as f64);
            x1 = x1.max(c[0] as f64);
            y0 = y0.min(c[1] as f64);
            y1 = y1.max(c[1] as f64);
        }
        let sx = (SVG_W - 2.0 * SVG_PAD) / (x1 - x0).max(1e-9);
        let sy = (SVG_H - 2.0 * SVG_PAD) / (y1 - y0).max(1e-9);
        SvgFrame { x0, y0, sx, sy }
    }

    fn map(&self, c: [f32; 2]) -> (f64, f64) {
        (
            SVG_PAD + (c[0] as f64 - self.x0) * self.sx,
            // SVG y grows downward; flip so larger pc2 plots higher.
            SVG_H - SVG_PAD - (c[1] as f64 - self.y0) * self.sy,
        )
    }
}

fn svg_open() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    )
}

/// Linear blue-to-red color scale over [lo, hi].
pub fn value_color(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let r = (40.0 + 200.0 * t).round() as u8;
    let g = 60u8;
    let b = (240.0 - 200.0 * t).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn tag_color(tag: &PointTag) -> &'static str {
    match (tag.decoded_yes, tag.rewarded && tag.functional) {
        (_, true) => "#d62728",          // rewarded functional transitions
        (Some(true), _) => "#1f77b4",    // decoded yes
        (Some(false), _) => "#2ca02c",   // decoded no
        (None, _) => "#7f7f7f",          // no decode
    }
}

/// 2-D PCA of per-observation token-wise means with tagged CSV + SVG export.
pub fn pca_scatter(points: &[ScatterPoint], seed: u64) -> Result<ScatterResult> {
    if points.is_empty() {
        return Err(EvalError::Empty);
    }
    let d = points[0].features.len();
    for p in points {
        if p.features.len() != d {
            return Err(EvalError::DimensionMismatch { got: p.features.len(), want: d });
        }
    }
    let rows: Vec<f32> = points.iter().flat_map(|p| p.features.iter().copied()).collect();
    let projection = fit_projection(&rows, points.len(), d, 2, seed)?;
    let flat = projection.project_rows(&rows, points.len())?;
    let coords: Vec<[f32; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();

    let mut csv = String::from("id,pc1,pc2,functional,rewarded,decoded,room,value\n");
    for (i, (xy, p)) in coords.iter().zip(points).enumerate() {
        csv.push_str(&tag_csv_row(i, *xy, &p.tag));
    }

    let frame = SvgFrame::fit(&coords);
    let mut svg = svg_open();
    for (xy, p) in coords.iter().zip(points) {
        let (x, y) = frame.map(*xy);
        let shape = if p.tag.functional { "rect" } else { "circle" };
        let color = tag_color(&p.tag);
        if p.tag.functional {
            svg.push_str(&format!(
                "<{shape} x=\"{:.2}\" y=\"{:.2}\" width=\"6\" height=\"6\" fill=\"{color}\"/>\n",
                x - 3.0,
                y - 3.0
            ));
        } else {
            svg.push_str(&format!(
                "<{shape} cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");

    Ok(ScatterResult {
        projection,
        coords,
        export: AnalysisExport { csv, svg },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BimodalityScore {
    /// Fraction of points whose cluster's majority decode label matches
    /// their own.
    pub purity: f64,
    /// Fraction of reward>0.1 functional-action points assigned to the
    /// majority-"yes" cluster; NaN when no such points exist.
    pub rewarded_yes_fraction: f64,
}

/// 2-means on the 2-D projection, initialized from the extreme points on PC1
/// (deterministic; no random restarts).
pub fn bimodality_score(
    coords: &[[f32; 2]],
    decoded_yes: &[bool],
    rewarded_functional: &[bool],
) -> Result<BimodalityScore> {
    assert_eq!(coords.len(), decoded_yes.len(), "one decode label per point");
    assert_eq!(coords.len(), rewarded_functional.len(), "one reward flag per point");
    if coords.is_empty() {
        return Err(EvalError::Empty);
    }
    let yes_count = decoded_yes.iter().filter(|&&y| y).count();
    if yes_count == 0 || yes_count == decoded_yes.len() {
        return Err(EvalError::SingleLabel);
    }

    let lo = (0..coords.len()).min_by(|&a, &b| coords[a][0].partial_cmp(&coords[b][0]).unwrap()).unwrap();
    let hi = (0..coords.len()).max_by(|&a, &b| coords[a][0].partial_cmp(&coords[b][0]).unwrap()).unwrap();
    let mut centers = [
        [coords[lo][0] as f64, coords[lo][1] as f64],
        [coords[hi][0] as f64, coords[hi][1] as f64],
    ];
    let mut assign = vec![0usize; coords.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, c) in coords.iter().enumerate() {
            let d0 = (c[0] as f64 - centers[0][0]).powi(2) + (c[1] as f64 - centers[0][1]).powi(2);
            let d1 = (c[0] as f64 - centers[1][0]).powi(2) + (c[1] as f64 - centers[1][1]).powi(2);
            let k = usize::from(d1 < d0);
            if assign[i] != k {
                assign[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for k in 0..2 {
            let members: Vec<&[f32; 2]> = coords
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == k)
                .map(|(c, _)| c)
                .collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                centers[k] = [
                    members.iter().map(|c| c[0] as f64).sum::<f64>() / n,
                    members.iter().map(|c| c[1] as f64).sum::<f64>() / n,
                ];
            }
        }
    }

    // Majority decode label per cluster; ties resolve to yes.
    let mut yes_in = [0usize; 2];
    let mut size = [0usize; 2];
    for (&a, &y) in assign.iter().zip(decoded_yes) {
        size[a] += 1;
        if y {
            yes_in[a] += 1;
        }
    }
    let majority_yes = [
        size[0] > 0 && 2 * yes_in[0] >= size[0],
        size[1] > 0 && 2 * yes_in[1] >= size[1],
    ];
    let hits = assign
        .iter()
        .zip(decoded_yes)
        .filter(|(&a, &y)| y == majority_yes[a])
        .count();
    let purity = hits as f64 / coords.len() as f64;

    // The yes-cluster: the one with the higher yes fraction.
    let frac = |k: usize| {
        if size[k] == 0 {
            -1.0
        } else {
            yes_in[k] as f64 / size[k] as f64
        }
    };
    let yes_cluster = usize::from(frac(1) > frac(0));
    let rf_total = rewarded_functional.iter().filter(|&&r| r).count();
    let rewarded_yes_fraction = if rf_total == 0 {
        f64::NAN
    } else {
        let inside = assign
            .iter()
            .zip(rewarded_functional)
            .filter(|(&a, &r)| r && a == yes_cluster)
            .count();
        inside as f64 / rf_total as f64
    };
    Ok(BimodalityScore {
        purity,
        rewarded_yes_fraction,
    })
}

/// Axis-aligned mean +/- std box for one room label on the projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomBox {
    pub room: String,
    pub n: usize,
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
}

#[derive(Debug, Clone)]
pub struct ValueColoring {
    pub boxes: Vec<RoomBox>,
    pub export: AnalysisExport,
}

/// Scatter colored by expert value with per-room mean +/- std boxes. Points
/// without a room tag fall into the "unlabeled" group.
pub fn value_coloring(coords: &[[f32; 2]], tags: &[PointTag]) -> Result<ValueColoring> {
    assert_eq!(coords.len(), tags.len(), "one tag per point");
    if coords.is_empty() {
        return Err(EvalError::Empty);
    }
    if tags.iter().any(|t| t.value.is_none()) {
        return Err(EvalError::MissingValue);
    }
    let values: Vec<f64> = tags.iter().map(|t| t.value.unwrap()).collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));

    // Group by room label, "unlabeled" last, others alphabetical.
    let mut rooms: Vec<&str> = tags
        .iter()
        .map(|t| t.room.as_deref().unwrap_or("unlabeled"))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    rooms.sort_by_key(|&r| (r == "unlabeled", r));
    let mut boxes = Vec::new();
    for room in rooms {
        let members: Vec<[f32; 2]> = coords
            .iter()
            .zip(tags)
            .filter(|(_, t)| t.room.as_deref().unwrap_or("unlabeled") == room)
            .map(|(c, _)| *c)
            .collect();
        let n = members.len() as f64;
        let cx = members.iter().map(|c| c[0] as f64).sum::<f64>() / n;
        let cy = members.iter().map(|c| c[1] as f64).sum::<f64>() / n;
        let var = |f: &dyn Fn(&[f32; 2]) -> f64, mean: f64| {
            members.iter().map(|c| (f(c) - mean).powi(2)).sum::<f64>() / n
        };
        boxes.push(RoomBox {
            room: room.to_string(),
            n: members.len(),
            cx,
            cy,
            sx: var(&|c| c[0] as f64, cx).sqrt(),
            sy: var(&|c| c[1] as f64, cy).sqrt(),
        });
    }

    let mut csv = String::from("id,pc1,pc2,functional,rewarded,decoded,room,value\n");
    for (i, (xy, t)) in coords.iter().zip(tags).enumerate() {
        csv.push_str(&tag_csv_row(i, *xy, t));
    }
    csv.push_str("room,n,cx,cy,sx,sy\n");
    for b in &boxes {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            b.room, b.n, b.cx, b.cy, b.sx, b.sy
        ));
    }

    let frame = SvgFrame::fit(coords);
    let mut svg = svg_open();
    for b in &boxes {
        let (x0, y0) = frame.map([(b.cx - b.sx) as f32, (b.cy + b.sy) as f32]);
        let (x1, y1) = frame.map([(b.cx + b.sx) as f32, (b.cy - b.sy) as f32]);
        svg.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"none\" stroke=\"black\"/>\n<text x=\"{x0:.2}\" y=\"{:.2}\" \
             font-size=\"10\">{}</text>\n",
            (x1 - x0).max(1.0),
            (y1 - y0).max(1.0),
            y0 - 2.0,
            b.room
        ));
    }
    for (xy, &v) in coords.iter().zip(&values) {
        let (x, y) = frame.map(*xy);
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\"/>\n",
            value_color(v, lo, hi)
        ));
    }
    svg.push_str("</svg>\n");

    Ok(ValueColoring {
        boxes,
        export: AnalysisExport { csv, svg },
    })
}
