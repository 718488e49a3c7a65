//! Acceptance suite: one test per release criterion, each printing a single
//! pass/fail line. Criteria 1-5, 10, and 11 are verified by direct
//! computation against independent oracles; criteria 6-9 audit the committed
//! experiment artifacts under runs/ and recompute every aggregate from the
//! per-seed raw files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::Value;

use pr2l_core::evalkit::{
    answer_from_decoded, bimodality_score, collect_labeled_clips, decoded_token_mean,
    detection_rates, pca_scatter, tokenwise_mean, train_linear_probe, PointTag, ProbeConfig,
    ScatterPoint,
};
use pr2l_core::gridcraft::{
    self, compute_reward, GridObservation, TargetPosition, TaskSpec, NUM_ACTIONS, WINDOW,
};
use pr2l_core::learners::cql::{cql_sample_graph, CQLConfig};
use pr2l_core::learners::ppo::{ppo_minibatch_graph, MbSample, PPOConfig};
use pr2l_core::learners::{bc_loss_graph, compute_gae, iqm};
use pr2l_core::navhome::{
    generate_layout, generate_offline_dataset, geodesic_distance, random_branch, spl, Furniture,
    FurnitureClass, GoalClass, HouseLayout, RoomType, ACTION_FORWARD, ACTION_STOP,
    ACTION_TURN_LEFT, ACTION_TURN_RIGHT, NAV_ACTIONS,
};
use pr2l_core::policy::{build_forward, NodeMap, Policy, PolicyConfig};
use pr2l_core::repr::pca::fit_projection;
use pr2l_core::repr::{average_pool_2d, make_condition, EnvFamily, Extractor, MergeMode, ReprPacket, SegLabel};
use pr2l_core::rng::RunRng;
use pr2l_core::tensor::gradcheck::grad_check;
use pr2l_core::tensor::{NodeId, Tape};
use pr2l_core::vlm::graph::answer_loss;
use pr2l_core::vlm::vocab::{Vocab, END};
use pr2l_core::vlm::{SeqSpec, VlmConfig, VlmModel};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn runs(sub: &str) -> PathBuf {
    repo_root().join("runs").join(sub)
}

fn read_json(path: &Path) -> Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("missing artifact {}: {e}; run the experiment pipeline first", path.display()));
    serde_json::from_str(&text).unwrap()
}

// ===========================================================================
// Criterion 1: gradient correctness of every primitive and all loss graphs
// ===========================================================================

fn rand_data(shape: &[usize], seed: u64, scale: f64, offset: f64) -> (Vec<usize>, Vec<f64>) {
    let mut rng = RunRng::new(seed).stream("gradcheck-data", 0);
    let n: usize = shape.iter().product();
    (
        shape.to_vec(),
        (0..n).map(|_| rng.normal() * scale + offset).collect(),
    )
}

fn check_unary(name: &str, f: impl Fn(&mut Tape<f64>, NodeId) -> pr2l_core::tensor::Result<NodeId>, offset: f64) {
    let input = rand_data(&[3, 4], 11, 0.5, offset);
    let r = grad_check(
        |tape, ids| {
            let y = f(tape, ids[0])?;
            tape.sum(y)
        },
        &[input],
        1e-5,
        1e-4,
        None,
    )
    .unwrap();
    assert!(r.pass, "primitive {name} failed grad check: {r:?}");
}

fn check_binary(name: &str, f: impl Fn(&mut Tape<f64>, NodeId, NodeId) -> pr2l_core::tensor::Result<NodeId>, shapes: (&[usize], &[usize])) {
    let a = rand_data(shapes.0, 21, 0.7, 0.1);
    let b = rand_data(shapes.1, 22, 0.7, 0.9);
    let r = grad_check(
        |tape, ids| {
            let y = f(tape, ids[0], ids[1])?;
            tape.sum(y)
        },
        &[a, b],
        1e-5,
        1e-4,
        None,
    )
    .unwrap();
    assert!(r.pass, "primitive {name} failed grad check: {r:?}");
}

fn test_packet(t: usize, d: usize, seed: u64) -> ReprPacket {
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

fn tiny_policy(quantiles: Option<usize>) -> Policy {
    let mut c = PolicyConfig::new(6, 2, 4);
    c.projection = 8;
    c.heads = 2;
    c.ff = 10;
    c.mlp_hidden = 6;
    c.dropout = 0.0;
    if let Some(q) = quantiles {
        c = c.with_quantiles(q);
    }
    Policy::init(c, 17)
}

fn policy_inputs(policy: &Policy) -> (Vec<(Vec<usize>, Vec<f64>)>, Vec<String>) {
    let inputs = policy
        .params
        .0
        .values()
        .map(|p| (p.shape.clone(), p.data.iter().map(|&x| x as f64).collect()))
        .collect();
    let names = policy.params.0.keys().cloned().collect();
    (inputs, names)
}

fn check_loss_graph<F>(name: &str, policy: &Policy, build: F)
where
    F: Fn(&mut Tape<f64>, &NodeMap, &PolicyConfig) -> pr2l_core::tensor::Result<NodeId>,
{
    let (inputs, names) = policy_inputs(policy);
    let pcfg = policy.config.clone();
    let r = grad_check(
        |tape, ids| {
            let nodes: NodeMap = names.iter().cloned().zip(ids.iter().copied()).collect();
            build(tape, &nodes, &pcfg)
        },
        &inputs,
        1e-5,
        1e-4,
        Some(7),
    )
    .unwrap();
    assert!(r.pass, "{name} loss grad check failed: {r:?}");
}

#[test]
fn criterion_01_gradient_checks_primitives_and_loss_graphs() {
    let t0 = Instant::now();

    // Elementwise and reduction primitives.
    check_unary("exp", |t, a| t.exp(a), 0.0);
    check_unary("ln", |t, a| t.ln(a), 2.0);
    check_unary("tanh", |t, a| t.tanh(a), 0.0);
    check_unary("relu", |t, a| t.relu(a), 1.5);
    check_unary("gelu", |t, a| t.gelu(a), 0.0);
    check_unary("huber", |t, a| t.huber(a, 1.0), 0.3);
    check_unary("clamp", |t, a| t.clamp(a, -10.0, 10.0), 0.0);
    check_unary("scale", |t, a| t.scale(a, -1.7), 0.0);
    check_unary("add_const", |t, a| t.add_const(a, 0.9), 0.0);
    check_unary("softmax_last", |t, a| t.softmax_last(a), 0.0);
    check_unary("log_softmax_last", |t, a| t.log_softmax_last(a), 0.0);
    check_unary("logsumexp_last", |t, a| t.logsumexp_last(a), 0.0);
    check_unary("layer_norm_last", |t, a| t.layer_norm_last(a, 1e-5), 0.2);
    check_unary("transpose", |t, a| t.transpose(a), 0.0);
    check_unary("reshape", |t, a| t.reshape(a, vec![4, 3]), 0.0);
    check_unary("mean", |t, a| t.mean(a), 0.0);
    check_unary("mean_axis0", |t, a| t.mean_axis0(a), 0.0);
    check_unary("sum_last", |t, a| t.sum_last(a), 0.0);
    check_unary("slice_rows", |t, a| t.slice_rows(a, 1, 3), 0.0);
    check_unary("slice_cols", |t, a| t.slice_cols(a, 0, 2), 0.0);
    check_unary("gather_rows", |t, a| t.gather_rows(a, &[0, 3, 1]), 0.0);
    check_unary(
        "masked_fill",
        |t, a| {
            t.masked_fill(
                a,
                &[true, false, true, false, true, false, true, false, true, false, true, false],
                0.5,
            )
        },
        0.0,
    );
    check_unary("sum", |t, a| t.sum(a), 0.0);

    check_binary("matmul", |t, a, b| t.matmul(a, b), (&[3, 4], &[4, 2]));
    check_binary("add", |t, a, b| t.add(a, b), (&[3, 4], &[3, 4]));
    check_binary("sub", |t, a, b| t.sub(a, b), (&[3, 4], &[3, 4]));
    check_binary("mul", |t, a, b| t.mul(a, b), (&[3, 4], &[3, 4]));
    check_binary("div", |t, a, b| t.div(a, b), (&[3, 4], &[3, 4]));
    check_binary("min", |t, a, b| t.min(a, b), (&[3, 4], &[3, 4]));
    check_binary("add_bias", |t, a, b| t.add_bias(a, b), (&[3, 4], &[4]));
    check_binary("mul_bias", |t, a, b| t.mul_bias(a, b), (&[3, 4], &[4]));
    check_binary(
        "concat_rows",
        |t, a, b| t.concat_rows(&[a, b]),
        (&[2, 4], &[3, 4]),
    );

    // Embedding lookup: gradient w.r.t. the table.
    {
        let table = rand_data(&[7, 5], 31, 0.6, 0.0);
        let r = grad_check(
            |tape, ids| {
                let e = tape.embedding(ids[0], &[0, 3, 3, 6])?;
                tape.sum(e)
            },
            &[table],
            1e-5,
            1e-4,
            None,
        )
        .unwrap();
        assert!(r.pass, "primitive embedding failed grad check: {r:?}");
    }

    // Full VLM answer-loss graph through all transformer parameters.
    {
        let cfg = VlmConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            ff: 16,
            max_seq: 64,
            dropout: 0.0,
            prefix_attention: true,
            vocab_size: Vocab::new().len(),
        };
        let model = VlmModel::init(cfg.clone(), 7);
        let v = Vocab::new();
        let seq = SeqSpec {
            image_glyphs: vec![0, 1, 10, 11, 0, 2, 13, 0, 3],
            grid: 3,
            prompt: v.encode("is there a spider").unwrap(),
            decoded: v.encode("yes").unwrap(),
        };
        let mut targets = v.encode("yes").unwrap();
        targets.push(END);
        let inputs: Vec<(Vec<usize>, Vec<f64>)> = model
            .params
            .0
            .values()
            .map(|p| (p.shape.clone(), p.data.iter().map(|&x| x as f64).collect()))
            .collect();
        let names: Vec<String> = model.params.0.keys().cloned().collect();
        let r = grad_check(
            |tape, ids| {
                let nodes: BTreeMap<String, NodeId> =
                    names.iter().cloned().zip(ids.iter().copied()).collect();
                answer_loss(tape, &nodes, &cfg, &seq, &targets)
                    .map_err(|e| pr2l_core::tensor::TensorError::Invalid(e.to_string()))
            },
            &inputs,
            1e-5,
            1e-4,
            Some(6),
        )
        .unwrap();
        assert!(r.pass, "vlm loss grad check failed: {r:?}");
    }

    // Full PPO minibatch loss through all policy parameters.
    {
        let policy = tiny_policy(None);
        let cfg = PPOConfig::default();
        let pkts: Vec<ReprPacket> = (0..3).map(|i| test_packet(4, 6, 100 + i)).collect();
        let proprios = [vec![0.1f32, -0.2], vec![0.0, 0.3], vec![0.4, 0.4]];
        let meta = [
            (0usize, -1.2f64, 0.8f64, 0.5f64),
            (2, -1.6, -0.4, -0.2),
            (1, -1.0, 1.3, 0.9),
        ];
        check_loss_graph("ppo", &policy, |tape, nodes, pcfg| {
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
            let mb = ppo_minibatch_graph(tape, nodes, pcfg, &samples, &cfg)
                .map_err(|e| pr2l_core::tensor::TensorError::Invalid(e.to_string()))?;
            Ok(mb.loss)
        });
    }

    // Weighted BC loss over stacked per-step policy logits.
    {
        let policy = tiny_policy(None);
        let pkts: Vec<ReprPacket> = (0..3).map(|i| test_packet(4, 6, 200 + i)).collect();
        let proprios = [vec![0.3f32, 0.1], vec![-0.2, 0.5], vec![0.0, -0.4]];
        let actions = [1usize, 3, 0];
        let weights = [1.0, 2.0, 1.5];
        check_loss_graph("bc", &policy, |tape, nodes, pcfg| {
            let mut rows = Vec::new();
            for (pkt, pr) in pkts.iter().zip(&proprios) {
                let emb: Vec<f64> = pkt.embedding.iter().map(|&x| x as f64).collect();
                let tokens = tape.input(vec![pkt.t, pkt.d], emb, false);
                let prn = tape.input(vec![1, 2], pr.iter().map(|&x| x as f64).collect(), false);
                let heads = build_forward(tape, nodes, pcfg, tokens, &pkt.mask, prn, None)
                    .map_err(|e| pr2l_core::tensor::TensorError::Invalid(e.to_string()))?;
                rows.push(heads.output);
            }
            let logits = tape.concat_rows(&rows)?;
            bc_loss_graph(tape, logits, &actions, &weights)
        });
    }

    // Full CQL sample loss (quantile TD + conservative penalty).
    {
        let policy = tiny_policy(Some(5));
        let mut cfg = CQLConfig::default();
        cfg.quantiles = 5;
        let pkt = test_packet(4, 6, 77);
        let target = [0.4, -0.3, 0.8, 0.1, 0.6];
        let emb: Vec<f64> = pkt.embedding.iter().map(|&x| x as f64).collect();
        let mask = pkt.mask.clone();
        check_loss_graph("cql", &policy, |tape, nodes, pcfg| {
            let tokens = tape.input(vec![4, 6], emb.clone(), false);
            let pr = tape.input(vec![1, 2], vec![0.1, -0.1], false);
            let heads = build_forward(tape, nodes, pcfg, tokens, &mask, pr, None)
                .map_err(|e| pr2l_core::tensor::TensorError::Invalid(e.to_string()))?;
            cql_sample_graph(tape, heads.output, 2, &target, &cfg)
        });
    }

    let elapsed = t0.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "gradient suite took {elapsed:?}, budget is 2 minutes"
    );
}

// ===========================================================================
// Criterion 2: exact oracle equivalences
// ===========================================================================

/// Brute-force GAE oracle: direct double sum over TD residuals with
/// episode-boundary cuts.
fn gae_brute_force(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next_v = if dones[t] {
            0.0
        } else if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap
        };
        rewards[t] + gamma * next_v - values[t]
    };
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                acc += w * delta(l);
                if dones[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            acc
        })
        .collect()
}

/// 2x2 Jacobi rotations on the dense covariance matrix: the PCA oracle.
fn jacobi_eigen(mut m: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += m[p * d + q] * m[p * d + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = 0.5 * (aqq - app).atan2(2.0 * apq) * -1.0;
                // Standard Jacobi angle: tan(2θ) = 2apq / (app - aqq).
                let phi = 0.5 * (2.0 * apq).atan2(app - aqq);
                let _ = theta;
                let (s, c) = phi.sin_cos();
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp + s * mkq;
                    m[k * d + q] = -s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk + s * mqk;
                    m[q * d + k] = -s * mpk + c * mqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp + s * vkq;
                    v[k * d + q] = -s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    (eigvals, v)
}

#[test]
fn criterion_02_oracle_equivalences() {
    let mut rng = RunRng::new(3).stream("oracle", 0);

    // GAE vs brute-force discounted sums on 50-step random episodes.
    for case in 0..20 {
        let n = 50;
        let rewards: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.1)).collect();
        let bootstrap = rng.normal();
        let (gamma, lambda) = (0.99, 0.95);
        let (adv, returns) =
            compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda).unwrap();
        let oracle = gae_brute_force(&rewards, &values, &dones, bootstrap, gamma, lambda);
        for t in 0..n {
            assert!(
                (adv[t] - oracle[t]).abs() < 1e-10,
                "gae case {case} step {t}: {} vs {}",
                adv[t],
                oracle[t]
            );
            assert!((returns[t] - (oracle[t] + values[t])).abs() < 1e-10);
        }
    }

    // IQM vs independent sort-and-trim.
    for _ in 0..50 {
        let n = 4 + rng.below(20);
        let vals: Vec<f64> = (0..n).map(|_| rng.normal() * 10.0).collect();
        let (m, _) = iqm(&vals).unwrap();
        let mut s = vals.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let drop = n / 4;
        let mid = &s[drop..n - drop];
        let oracle = mid.iter().sum::<f64>() / mid.len() as f64;
        assert!((m - oracle).abs() < 1e-12, "iqm {m} vs {oracle}");
    }

    // SPL vs the closed formula.
    for _ in 0..100 {
        let l = 1.0 + rng.below(30) as f64;
        let p = 1.0 + rng.below(40) as f64;
        assert_eq!(spl(p, l), l / l.max(p));
    }

    // Gridcraft step rewards vs the independent reward replay over 1000
    // random transitions.
    let task = TaskSpec::by_name("combat_spider").unwrap();
    let mut checked = 0usize;
    let mut world_seed = 0u64;
    let mut state = gridcraft::create_world(&task, world_seed).unwrap();
    while checked < 1000 {
        if state.done {
            world_seed += 1;
            state = gridcraft::create_world(&task, world_seed).unwrap();
        }
        let action = rng.below(NUM_ACTIONS);
        let prev = state.clone();
        let (_, reward, _, _) = gridcraft::step(&mut state, action).unwrap();
        let oracle = compute_reward(&prev, action, &state);
        assert!(
            (reward - oracle).abs() < 1e-12,
            "transition {checked}: step reward {reward} vs oracle {oracle}"
        );
        checked += 1;
    }

    // Geodesic distance vs Floyd-Warshall on a hand-built 12x12 layout with
    // a ring wall and a single doorway.
    {
        let size = 12;
        let mut walls = vec![false; size * size];
        for i in 0..size {
            walls[i] = true;
            walls[(size - 1) * size + i] = true;
            walls[i * size] = true;
            walls[i * size + size - 1] = true;
        }
        for y in 1..size - 1 {
            if y != 4 {
                walls[y * size + 6] = true;
            }
        }
        let l = HouseLayout {
            seed: 0,
            size,
            walls,
            room_of: vec![0; size * size],
            room_types: vec![RoomType::Hallway],
            furniture: vec![Furniture {
                class: FurnitureClass::Toilet,
                x: 9,
                y: 8,
            }],
            start_cells: vec![],
        };
        let cells: Vec<(i32, i32)> = (0..size as i32)
            .flat_map(|y| (0..size as i32).map(move |x| (x, y)))
            .filter(|&(x, y)| l.is_floor(x, y) || l.furniture_at(x, y).is_some())
            .collect();
        let n = cells.len();
        let idx = |x: i32, y: i32| cells.iter().position(|&c| c == (x, y)).unwrap();
        const INF: u32 = u32::MAX / 4;
        let mut d = vec![INF; n * n];
        for i in 0..n {
            d[i * n + i] = 0;
        }
        for (i, &(x, y)) in cells.iter().enumerate() {
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if !l.in_bounds(nx, ny) || l.is_wall(nx, ny) {
                    continue;
                }
                let j = idx(nx, ny);
                let fi = l.is_floor(x, y);
                let fj = l.is_floor(nx, ny);
                if (fi && fj) || (!fi ^ !fj) {
                    d[i * n + j] = 1;
                    d[j * n + i] = 1;
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i * n + k].saturating_add(d[k * n + j]);
                    if via < d[i * n + j] {
                        d[i * n + j] = via;
                    }
                }
            }
        }
        let gi = idx(9, 8);
        for (i, &(x, y)) in cells.iter().enumerate() {
            if !l.is_floor(x, y) {
                continue;
            }
            let expect = d[i * n + gi];
            let got = geodesic_distance(&l, (x, y), GoalClass::Toilet);
            if expect >= INF {
                assert_eq!(got, None, "cell ({x},{y})");
            } else {
                assert_eq!(got, Some(expect), "cell ({x},{y})");
            }
        }
    }

    // average_pool_2d vs independent block means.
    {
        let (grid, d, kernel) = (8, 3, 4);
        let rows: Vec<f32> = (0..grid * grid * d).map(|_| rng.normal() as f32).collect();
        let pooled = average_pool_2d(&rows, grid, d, kernel).unwrap();
        let out_grid = grid / kernel;
        for br in 0..out_grid {
            for bc in 0..out_grid {
                for k in 0..d {
                    let mut acc = 0.0f64;
                    for ir in 0..kernel {
                        for ic in 0..kernel {
                            acc += rows[((br * kernel + ir) * grid + (bc * kernel + ic)) * d + k]
                                as f64;
                        }
                    }
                    let oracle = acc / (kernel * kernel) as f64;
                    let got = pooled[(br * out_grid + bc) * d + k] as f64;
                    assert!((got - oracle).abs() < 1e-6, "pool block ({br},{bc}) dim {k}");
                }
            }
        }
    }

    // PCA components vs dense Jacobi eigenvectors (up to sign).
    {
        let (n, d, k) = (60, 6, 3);
        let rows: Vec<f32> = (0..n * d)
            .map(|i| {
                let base = (i % d) as f64;
                (rng.normal() * (1.0 + base) + base) as f32
            })
            .collect();
        let proj = fit_projection(&rows, n, d, k, 0).unwrap();
        // Dense covariance.
        let mut mean = vec![0.0f64; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += rows[r * d + c] as f64 / n as f64;
            }
        }
        let mut cov = vec![0.0f64; d * d];
        for r in 0..n {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (rows[r * d + a] as f64 - mean[a])
                        * (rows[r * d + b] as f64 - mean[b])
                        / (n as f64 - 1.0);
                }
            }
        }
        let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let (eigvals, eigvecs) = jacobi_eigen(cov, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
        for comp in 0..k {
            let e = order[comp];
            // Cosine similarity up to sign must be 1 within 1e-4.
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for c in 0..d {
                let a = proj.components[comp * d + c] as f64;
                let b = eigvecs[c * d + e];
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            let cos = (dot / (na.sqrt() * nb.sqrt())).abs();
            assert!(cos > 1.0 - 1e-4, "pca component {comp}: |cos| = {cos}");
            let explained_oracle = eigvals[e] / total_var;
            assert!(
                (proj.explained[comp] as f64 - explained_oracle).abs() < 1e-4,
                "pca explained {comp}: {} vs {explained_oracle}",
                proj.explained[comp]
            );
        }
    }
}

// ===========================================================================
// Criterion 3: noisy-data generator statistics
// ===========================================================================

#[test]
fn criterion_03_noise_generator_statistics() {
    // Random-branch frequencies with a fixed expert movement: stop 10%, the
    // two non-expert movements 45% each, within +/- 1% over 1e5 draws.
    let n = 100_000usize;
    for expert in [ACTION_TURN_LEFT, ACTION_TURN_RIGHT, ACTION_FORWARD] {
        let mut rng = RunRng::new(9).stream("branch-freq", expert as u64);
        let mut counts = [0u64; NAV_ACTIONS];
        for _ in 0..n {
            counts[random_branch(expert, &mut rng)] += 1;
        }
        let stop = counts[ACTION_STOP] as f64 / n as f64;
        assert!((stop - 0.10).abs() < 0.01, "stop frequency {stop}");
        assert_eq!(counts[expert], 0, "expert action must never be drawn");
        for a in [ACTION_TURN_LEFT, ACTION_TURN_RIGHT, ACTION_FORWARD] {
            if a == expert {
                continue;
            }
            let f = counts[a] as f64 / n as f64;
            assert!((f - 0.45).abs() < 0.01, "movement {a} frequency {f}");
        }
    }

    // Injection points uniform on [0, 0.9]: one-sample KS < 0.02.
    let layouts: Vec<HouseLayout> = (0..2).map(|s| generate_layout(s, 16).unwrap()).collect();
    let (_, stats) = generate_offline_dataset(&layouts, 900, 13);
    let mut fracs = stats.inject_fracs.clone();
    assert!(fracs.len() >= 5000, "need a large sample, got {}", fracs.len());
    fracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = fracs.len() as f64;
    let mut ks = 0.0f64;
    for (i, &x) in fracs.iter().enumerate() {
        assert!((0.0..=0.9).contains(&x), "inject frac {x} out of range");
        let cdf = x / 0.9;
        ks = ks
            .max((cdf - i as f64 / m).abs())
            .max(((i + 1) as f64 / m - cdf).abs());
    }
    assert!(ks < 0.02, "KS statistic vs uniform[0,0.9] = {ks}");
}

// ===========================================================================
// Criterion 4: toy VLM competence
// ===========================================================================

fn gridcraft_vlm() -> VlmModel {
    VlmModel::load(&runs("gridcraft").join("vlm.ckpt")).unwrap_or_else(|e| {
        panic!("missing pretrained VLM checkpoint (run the pipeline): {e}")
    })
}

fn presence_clips() -> pr2l_core::evalkit::LabeledClipSet {
    let task = TaskSpec::by_name("combat_spider").unwrap();
    collect_labeled_clips(&task, 120, 6, 11).unwrap()
}

#[test]
fn criterion_04_vlm_presence_accuracy_and_hint_gain() {
    // Held-out presence-question accuracy from the committed pretraining
    // report.
    let report = read_json(&runs("gridcraft").join("pretrain_report.json"));
    let presence = report["holdout"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["family"] == "presence")
        .expect("presence family in holdout report");
    let acc = presence["correct"].as_f64().unwrap() / presence["n"].as_f64().unwrap();
    assert!(acc >= 0.95, "presence holdout accuracy {acc:.4} < 0.95");

    // The auxiliary hint must lift the aliased target's TPR by >= 15 points
    // while keeping TNR >= 80%.
    let model = gridcraft_vlm();
    let set = presence_clips();
    let plain = make_condition("pr2l", EnvFamily::Gridcraft, "spider").unwrap();
    let hinted = make_condition("with_aux", EnvFamily::Gridcraft, "spider").unwrap();
    let r_plain = detection_rates(&model, &plain.prompt, "spider", &set).unwrap();
    let r_hint = detection_rates(&model, &hinted.prompt, "spider", &set).unwrap();
    let gain = r_hint.tpr - r_plain.tpr;
    assert!(
        gain >= 0.15,
        "hint TPR gain {gain:.4} < 0.15 (plain {:.4}, hinted {:.4})",
        r_plain.tpr,
        r_hint.tpr
    );
    assert!(r_hint.tnr >= 0.80, "hinted TNR {:.4} < 0.80", r_hint.tnr);
}

// ===========================================================================
// Criterion 5: linear position probes
// ===========================================================================

#[test]
fn criterion_05_position_probe_and_shuffled_control() {
    let model = gridcraft_vlm();
    let set = presence_clips();
    let frames: Vec<_> = set.frames().filter(|f| f.present).collect();
    let labels: Vec<usize> = frames
        .iter()
        .map(|f| match f.position {
            TargetPosition::Left => 0,
            TargetPosition::Middle => 1,
            TargetPosition::Right => 2,
            TargetPosition::Absent => unreachable!("present frame"),
        })
        .collect();
    let cfg = ProbeConfig::default();
    for name in ["pr2l", "with_aux", "changed_aux"] {
        let cond = make_condition(name, EnvFamily::Gridcraft, "spider").unwrap();
        let mut extractor = Extractor::new(&model, cond, 11).unwrap();
        let feats: Vec<Vec<f32>> = frames
            .iter()
            .map(|f| {
                let pkt = extractor.packet(&f.window, WINDOW, f.obs_hash).unwrap();
                decoded_token_mean(&pkt).expect("presence prompts decode tokens")
            })
            .collect();
        let probe = train_linear_probe(&feats, &labels, &cfg, 11).unwrap();
        let acc = probe.final_holdout_accuracy();
        assert!(acc >= 0.90, "probe for {name}: holdout accuracy {acc:.4} < 0.90");

        let mut shuffled = labels.clone();
        RunRng::new(11).stream("probe-shuffle", 0).shuffle(&mut shuffled);
        let control = train_linear_probe(&feats, &shuffled, &cfg, 11).unwrap();
        let ctrl = control.final_holdout_accuracy();
        assert!(
            (ctrl - 1.0 / 3.0).abs() <= 0.05,
            "shuffled control for {name}: {ctrl:.4} not within chance +/- 0.05"
        );
    }
}

// ===========================================================================
// Criteria 6-9: directional results from committed run artifacts
// ===========================================================================

/// Per-seed metric read back from the raw eval files of a condition run, so
/// the acceptance aggregate is recomputed rather than trusted.
fn per_seed_metric(dir: &Path, key: &str) -> Vec<f64> {
    let manifest = read_json(&dir.join("manifest.json"));
    manifest["seeds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            let seed = s["seed"].as_u64().unwrap();
            let eval = read_json(&dir.join(format!("seed-{seed}")).join("eval.json"));
            eval[key].as_f64().unwrap()
        })
        .collect()
}

fn aggregate_metric(values: &[f64]) -> f64 {
    if values.len() >= 4 {
        iqm(values).unwrap().0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[test]
fn criterion_06_ppo_pr2l_beats_image_encoder_and_random() {
    let base = runs("gridcraft").join("ppo");
    let pr2l = per_seed_metric(&base.join("cond-pr2l"), "final_eval_success_rate");
    let image = per_seed_metric(&base.join("cond-image_encoder"), "final_eval_success_rate");
    assert_eq!(pr2l.len(), 8, "pr2l must have 8 seeds");
    assert_eq!(image.len(), 8, "image_encoder must have 8 seeds");
    let random: Vec<f64> = per_seed_metric(&base.join("cond-pr2l"), "random_success_rate")
        .into_iter()
        .chain(per_seed_metric(&base.join("cond-image_encoder"), "random_success_rate"))
        .collect();
    let (iq_pr2l, _) = iqm(&pr2l).unwrap();
    let (iq_img, _) = iqm(&image).unwrap();
    let (iq_rand, _) = iqm(&random).unwrap();
    println!(
        "ppo IQM: pr2l {iq_pr2l:.4}, image_encoder {iq_img:.4}, random {iq_rand:.4}"
    );
    assert!(
        iq_pr2l >= 1.25 * iq_img,
        "pr2l IQM {iq_pr2l:.4} < 1.25 x image_encoder IQM {iq_img:.4}"
    );
    let floor = (3.0 * iq_rand).max(1e-9);
    assert!(iq_pr2l >= floor, "pr2l IQM {iq_pr2l:.4} < 3 x random {iq_rand:.4}");
    assert!(iq_img >= floor, "image_encoder IQM {iq_img:.4} < 3 x random {iq_rand:.4}");
}

#[test]
fn criterion_07_ablations_do_not_exceed_pr2l() {
    let base = runs("gridcraft").join("ppo");
    let pr2l = per_seed_metric(&base.join("cond-pr2l"), "final_eval_success_rate");
    let (iq_pr2l, _) = iqm(&pr2l).unwrap();
    for cond in ["no_prompt", "no_generation"] {
        let vals = per_seed_metric(&base.join(format!("cond-{cond}")), "final_eval_success_rate");
        assert_eq!(vals.len(), 8, "{cond} must have 8 seeds");
        let (iq, _) = iqm(&vals).unwrap();
        println!("ppo IQM: {cond} {iq:.4} vs pr2l {iq_pr2l:.4}");
        assert!(iq <= iq_pr2l + 1e-12, "{cond} IQM {iq:.4} exceeds pr2l {iq_pr2l:.4}");
    }
}

#[test]
fn criterion_08_bc_single_epoch_matches_data_policy() {
    let dir = runs("gridcraft").join("bc").join("cond-pr2l");
    let vals = per_seed_metric(&dir, "success_after_one_epoch");
    let agg = aggregate_metric(&vals);
    let summary = read_json(&dir.join("summary.json"));
    let data_rate = summary["data_policy_success_rate"].as_f64().unwrap();
    println!("bc epoch-1 success {agg:.4} vs data policy {data_rate:.4}");
    assert!(data_rate > 0.0, "expert data has zero success rate");
    assert!(
        agg >= 0.80 * data_rate,
        "bc epoch-1 success {agg:.4} < 80% of data policy {data_rate:.4}"
    );
}

#[test]
fn criterion_09_cql_directional_ordering() {
    let base = runs("navhome").join("cql");
    let pr2l = per_seed_metric(&base.join("cond-pr2l"), "final_eval_success_rate");
    let image = per_seed_metric(&base.join("cond-image_encoder"), "final_eval_success_rate");
    let rationale =
        per_seed_metric(&base.join("cond-pr2l_rationale"), "final_eval_success_rate");
    let random: Vec<f64> = per_seed_metric(&base.join("cond-pr2l"), "random_success_rate")
        .into_iter()
        .chain(per_seed_metric(&base.join("cond-image_encoder"), "random_success_rate"))
        .collect();
    let a_pr2l = aggregate_metric(&pr2l);
    let a_img = aggregate_metric(&image);
    let a_rat = aggregate_metric(&rationale);
    let a_rand = aggregate_metric(&random);
    println!(
        "cql success: pr2l {a_pr2l:.4}, rationale {a_rat:.4}, image_encoder {a_img:.4}, random {a_rand:.4}"
    );
    assert!(
        a_pr2l >= 1.2 * a_img,
        "pr2l {a_pr2l:.4} < 1.2 x image_encoder {a_img:.4}"
    );
    assert!(
        a_pr2l >= (5.0 * a_rand).max(1e-9),
        "pr2l {a_pr2l:.4} < 5 x random {a_rand:.4}"
    );
    assert!(
        a_rat >= a_pr2l,
        "rationale {a_rat:.4} below plain prompt {a_pr2l:.4}"
    );
}

// ===========================================================================
// Criterion 10: embedding bimodality on expert combat data
// ===========================================================================

#[test]
fn criterion_10_embedding_bimodality() {
    let model = gridcraft_vlm();
    let cond = make_condition("pr2l", EnvFamily::Gridcraft, "spider").unwrap();
    let vocab = Vocab::new();
    let data = std::fs::read_to_string(runs("gridcraft").join("data").join("expert.jsonl"))
        .expect("expert dataset (run collect-data)");
    let mut extractor = Extractor::new(&model, cond, 0).unwrap();
    let mut points = Vec::new();
    for line in data.lines().filter(|l| !l.trim().is_empty()) {
        let episode: Value = serde_json::from_str(line).unwrap();
        for step in episode["steps"].as_array().unwrap() {
            let obs: GridObservation = serde_json::from_value(step["obs"].clone()).unwrap();
            let action = step["action"].as_u64().unwrap() as usize;
            let reward = step["reward"].as_f64().unwrap();
            let pkt = extractor.packet(&obs.window, WINDOW, obs.hash64()).unwrap();
            let Some(yes) = answer_from_decoded(&pkt.decoded, &vocab) else { continue };
            points.push(ScatterPoint {
                features: tokenwise_mean(&pkt),
                tag: PointTag {
                    functional: action == 10 || action == 11,
                    rewarded: reward > 0.1,
                    decoded_yes: Some(yes),
                    room: None,
                    value: None,
                },
            });
        }
    }
    assert!(points.len() >= 100, "too few decodable expert states: {}", points.len());
    let scatter = pca_scatter(&points, 0).unwrap();
    let decoded: Vec<bool> = points.iter().map(|p| p.tag.decoded_yes.unwrap()).collect();
    let rf: Vec<bool> = points.iter().map(|p| p.tag.functional && p.tag.rewarded).collect();
    let score = bimodality_score(&scatter.coords, &decoded, &rf).unwrap();
    println!(
        "bimodality purity {:.4}, rewarded-functional yes fraction {:.4} over {} points",
        score.purity,
        score.rewarded_yes_fraction,
        points.len()
    );
    assert!(score.purity >= 0.9, "cluster purity {:.4} < 0.9", score.purity);
    assert!(rf.iter().any(|&b| b), "no rewarded functional-action states in data");
    assert!(
        score.rewarded_yes_fraction >= 0.70,
        "rewarded-functional yes fraction {:.4} < 0.70",
        score.rewarded_yes_fraction
    );
}

// ===========================================================================
// Criterion 11: byte-identical reruns
// ===========================================================================

#[test]
fn criterion_11_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    // Tiny VLM so the check stays cheap; determinism is independent of size.
    let vlm_cfg = VlmConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        ff: 24,
        max_seq: 304,
        ..VlmConfig::default()
    };
    let ckpt = tmp.path().join("vlm.ckpt");
    VlmModel::init(vlm_cfg, 5).save(&ckpt).unwrap();
    let config = serde_json::json!({
        "family": "Gridcraft",
        "task": "combat_spider",
        "condition": "pr2l",
        "vlm_checkpoint": ckpt,
        "seeds": [0],
        "out": out,
        "eval_episodes": 2,
        "vlm": { "d_model": 16, "layers": 2, "heads": 2, "ff": 24, "max_seq": 304 },
        "ppo": {
            "total_steps": 256, "rollout_len": 128, "batch": 64, "update_epochs": 1,
            "eval_every": 1, "eval_episodes": 2,
            "lr": { "Cosine": { "max": 5e-5, "min": 5e-6, "total": 3 } }
        }
    });
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let run = || {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_pr2l"))
            .args(["train-ppo", "--config"])
            .arg(&cfg_path)
            .status()
            .unwrap();
        assert!(status.success(), "train-ppo run failed");
    };
    run();
    let seed_dir = out.join("ppo").join("cond-pr2l").join("seed-0");
    let ckpt1 = std::fs::read(seed_dir.join("policy.ckpt")).unwrap();
    let csv1 = std::fs::read(seed_dir.join("train.csv")).unwrap();
    let agg1 = std::fs::read(out.join("ppo").join("cond-pr2l").join("aggregate.csv")).unwrap();
    run();
    let ckpt2 = std::fs::read(seed_dir.join("policy.ckpt")).unwrap();
    let csv2 = std::fs::read(seed_dir.join("train.csv")).unwrap();
    let agg2 = std::fs::read(out.join("ppo").join("cond-pr2l").join("aggregate.csv")).unwrap();
    assert_eq!(ckpt1, ckpt2, "policy checkpoint differs across identical reruns");
    assert_eq!(csv1, csv2, "train.csv differs across identical reruns");
    assert_eq!(agg1, agg2, "aggregate.csv differs across identical reruns");
}
