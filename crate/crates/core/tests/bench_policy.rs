//! Manual throughput probe for the policy forward/backward pass at the
//! gridcraft packet size. Run with `--ignored --nocapture`.

use pr2l_core::policy::{build_forward, NodeMap, Policy, PolicyConfig};
use pr2l_core::rng::RunRng;
use pr2l_core::tensor::Tape;

#[test]
#[ignore]
fn bench_policy_forward_backward() {
    let cfg = PolicyConfig::new(64, 8, 12);
    let pol = Policy::init(cfg.clone(), 0);
    let t = 188usize;
    let mut rng = RunRng::new(1).stream("bench", 0);
    let emb: Vec<f32> = (0..t * 64).map(|_| rng.normal() as f32 * 0.3).collect();
    let mask = vec![true; t];
    let n = 60;

    let start = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let nodes: NodeMap = pol.params.stage(&mut tape);
        let tokens = tape.input(vec![t, 64], emb.clone(), false);
        let pr = tape.input(vec![1, 8], vec![0.1; 8], false);
        let heads = build_forward(&mut tape, &nodes, &cfg, tokens, &mask, pr, None).unwrap();
        let lp = tape.log_softmax_last(heads.output).unwrap();
        let pick = tape.gather_rows(lp, &[3]).unwrap();
        let s = tape.mean(pick).unwrap();
        tape.backward(s).unwrap();
        std::hint::black_box(tape.value(heads.output));
    }
    let dt = start.elapsed().as_secs_f64();
    println!("fwd+bwd: {:.1} passes/s ({:.2} ms each)", n as f64 / dt, dt / n as f64 * 1e3);

    let start = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let nodes: NodeMap = pol.params.stage(&mut tape);
        let tokens = tape.input(vec![t, 64], emb.clone(), false);
        let pr = tape.input(vec![1, 8], vec![0.1; 8], false);
        let heads = build_forward(&mut tape, &nodes, &cfg, tokens, &mask, pr, None).unwrap();
        std::hint::black_box(tape.value(heads.output));
    }
    let dt = start.elapsed().as_secs_f64();
    println!("fwd only: {:.1} passes/s ({:.2} ms each)", n as f64 / dt, dt / n as f64 * 1e3);
}

#[test]
#[ignore]
fn bench_op_breakdown() {
    use pr2l_core::tensor::Tape;
    let mut rng = RunRng::new(2).stream("ops", 0);
    let mk = |rng: &mut pr2l_core::rng::Stream, n: usize| -> Vec<f32> {
        (0..n).map(|_| rng.normal() as f32 * 0.3).collect()
    };
    let a = mk(&mut rng, 188 * 64);
    let w = mk(&mut rng, 64 * 64);
    let s = mk(&mut rng, 188 * 188);
    let n = 2000;

    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(vec![188, 64], a.clone(), false);
        let wt = tape.input(vec![64, 64], w.clone(), true);
        let y = tape.matmul(x, wt).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
    }
    println!("matmul 188x64x64 fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(vec![188, 188], s.clone(), true);
        let y = tape.softmax_last(x).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
    }
    println!("softmax 188x188 fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(vec![188, 188], s.clone(), true);
        let mask = vec![false; 188 * 188];
        let y = tape.masked_fill(x, &mask, -1e9).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
    }
    println!("masked_fill 188x188 fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(vec![188, 64], a.clone(), true);
        let y = tape.layer_norm_last(x, 1e-5).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
    }
    println!("layer_norm 188x64 fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(vec![188, 128], mk(&mut rng, 188 * 128), true);
        let y = tape.relu(x).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
    }
    println!("relu 188x128 fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(vec![188, 64], a.clone(), true);
        let y = tape.transpose(x).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
    }
    println!("transpose 188x64 fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);

    let t0 = std::time::Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(vec![188, 64], a.clone(), true);
        let y = tape.dropout(x, 0.1).unwrap();
        let m = tape.mean(y).unwrap();
        tape.backward(m).unwrap();
    }
    println!("dropout(eval) 188x64 fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() / n as f64 * 1e3);
}

