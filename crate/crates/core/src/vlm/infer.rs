//! Fast frozen-weight inference path: plain f32 buffers with a KV cache.
//! Shares kernels (`matmul_acc`, `softmax_row`, `gelu_fwd`) with the tape so
//! both paths compute the same functions.

use crate::rng::{RunRng, Stream};
use crate::tensor::optim::Param;
use crate::tensor::{gelu_fwd, matmul_acc, softmax_row};

use super::vocab::{TokenId, BEGIN, END, IMG, PAD};
use super::{validate_window, Result, SeqSpec, VlmModel};

const LN_EPS: f32 = 1e-5;

/// Incremental forward state: per-layer key/value caches and per-layer block
/// outputs (the hidden states) for every processed position.
pub struct FastState {
    pub prefix_len: usize,
    pos: usize,
    txt_next: usize,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    hidden: Vec<Vec<f32>>,
    last_row: Vec<f32>,
}

impl FastState {
    /// Number of processed positions (prefix + BEGIN + decoded so far).
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Hidden states of one layer, row-major [len, d_model].
    pub fn hidden_rows(&self, layer: usize) -> &[f32] {
        &self.hidden[layer]
    }
}

pub struct FastVlm<'m> {
    m: &'m VlmModel,
}

impl<'m> FastVlm<'m> {
    pub fn new(m: &'m VlmModel) -> Self {
        m.config.validate();
        FastVlm { m }
    }

    fn p(&self, name: &str) -> &Param {
        self.m
            .params
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
    }

    fn table_row(&self, name: &str, idx: usize) -> &[f32] {
        let p = self.p(name);
        let d = p.shape[1];
        &p.data[idx * d..(idx + 1) * d]
    }

    fn add_row(dst: &mut [f32], src: &[f32]) {
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }

    fn embed_image_cell(&self, glyph: u8, row: usize, col: usize) -> Vec<f32> {
        let mut x = self.table_row("emb.glyph", glyph as usize).to_vec();
        Self::add_row(&mut x, self.table_row("emb.row", row));
        Self::add_row(&mut x, self.table_row("emb.col", col));
        Self::add_row(&mut x, self.table_row("emb.seg", 0));
        x
    }

    fn embed_text(&self, tok: TokenId, txt_pos: usize, seg: usize) -> Vec<f32> {
        let mut x = self.table_row("emb.tok", tok as usize).to_vec();
        Self::add_row(&mut x, self.table_row("emb.txt_pos", txt_pos));
        Self::add_row(&mut x, self.table_row("emb.seg", seg));
        x
    }

    fn layer_norm_affine(&self, x: &[f32], rows: usize, g: &str, b: &str, out: &mut [f32]) {
        let d = self.m.config.d_model;
        let gain = &self.p(g).data;
        let bias = &self.p(b).data;
        for r in 0..rows {
            let src = &x[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f32>() / d as f32;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let dst = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                dst[i] = (src[i] - mean) * inv * gain[i] + bias[i];
            }
        }
    }

    fn linear(&self, x: &[f32], rows: usize, w: &str, b: &str) -> Vec<f32> {
        let wp = self.p(w);
        let (k, n) = (wp.shape[0], wp.shape[1]);
        let mut out = vec![0.0f32; rows * n];
        matmul_acc(x, &wp.data, rows, k, n, &mut out);
        let bias = &self.p(b).data;
        for r in 0..rows {
            Self::add_row(&mut out[r * n..(r + 1) * n], bias);
        }
        out
    }

    /// Process `rows` new positions through every layer, appending to the KV
    /// caches and hidden-state buffers. Attention spans all cached positions;
    /// within the new block, position i sees new position j iff allowed by
    /// `block_bidirectional` (true for the prefix) or j <= i.
    fn advance(&self, st: &mut FastState, mut x: Vec<f32>, rows: usize, block_bidirectional: bool) {
        let cfg = &self.m.config;
        let d = cfg.d_model;
        let hd = d / cfg.heads;
        let old = st.pos;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut ln = vec![0.0f32; rows * d];
        for l in 0..cfg.layers {
            let p = |s: &str| format!("l{l}.{s}");
            self.layer_norm_affine(&x, rows, &p("ln1.g"), &p("ln1.b"), &mut ln);
            let q = self.linear(&ln, rows, &p("attn.wq"), &p("attn.bq"));
            let k_new = self.linear(&ln, rows, &p("attn.wk"), &p("attn.bk"));
            let v_new = self.linear(&ln, rows, &p("attn.wv"), &p("attn.bv"));
            st.k[l].extend_from_slice(&k_new);
            st.v[l].extend_from_slice(&v_new);
            let kc = &st.k[l];
            let vc = &st.v[l];

            let mut merged = vec![0.0f32; rows * d];
            for i in 0..rows {
                let span = if block_bidirectional { old + rows } else { old + i + 1 };
                let mut scores = vec![0.0f32; span];
                for h in 0..cfg.heads {
                    let qo = i * d + h * hd;
                    let qh = &q[qo..qo + hd];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let ko = j * d + h * hd;
                        let kh = &kc[ko..ko + hd];
                        *s = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<f32>() * scale;
                    }
                    softmax_row(&mut scores);
                    let dst = &mut merged[i * d + h * hd..i * d + (h + 1) * hd];
                    for (j, &w) in scores.iter().enumerate() {
                        let vo = j * d + h * hd;
                        for (acc, &vv) in dst.iter_mut().zip(&vc[vo..vo + hd]) {
                            *acc += w * vv;
                        }
                    }
                }
            }
            let proj = self.linear(&merged, rows, &p("attn.wo"), &p("attn.bo"));
            Self::add_row(&mut x, &proj);

            self.layer_norm_affine(&x, rows, &p("ln2.g"), &p("ln2.b"), &mut ln);
            let mut h1 = self.linear(&ln, rows, &p("ff.w1"), &p("ff.b1"));
            for v in h1.iter_mut() {
                *v = gelu_fwd(*v);
            }
            let h2 = self.linear(&h1, rows, &p("ff.w2"), &p("ff.b2"));
            Self::add_row(&mut x, &h2);
            st.hidden[l].extend_from_slice(&x);
        }
        st.pos += rows;
        st.last_row = x[(rows - 1) * d..rows * d].to_vec();
    }

    /// Run the image+prompt prefix as one bidirectional block.
    pub fn run_prefix(&self, glyphs: &[u8], grid: usize, prompt: &[TokenId]) -> Result<FastState> {
        validate_window(glyphs, grid)?;
        let cfg = &self.m.config;
        let d = cfg.d_model;
        let n_img = grid * grid;
        let prefix = n_img + prompt.len();
        let mut x = Vec::with_capacity(prefix * d);
        for (i, &g) in glyphs.iter().enumerate() {
            x.extend_from_slice(&self.embed_image_cell(g, i / grid, i % grid));
        }
        for (j, &t) in prompt.iter().enumerate() {
            x.extend_from_slice(&self.embed_text(t, j, 1));
        }
        let mut st = FastState {
            prefix_len: prefix,
            pos: 0,
            txt_next: prompt.len(),
            k: vec![Vec::new(); cfg.layers],
            v: vec![Vec::new(); cfg.layers],
            hidden: vec![Vec::new(); cfg.layers],
            last_row: vec![0.0; d],
        };
        self.advance(&mut st, x, prefix, cfg.prefix_attention);
        Ok(st)
    }

    /// Feed one causal token; returns next-token logits.
    pub fn step(&self, st: &mut FastState, tok: TokenId) -> Vec<f32> {
        let x = self.embed_text(tok, st.txt_next, 2);
        st.txt_next += 1;
        self.advance(st, x, 1, false);
        self.logits_of_last(st)
    }

    fn logits_of_last(&self, st: &FastState) -> Vec<f32> {
        let cfg = &self.m.config;
        let d = cfg.d_model;
        let mut ln = vec![0.0f32; d];
        self.layer_norm_affine(&st.last_row, 1, "lnf.g", "lnf.b", &mut ln);
        let wp = self.p("out.w");
        let mut z = vec![0.0f32; cfg.vocab_size];
        matmul_acc(&ln, &wp.data, 1, d, cfg.vocab_size, &mut z);
        Self::add_row(&mut z, &self.p("out.b").data);
        z
    }

    /// Teacher-forced forward over a full sequence; hidden states for every
    /// position land in the returned state, logits per causal step alongside.
    pub fn full_forward(&self, seq: &SeqSpec) -> Result<(FastState, Vec<Vec<f32>>)> {
        let mut st = self.run_prefix(&seq.image_glyphs, seq.grid, &seq.prompt)?;
        let mut logits = Vec::with_capacity(1 + seq.decoded.len());
        logits.push(self.step(&mut st, BEGIN));
        for &t in &seq.decoded {
            logits.push(self.step(&mut st, t));
        }
        Ok((st, logits))
    }

    /// Greedy decode of exactly `n` tokens. Specials (PAD/BEGIN/END/IMG) are
    /// suppressed throughout so the budget is always filled.
    pub fn greedy_decode(&self, st: &mut FastState, n: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(n);
        let mut logits = self.step(st, BEGIN);
        for _ in 0..n {
            let tok = argmax_allowed(&logits);
            out.push(tok);
            logits = self.step(st, tok);
        }
        out
    }

    /// Temperature sampling of exactly `n` tokens over the non-special ids.
    pub fn sampled_decode(
        &self,
        st: &mut FastState,
        n: usize,
        temperature: f64,
        rng: &mut Stream,
    ) -> Vec<TokenId> {
        assert!(temperature > 0.0);
        let mut out = Vec::with_capacity(n);
        let mut logits = self.step(st, BEGIN);
        for _ in 0..n {
            let mut probs: Vec<f32> = logits
                .iter()
                .enumerate()
                .map(|(i, &z)| {
                    if is_special(i as TokenId) {
                        f32::NEG_INFINITY
                    } else {
                        z / temperature as f32
                    }
                })
                .collect();
            softmax_row(&mut probs);
            let tok = sample_index(&probs, rng) as TokenId;
            out.push(tok);
            logits = self.step(st, tok);
        }
        out
    }

    /// Teacher-forced argmax predictions for `targets` (answer + END), given
    /// the answer as decoded input. Exact-match accuracy is the caller's fold.
    pub fn predict_answer(&self, seq: &SeqSpec, targets: &[TokenId]) -> Result<Vec<TokenId>> {
        assert_eq!(targets.len(), seq.decoded.len() + 1);
        let (_, logits) = self.full_forward(seq)?;
        Ok(logits
            .iter()
            .map(|z| {
                z.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i as TokenId)
                    .expect("non-empty vocab")
            })
            .collect())
    }
}

pub fn is_special(t: TokenId) -> bool {
    matches!(t, PAD | BEGIN | END | IMG)
}

fn argmax_allowed(logits: &[f32]) -> TokenId {
    let mut best = usize::MAX;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &z) in logits.iter().enumerate() {
        if !is_special(i as TokenId) && z > best_v {
            best_v = z;
            best = i;
        }
    }
    best as TokenId
}

fn sample_index(probs: &[f32], rng: &mut Stream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0f64;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p as f64;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Deterministic decode stream keyed by observation content and prompt id, so
/// a rerun of the same run seed reproduces every sampled rationale exactly.
pub fn decode_stream(run_seed: u64, obs_hash: u64, prompt_id: u64) -> Stream {
    let mix = run_seed
        ^ obs_hash.rotate_left(17)
        ^ prompt_id.wrapping_mul(0x9e3779b97f4a7c15);
    RunRng::new(mix).stream("vlm-decode", 0)
}
