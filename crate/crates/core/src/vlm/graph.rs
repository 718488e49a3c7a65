//! Tape-based forward graph for the VLM, generic over the element type so the
//! same code trains in f32 and gradient-checks in f64.

use std::collections::BTreeMap;

use crate::tensor::{Elem, NodeId, Tape};

use super::vocab::TokenId;
use super::{attention_mask, validate_window, Result, SeqSpec, VlmConfig, VlmError};

pub type NodeMap = BTreeMap<String, NodeId>;

fn node(nodes: &NodeMap, name: &str) -> NodeId {
    *nodes
        .get(name)
        .unwrap_or_else(|| panic!("parameter {name} not staged"))
}

/// Input embeddings for one sequence: [T, d].
pub fn embed_sequence<E: Elem>(
    tape: &mut Tape<E>,
    nodes: &NodeMap,
    cfg: &VlmConfig,
    seq: &SeqSpec,
) -> Result<NodeId> {
    validate_window(&seq.image_glyphs, seq.grid)?;
    let total = seq.total_len();
    if total > cfg.max_seq {
        return Err(VlmError::Overlength(total, cfg.max_seq));
    }
    let g = seq.grid;
    let n_img = g * g;

    let glyph_ids: Vec<usize> = seq.image_glyphs.iter().map(|&x| x as usize).collect();
    let row_ids: Vec<usize> = (0..n_img).map(|i| i / g).collect();
    let col_ids: Vec<usize> = (0..n_img).map(|i| i % g).collect();
    let img = {
        let e1 = tape.embedding(node(nodes, "emb.glyph"), &glyph_ids)?;
        let e2 = tape.embedding(node(nodes, "emb.row"), &row_ids)?;
        let e3 = tape.embedding(node(nodes, "emb.col"), &col_ids)?;
        let e4 = tape.embedding(node(nodes, "emb.seg"), &vec![0usize; n_img])?;
        let s = tape.add(e1, e2)?;
        let s = tape.add(s, e3)?;
        tape.add(s, e4)?
    };

    let text_part = |tape: &mut Tape<E>, toks: &[TokenId], pos0: usize, seg: usize| -> Result<Option<NodeId>> {
        if toks.is_empty() {
            return Ok(None);
        }
        let ids: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..toks.len()).map(|i| pos0 + i).collect();
        let e1 = tape.embedding(node(nodes, "emb.tok"), &ids)?;
        let e2 = tape.embedding(node(nodes, "emb.txt_pos"), &pos)?;
        let e3 = tape.embedding(node(nodes, "emb.seg"), &vec![seg; toks.len()])?;
        let s = tape.add(e1, e2)?;
        Ok(Some(tape.add(s, e3)?))
    };

    let mut parts = vec![img];
    if let Some(p) = text_part(tape, &seq.prompt, 0, 1)? {
        parts.push(p);
    }
    let causal = seq.causal_inputs();
    if let Some(c) = text_part(tape, &causal, seq.prompt.len(), 2)? {
        parts.push(c);
    }
    Ok(tape.concat_rows(&parts)?)
}

/// One pre-LN transformer block.
fn block<E: Elem>(
    tape: &mut Tape<E>,
    nodes: &NodeMap,
    cfg: &VlmConfig,
    layer: usize,
    x: NodeId,
    mask: &[bool],
) -> Result<NodeId> {
    let d = cfg.d_model;
    let hd = d / cfg.heads;
    let t_len = tape.shape(x)[0];
    let p = |s: &str| format!("l{layer}.{s}");

    // Attention.
    let ln = tape.layer_norm_last(x, 1e-5)?;
    let ln = tape.mul_bias(ln, node(nodes, &p("ln1.g")))?;
    let ln = tape.add_bias(ln, node(nodes, &p("ln1.b")))?;
    let q = tape.matmul(ln, node(nodes, &p("attn.wq")))?;
    let q = tape.add_bias(q, node(nodes, &p("attn.bq")))?;
    let k = tape.matmul(ln, node(nodes, &p("attn.wk")))?;
    let k = tape.add_bias(k, node(nodes, &p("attn.bk")))?;
    let v = tape.matmul(ln, node(nodes, &p("attn.wv")))?;
    let v = tape.add_bias(v, node(nodes, &p("attn.bv")))?;

    let scale = 1.0 / (hd as f64).sqrt();
    let mut head_outs_t = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kht = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kht)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.masked_fill(scores, mask, -1e9)?;
        let probs = tape.softmax_last(scores)?;
        let oh = tape.matmul(probs, vh)?; // [T, hd]
        head_outs_t.push(tape.transpose(oh)?); // [hd, T]
    }
    let stacked = tape.concat_rows(&head_outs_t)?; // [d, T]
    let merged = tape.transpose(stacked)?; // [T, d]
    debug_assert_eq!(tape.shape(merged), &[t_len, d]);
    let proj = tape.matmul(merged, node(nodes, &p("attn.wo")))?;
    let proj = tape.add_bias(proj, node(nodes, &p("attn.bo")))?;
    let proj = tape.dropout(proj, cfg.dropout)?;
    let x = tape.add(x, proj)?;

    // Feed-forward.
    let ln = tape.layer_norm_last(x, 1e-5)?;
    let ln = tape.mul_bias(ln, node(nodes, &p("ln2.g")))?;
    let ln = tape.add_bias(ln, node(nodes, &p("ln2.b")))?;
    let h1 = tape.matmul(ln, node(nodes, &p("ff.w1")))?;
    let h1 = tape.add_bias(h1, node(nodes, &p("ff.b1")))?;
    let h1 = tape.gelu(h1)?;
    let h2 = tape.matmul(h1, node(nodes, &p("ff.w2")))?;
    let h2 = tape.add_bias(h2, node(nodes, &p("ff.b2")))?;
    let h2 = tape.dropout(h2, cfg.dropout)?;
    Ok(tape.add(x, h2)?)
}

/// Full forward: per-layer block outputs (hidden states for every position).
pub fn forward<E: Elem>(
    tape: &mut Tape<E>,
    nodes: &NodeMap,
    cfg: &VlmConfig,
    seq: &SeqSpec,
) -> Result<Vec<NodeId>> {
    let x0 = embed_sequence(tape, nodes, cfg, seq)?;
    let total = seq.total_len();
    let mask = attention_mask(total, seq.prefix_len(), cfg.prefix_attention);
    let mut states = Vec::with_capacity(cfg.layers);
    let mut x = x0;
    for l in 0..cfg.layers {
        x = block(tape, nodes, cfg, l, x, &mask)?;
        states.push(x);
    }
    Ok(states)
}

/// Vocabulary logits for a contiguous row range of the last hidden state.
pub fn logits_rows<E: Elem>(
    tape: &mut Tape<E>,
    nodes: &NodeMap,
    last: NodeId,
    start: usize,
    end: usize,
) -> Result<NodeId> {
    let rows = tape.slice_rows(last, start, end)?;
    let ln = tape.layer_norm_last(rows, 1e-5)?;
    let ln = tape.mul_bias(ln, node(nodes, "lnf.g"))?;
    let ln = tape.add_bias(ln, node(nodes, "lnf.b"))?;
    let z = tape.matmul(ln, node(nodes, "out.w"))?;
    Ok(tape.add_bias(z, node(nodes, "out.b"))?)
}

/// Mean cross-entropy over answer targets only. The sequence feeds the answer
/// tokens (teacher forcing); `targets` must be the answer plus the end token,
/// predicted from positions BEGIN..last-answer-token. Image and prompt
/// positions never contribute to the loss.
pub fn answer_loss<E: Elem>(
    tape: &mut Tape<E>,
    nodes: &NodeMap,
    cfg: &VlmConfig,
    seq: &SeqSpec,
    targets: &[TokenId],
) -> Result<NodeId> {
    assert_eq!(
        targets.len(),
        seq.decoded.len() + 1,
        "targets = decoded inputs + end token"
    );
    let states = forward(tape, nodes, cfg, seq)?;
    let last = *states.last().expect("at least one layer");
    let p = seq.prefix_len();
    let z = logits_rows(tape, nodes, last, p, p + targets.len())?;
    let logp = tape.log_softmax_last(z)?;
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = tape.gather_rows(logp, &ids)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}
