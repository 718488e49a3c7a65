//! Small trainable generative vision-language model: glyph tokenizer + closed
//! text vocabulary + prefix-LM transformer exposing all per-layer hidden
//! states. Two execution paths share one parameter set: a tape-based path for
//! training and gradient checks, and a buffer-based path with a KV cache for
//! fast frozen inference.

pub mod graph;
pub mod infer;
pub mod pretrain;
pub mod vocab;
pub mod vqa;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RunRng;
use crate::tensor::optim::{Param, Params};
use vocab::{TokenId, Vocab, BEGIN};

pub const GLYPH_TABLE: usize = 64;
pub const MAX_GRID: usize = 16;
pub const MAX_TXT_POS: usize = 48;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("unknown glyph id {0}")]
    UnknownGlyph(u8),
    #[error("window of {0} cells is not a {1}x{1} grid")]
    BadWindow(usize, usize),
    #[error("sequence length {0} exceeds the budget {1}")]
    Overlength(usize, usize),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Vocab(#[from] vocab::VocabError),
}

pub type Result<T> = std::result::Result<T, VlmError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VlmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_seq: usize,
    pub dropout: f64,
    /// Bidirectional attention over image+prompt; fully causal when false.
    pub prefix_attention: bool,
    pub vocab_size: usize,
}

impl Default for VlmConfig {
    fn default() -> Self {
        VlmConfig {
            d_model: 64,
            layers: 4,
            heads: 4,
            ff: 128,
            max_seq: 304,
            dropout: 0.1,
            prefix_attention: true,
            vocab_size: Vocab::new().len(),
        }
    }
}

impl VlmConfig {
    pub fn validate(&self) {
        assert!(self.d_model % self.heads == 0, "d_model must divide by heads");
    }
}

/// One forward-pass input: image cells, prompt tokens, and the decoded-segment
/// input tokens (BEGIN is added implicitly as the first causal position).
#[derive(Debug, Clone)]
pub struct SeqSpec {
    pub image_glyphs: Vec<u8>,
    pub grid: usize,
    pub prompt: Vec<TokenId>,
    pub decoded: Vec<TokenId>,
}

impl SeqSpec {
    pub fn prefix_len(&self) -> usize {
        self.grid * self.grid + self.prompt.len()
    }

    pub fn total_len(&self) -> usize {
        // image + prompt + BEGIN + decoded inputs
        self.prefix_len() + 1 + self.decoded.len()
    }

    /// Token ids of the causal segment as fed to the model.
    pub fn causal_inputs(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(1 + self.decoded.len());
        v.push(BEGIN);
        v.extend_from_slice(&self.decoded);
        v
    }
}

fn known_glyph(g: u8) -> bool {
    use crate::gridcraft as gc;
    use crate::navhome as nv;
    matches!(g,
        gc::GLYPH_EMPTY..=gc::GLYPH_VOID
        | gc::GLYPH_SPIDER..=gc::GLYPH_PIGMAN
        | nv::NGLYPH_FLOOR..=nv::NGLYPH_TABLE)
}


pub fn validate_window(window: &[u8], grid: usize) -> Result<()> {
    if window.len() != grid * grid || grid > MAX_GRID {
        return Err(VlmError::BadWindow(window.len(), grid));
    }
    for &g in window {
        if !known_glyph(g) {
            return Err(VlmError::UnknownGlyph(g));
        }
    }
    Ok(())
}

/// Attention mask as a flat row-major T x T boolean grid; true = disallowed.
pub fn attention_mask(total: usize, prefix_len: usize, prefix_attention: bool) -> Vec<bool> {
    let mut mask = vec![false; total * total];
    for i in 0..total {
        for j in 0..total {
            let blocked = if prefix_attention {
                j >= prefix_len && j > i
            } else {
                j > i
            };
            mask[i * total + j] = blocked;
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct VlmModel {
    pub config: VlmConfig,
    pub params: Params,
}

impl VlmModel {
    pub fn init(config: VlmConfig, seed: u64) -> Self {
        config.validate();
        let mut rng = RunRng::new(seed).stream("vlm-init", 0);
        let mut params = Params::new();
        let d = config.d_model;
        let mut normal = |shape: Vec<usize>, scale: f64| {
            let n: usize = shape.iter().product();
            Param::new(
                shape,
                (0..n).map(|_| (rng.normal() * scale) as f32).collect(),
            )
        };
        params.insert("emb.tok", normal(vec![config.vocab_size, d], 0.02));
        params.insert("emb.glyph", normal(vec![GLYPH_TABLE, d], 0.02));
        params.insert("emb.row", normal(vec![MAX_GRID, d], 0.02));
        params.insert("emb.col", normal(vec![MAX_GRID, d], 0.02));
        params.insert("emb.txt_pos", normal(vec![MAX_TXT_POS, d], 0.02));
        params.insert("emb.seg", normal(vec![3, d], 0.02));
        let proj_scale = 0.02;
        for l in 0..config.layers {
            let p = |s: &str| format!("l{l}.{s}");
            params.insert(&p("ln1.g"), Param::new(vec![d], vec![1.0; d]));
            params.insert(&p("ln1.b"), Param::zeros(vec![d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                params.insert(&p(w), normal(vec![d, d], proj_scale));
            }
            for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                params.insert(&p(b), Param::zeros(vec![d]));
            }
            params.insert(&p("ln2.g"), Param::new(vec![d], vec![1.0; d]));
            params.insert(&p("ln2.b"), Param::zeros(vec![d]));
            params.insert(&p("ff.w1"), normal(vec![d, config.ff], proj_scale));
            params.insert(&p("ff.b1"), Param::zeros(vec![config.ff]));
            params.insert(&p("ff.w2"), normal(vec![config.ff, d], proj_scale));
            params.insert(&p("ff.b2"), Param::zeros(vec![d]));
        }
        params.insert("lnf.g", Param::new(vec![d], vec![1.0; d]));
        params.insert("lnf.b", Param::zeros(vec![d]));
        params.insert("out.w", normal(vec![d, config.vocab_size], proj_scale));
        params.insert("out.b", Param::zeros(vec![config.vocab_size]));
        VlmModel { config, params }
    }

    /// Content hash of config + weights; part of embedding-cache keys.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u64| {
            h ^= b;
            h = h.wrapping_mul(0x100000001b3);
        };
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        for b in cfg {
            eat(b as u64);
        }
        for (name, p) in &self.params.0 {
            for b in name.as_bytes() {
                eat(*b as u64);
            }
            for &v in &p.data {
                eat(v.to_bits() as u64);
            }
        }
        h
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "vlm", "config": self.config })
    }

    pub fn save(&self, path: &std::path::Path) -> std::result::Result<(), crate::tensor::checkpoint::CheckpointError> {
        crate::tensor::checkpoint::save(path, &self.checkpoint_meta(), &self.params)
    }

    pub fn load(path: &std::path::Path) -> std::result::Result<Self, crate::tensor::checkpoint::CheckpointError> {
        let (meta, params) = crate::tensor::checkpoint::load(path)?;
        let config: VlmConfig = serde_json::from_value(meta["config"].clone())?;
        Ok(VlmModel { config, params })
    }
}
