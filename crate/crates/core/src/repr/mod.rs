//! Promptable representations: turns (observation, prompt, VLM) into
//! policy-ready embedding packets, covering every representation condition
//! compared in the experiments (PR2L, rationale variant, image-encoder
//! baseline, no-prompt, no-generation, auxiliary-text variants, RT-2-style,
//! oracle-detector augmentation).

pub mod cache;
pub mod pca;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::vlm::infer::{decode_stream, FastVlm};
use crate::vlm::vocab::{TokenId, Vocab};
use crate::vlm::{VlmError, VlmModel};

use cache::{CacheError, CachedPacket, ReprCache};

#[derive(Debug, Error)]
pub enum ReprError {
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error(transparent)]
    Vocab(#[from] crate::vlm::vocab::VocabError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("grid {0} not divisible by pooling kernel {1}")]
    BadPool(usize, usize),
    #[error("unknown representation condition: {0}")]
    UnknownCondition(String),
}

pub type Result<T> = std::result::Result<T, ReprError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvFamily {
    Gridcraft,
    Navhome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegLabel {
    Image,
    Prompt,
    Decoded,
}

/// How per-layer hidden states merge into one packet. Concat-seq appends the
/// selected layers along the sequence axis (D = d_model); stack-dim stacks
/// them per token (D = layers * d_model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMode {
    ConcatSeq,
    StackDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodeScheme {
    Greedy,
    Sampled { temperature: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeSpec {
    pub scheme: DecodeScheme,
    pub tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    /// Template with an optional {target} slot.
    pub template: String,
    /// Auxiliary sentence prepended to the question; may use {target}.
    pub aux: Option<String>,
    /// Append the rationale tail ("why or not").
    pub rationale: bool,
    pub decode: DecodeSpec,
}

impl PromptSpec {
    pub fn render(&self, target: &str) -> String {
        let mut parts = Vec::new();
        if let Some(aux) = &self.aux {
            parts.push(aux.replace("{target}", target));
        }
        let body = self.template.replace("{target}", target);
        if !body.is_empty() {
            parts.push(body);
        }
        if self.rationale {
            parts.push("why or not".to_string());
        }
        parts.join(" ")
    }

    pub fn tokens(&self, vocab: &Vocab, target: &str) -> Result<Vec<TokenId>> {
        Ok(vocab.encode(&self.render(target))?)
    }

    /// Stable numeric id for decode seeding and cache keys.
    pub fn id_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.id.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct ReprPacket {
    pub t: usize,
    pub d: usize,
    /// Row-major t x d.
    pub embedding: Vec<f32>,
    pub mask: Vec<bool>,
    pub segments: Vec<SegLabel>,
    pub decoded: Vec<TokenId>,
    pub decoded_text: String,
    pub prompt_id: String,
    pub model_hash: u64,
    pub merge: MergeMode,
}

/// 2-D average pooling of a grid x grid token arrangement down to
/// (grid/kernel)^2 tokens.
pub fn average_pool_2d(rows: &[f32], grid: usize, d: usize, kernel: usize) -> Result<Vec<f32>> {
    if kernel == 0 || grid % kernel != 0 {
        return Err(ReprError::BadPool(grid, kernel));
    }
    assert_eq!(rows.len(), grid * grid * d);
    let out_grid = grid / kernel;
    let mut out = vec![0.0f32; out_grid * out_grid * d];
    let norm = (kernel * kernel) as f32;
    for br in 0..out_grid {
        for bc in 0..out_grid {
            let dst = (br * out_grid + bc) * d;
            for ir in 0..kernel {
                for ic in 0..kernel {
                    let src = ((br * kernel + ir) * grid + (bc * kernel + ic)) * d;
                    for k in 0..d {
                        out[dst + k] += rows[src + k];
                    }
                }
            }
            for k in 0..d {
                out[dst + k] /= norm;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub family: EnvFamily,
    pub prompt: PromptSpec,
    pub merge: MergeMode,
    /// Merge the last N transformer layers (default 2).
    pub layers: usize,
    /// Pool image tokens with this square kernel before merging.
    pub pool_kernel: Option<usize>,
    /// Image tokens only: prompt and decode skipped entirely.
    pub image_only: bool,
    /// Append the ground-truth 4-way presence/position one-hot token.
    pub oracle: bool,
    pub target: String,
}

pub const GRIDCRAFT_CONDITIONS: [&str; 8] = [
    "pr2l",
    "with_aux",
    "changed_aux",
    "no_prompt",
    "no_generation",
    "image_encoder",
    "rt2",
    "oracle_detector",
];

pub const NAVHOME_CONDITIONS: [&str; 5] = [
    "pr2l",
    "pr2l_rationale",
    "no_prompt",
    "no_generation",
    "image_encoder",
];

fn rt2_template(target: &str) -> String {
    match target {
        "cow" => "i want to milk a cow i can use move or turn what should i do".to_string(),
        "sheep" => "i want to shear a sheep i can use move or turn what should i do".to_string(),
        _ => format!("i want to fight a {target} i can attack move or turn what should i do"),
    }
}

pub fn make_condition(name: &str, family: EnvFamily, target: &str) -> Result<Condition> {
    let greedy6 = DecodeSpec {
        scheme: DecodeScheme::Greedy,
        tokens: 6,
    };
    let base = |prompt: PromptSpec| Condition {
        name: name.to_string(),
        family,
        prompt,
        merge: match family {
            EnvFamily::Gridcraft => MergeMode::ConcatSeq,
            EnvFamily::Navhome => MergeMode::StackDim,
        },
        layers: 2,
        pool_kernel: match family {
            EnvFamily::Gridcraft => None,
            EnvFamily::Navhome => Some(4),
        },
        image_only: false,
        oracle: false,
        target: target.to_string(),
    };
    let prompt = |id: &str, template: &str, aux: Option<&str>, rationale: bool, decode: DecodeSpec| PromptSpec {
        id: id.to_string(),
        template: template.to_string(),
        aux: aux.map(|s| s.to_string()),
        rationale,
        decode,
    };

    let presence = "is there a {target} in this image";
    let plausibility = "would a {target} be found here";
    let cond = match (family, name) {
        (EnvFamily::Gridcraft, "pr2l") => base(prompt("gc-presence", presence, None, false, greedy6)),
        (EnvFamily::Gridcraft, "with_aux") => base(prompt(
            "gc-presence-aux",
            presence,
            Some("the {target} here is dark"),
            false,
            greedy6,
        )),
        (EnvFamily::Gridcraft, "changed_aux") => base(prompt(
            "gc-presence-aux-changed",
            presence,
            Some("the {target} here is light"),
            false,
            greedy6,
        )),
        (EnvFamily::Gridcraft, "no_prompt") => {
            base(prompt("gc-no-prompt", "", None, false, greedy6))
        }
        (EnvFamily::Gridcraft, "no_generation") => base(prompt(
            "gc-presence-nogen",
            presence,
            None,
            false,
            DecodeSpec {
                scheme: DecodeScheme::None,
                tokens: 0,
            },
        )),
        (EnvFamily::Gridcraft, "rt2") => {
            base(prompt("gc-rt2", &rt2_template(target), None, false, greedy6))
        }
        (EnvFamily::Gridcraft, "image_encoder") | (EnvFamily::Gridcraft, "oracle_detector") => {
            let mut c = base(prompt(
                "gc-image",
                "",
                None,
                false,
                DecodeSpec {
                    scheme: DecodeScheme::None,
                    tokens: 0,
                },
            ));
            c.image_only = true;
            c.oracle = name == "oracle_detector";
            c
        }
        (EnvFamily::Navhome, "pr2l") => base(prompt(
            "nav-plaus",
            plausibility,
            None,
            false,
            DecodeSpec {
                scheme: DecodeScheme::Greedy,
                tokens: 2,
            },
        )),
        (EnvFamily::Navhome, "pr2l_rationale") => base(prompt(
            "nav-plaus-rationale",
            plausibility,
            None,
            true,
            DecodeSpec {
                scheme: DecodeScheme::Sampled { temperature: 0.4 },
                tokens: 20,
            },
        )),
        (EnvFamily::Navhome, "no_prompt") => base(prompt(
            "nav-no-prompt",
            "",
            None,
            false,
            DecodeSpec {
                scheme: DecodeScheme::Greedy,
                tokens: 2,
            },
        )),
        (EnvFamily::Navhome, "no_generation") => base(prompt(
            "nav-plaus-nogen",
            plausibility,
            None,
            false,
            DecodeSpec {
                scheme: DecodeScheme::None,
                tokens: 0,
            },
        )),
        (EnvFamily::Navhome, "image_encoder") => {
            let mut c = base(prompt(
                "nav-image",
                "",
                None,
                false,
                DecodeSpec {
                    scheme: DecodeScheme::None,
                    tokens: 0,
                },
            ));
            c.image_only = true;
            c
        }
        _ => return Err(ReprError::UnknownCondition(name.to_string())),
    };
    Ok(cond)
}

/// Prompt registry mirroring the per-task prompt table plus the home
/// navigation prompt: for each task target, the main prompt, the RT-2-style
/// action prompt, and the changed-auxiliary-text variant.
pub fn prompt_registry() -> serde_json::Value {
    let gridcraft_targets = ["spider", "zombie", "enderman", "pigman", "cow", "sheep"];
    let mut gc = serde_json::Map::new();
    for t in gridcraft_targets {
        let pr2l = make_condition("pr2l", EnvFamily::Gridcraft, t).unwrap();
        let rt2 = make_condition("rt2", EnvFamily::Gridcraft, t).unwrap();
        let aux = make_condition("changed_aux", EnvFamily::Gridcraft, t).unwrap();
        gc.insert(
            t.to_string(),
            json!({
                "pr2l": pr2l.prompt.render(t),
                "rt2": rt2.prompt.render(t),
                "changed_aux": aux.prompt.render(t),
            }),
        );
    }
    let mut nav = serde_json::Map::new();
    for g in ["toilet", "bed", "sofa"] {
        let plain = make_condition("pr2l", EnvFamily::Navhome, g).unwrap();
        let rat = make_condition("pr2l_rationale", EnvFamily::Navhome, g).unwrap();
        nav.insert(
            g.to_string(),
            json!({
                "pr2l": plain.prompt.render(g),
                "pr2l_rationale": rat.prompt.render(g),
            }),
        );
    }
    json!({ "gridcraft": gc, "navhome": nav })
}

fn image_token_count(cond: &Condition, grid: usize) -> usize {
    match cond.pool_kernel {
        Some(k) => (grid / k) * (grid / k),
        None => grid * grid,
    }
}

fn build_segments(cond: &Condition, img: usize, prompt_len: usize, n_dec: usize) -> Vec<SegLabel> {
    let mut per_layer = Vec::with_capacity(img + prompt_len + n_dec);
    per_layer.extend(std::iter::repeat_n(SegLabel::Image, img));
    per_layer.extend(std::iter::repeat_n(SegLabel::Prompt, prompt_len));
    per_layer.extend(std::iter::repeat_n(SegLabel::Decoded, n_dec));
    match cond.merge {
        MergeMode::ConcatSeq => per_layer
            .iter()
            .cycle()
            .take(per_layer.len() * cond.layers)
            .copied()
            .collect(),
        MergeMode::StackDim => per_layer,
    }
}

/// Extract a representation packet for one observation.
pub fn extract_representation(
    model: &VlmModel,
    window: &[u8],
    grid: usize,
    obs_hash: u64,
    cond: &Condition,
    run_seed: u64,
) -> Result<ReprPacket> {
    let vocab = Vocab::new();
    let prompt_tokens = if cond.image_only {
        Vec::new()
    } else {
        cond.prompt.tokens(&vocab, &cond.target)?
    };
    let fast = FastVlm::new(model);
    let mut st = fast.run_prefix(window, grid, &prompt_tokens)?;
    let decoded: Vec<TokenId> = if cond.image_only {
        Vec::new()
    } else {
        match cond.prompt.decode.scheme {
            DecodeScheme::None => Vec::new(),
            DecodeScheme::Greedy => fast.greedy_decode(&mut st, cond.prompt.decode.tokens),
            DecodeScheme::Sampled { temperature } => {
                let mut rng = decode_stream(run_seed, obs_hash, cond.prompt.id_hash());
                fast.sampled_decode(&mut st, cond.prompt.decode.tokens, temperature, &mut rng)
            }
        }
    };

    let d_model = model.config.d_model;
    let n_layers = model.config.layers;
    assert!(cond.layers <= n_layers);
    let n_img_raw = grid * grid;
    let prefix = n_img_raw + prompt_tokens.len();
    let n_dec = decoded.len();

    // Per selected layer: (pooled) image rows + prompt rows + decoded rows.
    // Decoded rows are the positions where decoded tokens were fed (the BEGIN
    // row is skipped).
    let mut layer_rows: Vec<Vec<f32>> = Vec::with_capacity(cond.layers);
    for l in (n_layers - cond.layers)..n_layers {
        let h = st.hidden_rows(l);
        let mut rows = Vec::new();
        let img = &h[0..n_img_raw * d_model];
        match cond.pool_kernel {
            Some(k) => rows.extend(average_pool_2d(img, grid, d_model, k)?),
            None => rows.extend_from_slice(img),
        }
        rows.extend_from_slice(&h[n_img_raw * d_model..prefix * d_model]);
        if n_dec > 0 {
            let start = (prefix + 1) * d_model;
            rows.extend_from_slice(&h[start..start + n_dec * d_model]);
        }
        layer_rows.push(rows);
    }

    let img_tokens = image_token_count(cond, grid);
    let tokens_per_layer = img_tokens + prompt_tokens.len() + n_dec;
    let (t, d, embedding) = match cond.merge {
        MergeMode::ConcatSeq => {
            let mut e = Vec::with_capacity(cond.layers * tokens_per_layer * d_model);
            for rows in &layer_rows {
                e.extend_from_slice(rows);
            }
            (cond.layers * tokens_per_layer, d_model, e)
        }
        MergeMode::StackDim => {
            let d = cond.layers * d_model;
            let mut e = Vec::with_capacity(tokens_per_layer * d);
            for tk in 0..tokens_per_layer {
                for rows in &layer_rows {
                    e.extend_from_slice(&rows[tk * d_model..(tk + 1) * d_model]);
                }
            }
            (tokens_per_layer, d, e)
        }
    };

    Ok(ReprPacket {
        t,
        d,
        embedding,
        mask: vec![true; t],
        segments: build_segments(cond, img_tokens, prompt_tokens.len(), n_dec),
        decoded_text: vocab.decode(&decoded),
        decoded,
        prompt_id: cond.prompt.id.clone(),
        model_hash: model.hash(),
        merge: cond.merge,
    })
}

/// Append the ground-truth oracle one-hot (left/middle/right/absent) as one
/// extra image-segment token.
pub fn append_oracle_feature(packet: &mut ReprPacket, one_hot: [f32; 4]) {
    let mut row = vec![0.0f32; packet.d];
    row[..4].copy_from_slice(&one_hot);
    packet.embedding.extend_from_slice(&row);
    packet.mask.push(true);
    packet.segments.push(SegLabel::Image);
    packet.t += 1;
}

/// Representation provider for one (model, condition), optionally backed by
/// the on-disk embedding cache.
pub struct Extractor<'m> {
    pub model: &'m VlmModel,
    pub cond: Condition,
    pub run_seed: u64,
    prompt_len: usize,
    cache: Option<ReprCache>,
}

impl<'m> Extractor<'m> {
    pub fn new(model: &'m VlmModel, cond: Condition, run_seed: u64) -> Result<Self> {
        let vocab = Vocab::new();
        let prompt_len = if cond.image_only {
            0
        } else {
            cond.prompt.tokens(&vocab, &cond.target)?.len()
        };
        Ok(Extractor {
            model,
            cond,
            run_seed,
            prompt_len,
            cache: None,
        })
    }

    pub fn with_cache(mut self, dir: &std::path::Path) -> Result<Self> {
        self.cache = Some(ReprCache::open(
            dir,
            self.model.hash(),
            &self.cond.prompt.id,
        )?);
        Ok(self)
    }

    pub fn packet(&mut self, window: &[u8], grid: usize, obs_hash: u64) -> Result<ReprPacket> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(obs_hash) {
                let vocab = Vocab::new();
                let img = image_token_count(&self.cond, grid);
                let n_dec = hit.decoded.len();
                return Ok(ReprPacket {
                    t: hit.t,
                    d: hit.d,
                    embedding: hit.embedding.clone(),
                    mask: hit.mask.clone(),
                    segments: build_segments(&self.cond, img, self.prompt_len, n_dec),
                    decoded_text: vocab.decode(&hit.decoded),
                    decoded: hit.decoded.clone(),
                    prompt_id: self.cond.prompt.id.clone(),
                    model_hash: self.model.hash(),
                    merge: self.cond.merge,
                });
            }
        }
        let packet =
            extract_representation(self.model, window, grid, obs_hash, &self.cond, self.run_seed)?;
        if let Some(cache) = &mut self.cache {
            cache.put(
                obs_hash,
                CachedPacket {
                    t: packet.t,
                    d: packet.d,
                    mask: packet.mask.clone(),
                    embedding: packet.embedding.clone(),
                    decoded: packet.decoded.clone(),
                },
            );
        }
        Ok(packet)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(cache) = &mut self.cache {
            cache.flush()?;
        }
        Ok(())
    }
}
