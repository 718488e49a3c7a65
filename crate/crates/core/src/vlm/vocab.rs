//! Closed synthetic vocabulary. No subword tokenization: one id per word.

use std::collections::HashMap;

use thiserror::Error;

pub type TokenId = u16;

pub const PAD: TokenId = 0;
pub const BEGIN: TokenId = 1;
pub const END: TokenId = 2;
pub const IMG: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<begin>", "<end>", "<img>"];

// Word list; order defines ids after the reserved block.
const WORDS: &[&str] = &[
    // answers
    "yes", "no", "left", "middle", "right", "absent",
    // question scaffolding
    "is", "there", "a", "the", "in", "this", "image", "what", "room", "where",
    "would", "be", "found", "here", "why", "or", "not", "?", "-", ".",
    // agency / actions
    "i", "can", "attack", "move", "turn", "use", "stop", "should", "do",
    "want", "to", "fight", "go", "forward",
    // entities
    "spider", "cow", "sheep", "pig", "chicken", "zombie", "enderman", "pigman",
    "blob", "creature", "animal",
    // styles and colors
    "dark", "light", "black", "white", "world", "style",
    // rooms and furniture
    "bathroom", "bedroom", "living", "kitchen", "hallway",
    "toilet", "bed", "sofa", "table", "belongs",
    // connective / rationale filler
    "and", "of", "it", "you", "see", "are", "s", "at", "near", "far",
    // terrain
    "floor", "wall", "rock", "tree", "bush", "door", "house", "grass", "water",
    // misc padding of the id space toward ~96
    "milk", "shear", "strike", "find", "goal", "look", "walk", "jump",
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("unknown word: {0:?}")]
    UnknownWord(String),
    #[error("token id {0} out of range")]
    BadId(TokenId),
}

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(WORDS.iter().map(|s| s.to_string()));
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Vocab { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.ids
            .get(word)
            .copied()
            .unwrap_or_else(|| panic!("word {word:?} missing from the closed vocabulary"))
    }

    pub fn try_id(&self, word: &str) -> Result<TokenId, VocabError> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str, VocabError> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(VocabError::BadId(id))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace().map(|w| self.try_id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter_map(|&id| self.word(id).ok())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Plain JSON list of token strings, index = id.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.words
                .iter()
                .map(|w| serde_json::Value::String(w.clone()))
                .collect(),
        )
    }
}
