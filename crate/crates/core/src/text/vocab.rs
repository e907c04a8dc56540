use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CfqaError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
pub const CHAR_PAD: usize = 0;
pub const CHAR_UNK: usize = 1;

const WORD_RESERVED: [&str; 3] = ["<pad>", "<unk>", "<sep>"];
const CHAR_RESERVED: usize = 2;

/// Word and character index spaces. Ids are assigned in first-occurrence
/// order after the reserved entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    words: Vec<String>,
    word_ids: HashMap<String, usize>,
    chars: Vec<char>,
    char_ids: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    chars: Vec<char>,
}

impl From<VocabFile> for Vocab {
    fn from(f: VocabFile) -> Self {
        let mut v = Vocab::empty();
        for w in f.words.into_iter().skip(WORD_RESERVED.len()) {
            v.add_word(&w);
        }
        for c in f.chars {
            v.add_char(c);
        }
        v
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        Self {
            words: v.words,
            chars: v.chars,
        }
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::empty()
    }
}

impl Vocab {
    pub fn empty() -> Self {
        let words: Vec<String> = WORD_RESERVED.iter().map(|s| s.to_string()).collect();
        let word_ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self {
            words,
            word_ids,
            chars: Vec::new(),
            char_ids: HashMap::new(),
        }
    }

    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::empty();
        for t in tokens {
            v.add_word(t);
        }
        v
    }

    pub fn add_word(&mut self, w: &str) -> usize {
        for c in w.chars() {
            self.add_char(c);
        }
        if let Some(&id) = self.word_ids.get(w) {
            return id;
        }
        let id = self.words.len();
        self.words.push(w.to_string());
        self.word_ids.insert(w.to_string(), id);
        id
    }

    fn add_char(&mut self, c: char) {
        if !self.char_ids.contains_key(&c) {
            self.char_ids.insert(c, self.chars.len() + CHAR_RESERVED);
            self.chars.push(c);
        }
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_chars(&self) -> usize {
        self.chars.len() + CHAR_RESERVED
    }

    pub fn id(&self, w: &str) -> usize {
        self.word_ids.get(w).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_ids.get(&c).copied().unwrap_or(CHAR_UNK)
    }

    /// Character ids of `w`, padded or truncated to `width`.
    pub fn char_ids(&self, w: &str, width: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = w.chars().take(width).map(|c| self.char_id(c)).collect();
        ids.resize(width, CHAR_PAD);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("vocab serializes");
        std::fs::write(path, json).map_err(|e| CfqaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CfqaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CfqaError::Input(format!("{}: {e}", path.display())))
    }
}
