use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const CLS: u32 = 4;

const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<cls>"];

/// Word-level vocabulary with five reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// The whitespace-joined form `detokenize(tokenize(s))` reproduces.
pub fn normalized(text: &str) -> String {
    normalize_words(text).join(" ")
}

impl Vocabulary {
    /// Builds a vocabulary from a set of texts. Words are sorted so the id
    /// assignment does not depend on text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(normalize_words).collect();
        words.sort();
        words.dedup();
        Self::from_words(words).expect("sorted dedup words are unique")
    }

    /// Reserved tokens first, then `words` in the given order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            if ids.contains_key(&w) {
                return Err(Error::Config(format!("duplicate vocabulary token {w:?}")));
            }
            ids.insert(w.clone(), tokens.len() as u32);
            tokens.push(w);
        }
        Ok(Self { tokens, ids })
    }

    /// Inverse of [`tokens`](Self::tokens): the reserved prefix must be intact.
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED.iter()).any(|(a, b)| a != b) {
            return Err(Error::Config("token list lacks the reserved prefix".into()));
        }
        Self::from_words(tokens[RESERVED.len()..].iter().cloned())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.ids.contains_key(word)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS] + word ids + [EOS]`; unknown words map to `UNK`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        out.extend(normalize_words(text).iter().map(|w| self.id(w)));
        out.push(EOS);
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize) for in-vocabulary text. Stops at
    /// the first `EOS`; skips `BOS`, `PAD` and `CLS`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS | CLS => continue,
                _ => words.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        words.join(" ")
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        Self::from_words(lines[RESERVED.len()..].iter().map(|s| s.to_string()))
    }
}
