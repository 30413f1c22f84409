//! Character-level tokenization: vocabulary construction, encode/decode,
//! JSON persistence, and train/val batch sampling.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    /// `encode` met a character the vocabulary does not contain.
    UnknownChar { ch: char, position: usize },
    /// `decode` met an id outside the vocabulary.
    IdOutOfRange { id: u32, size: usize },
    /// A persisted vocabulary failed to parse or validate.
    BadVocabJson(String),
    /// A split has fewer than block_size + 1 tokens, so no window fits.
    SplitTooShort { available: usize, needed: usize },
}

impl fmt::Display for TokenizerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerError::UnknownChar { ch, position } => {
                write!(f, "unknown character {ch:?} at position {position}")
            }
            TokenizerError::IdOutOfRange { id, size } => {
                write!(f, "token id {id} out of range for vocabulary of size {size}")
            }
            TokenizerError::BadVocabJson(msg) => write!(f, "invalid vocabulary JSON: {msg}"),
            TokenizerError::SplitTooShort { available, needed } => {
                write!(f, "split has {available} tokens, need at least {needed}")
            }
        }
    }
}

impl std::error::Error for TokenizerError {}

/// Bijection between the distinct characters of a corpus and dense ids.
/// Ids are assigned in Unicode code point order, so they are a pure
/// function of the character set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    id_of: BTreeMap<char, u32>,
    char_of: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Vocab {
        let chars: std::collections::BTreeSet<char> = text.chars().collect();
        let char_of: Vec<char> = chars.into_iter().collect();
        let id_of = char_of
            .iter()
            .enumerate()
            .map(|(i, &ch)| (ch, i as u32))
            .collect();
        Vocab { id_of, char_of }
    }

    pub fn size(&self) -> usize {
        self.char_of.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TokenizerError> {
        text.chars()
            .enumerate()
            .map(|(position, ch)| {
                self.id_of
                    .get(&ch)
                    .copied()
                    .ok_or(TokenizerError::UnknownChar { ch, position })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        ids.iter()
            .map(|&id| {
                self.char_of
                    .get(id as usize)
                    .copied()
                    .ok_or(TokenizerError::IdOutOfRange {
                        id,
                        size: self.size(),
                    })
            })
            .collect()
    }

    /// JSON object mapping each character to its id, plus a `"size"` entry.
    pub fn to_json(&self) -> String {
        let mut map = serde_json::Map::new();
        for (&ch, &id) in &self.id_of {
            map.insert(ch.to_string(), serde_json::json!(id));
        }
        map.insert("size".into(), serde_json::json!(self.size()));
        serde_json::Value::Object(map).to_string()
    }

    pub fn from_json(text: &str) -> Result<Vocab, TokenizerError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| TokenizerError::BadVocabJson(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| TokenizerError::BadVocabJson("expected an object".into()))?;
        let size = obj
            .get("size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| TokenizerError::BadVocabJson("missing \"size\"".into()))?
            as usize;
        let mut char_of = vec![None; size];
        for (key, val) in obj {
            if key == "size" {
                continue;
            }
            let mut chars = key.chars();
            let (ch, rest) = (chars.next(), chars.next());
            let ch = match (ch, rest) {
                (Some(c), None) => c,
                _ => {
                    return Err(TokenizerError::BadVocabJson(format!(
                        "key {key:?} is not a single character"
                    )))
                }
            };
            let id = val.as_u64().ok_or_else(|| {
                TokenizerError::BadVocabJson(format!("id for {key:?} is not an integer"))
            })? as usize;
            if id >= size || char_of[id].is_some() {
                return Err(TokenizerError::BadVocabJson(format!(
                    "id {id} for {key:?} is out of range or duplicated"
                )));
            }
            char_of[id] = Some(ch);
        }
        let char_of: Option<Vec<char>> = char_of.into_iter().collect();
        let char_of = char_of
            .ok_or_else(|| TokenizerError::BadVocabJson("ids do not cover 0..size".into()))?;
        let id_of = char_of
            .iter()
            .enumerate()
            .map(|(i, &ch)| (ch, i as u32))
            .collect();
        Ok(Vocab { id_of, char_of })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

/// Encoded corpus with a deterministic prefix split: the first 90% of tokens
/// are the training split, the remainder validation.
#[derive(Debug, Clone)]
pub struct TokenDataset {
    tokens: Vec<u32>,
    n_train: usize,
}

impl TokenDataset {
    pub fn new(tokens: Vec<u32>) -> TokenDataset {
        let n_train = tokens.len() * 9 / 10;
        TokenDataset { tokens, n_train }
    }

    pub fn from_text(text: &str, vocab: &Vocab) -> Result<TokenDataset, TokenizerError> {
        Ok(TokenDataset::new(vocab.encode(text)?))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.tokens.len() - self.n_train,
        }
    }

    fn split_tokens(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.tokens[..self.n_train],
            Split::Val => &self.tokens[self.n_train..],
        }
    }

    /// Samples `b` windows of length `t` uniformly from the split. Returns
    /// (inputs, shifted-by-one targets), each b*t ids in row-major order.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        split: Split,
        b: usize,
        t: usize,
        rng: &mut R,
    ) -> Result<(Vec<usize>, Vec<usize>), TokenizerError> {
        let tokens = self.split_tokens(split);
        if tokens.len() < t + 1 {
            return Err(TokenizerError::SplitTooShort {
                available: tokens.len(),
                needed: t + 1,
            });
        }
        let mut xs = Vec::with_capacity(b * t);
        let mut ys = Vec::with_capacity(b * t);
        for _ in 0..b {
            let start = rng.gen_range(0..tokens.len() - t);
            xs.extend(tokens[start..start + t].iter().map(|&v| v as usize));
            ys.extend(tokens[start + 1..start + t + 1].iter().map(|&v| v as usize));
        }
        Ok((xs, ys))
    }
}
