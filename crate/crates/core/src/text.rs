//! Text conditioning: a hashed-vocabulary toy encoder and a file-backed
//! encoder for embeddings computed offline.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::Axis;
use serde::Deserialize;

use crate::autograd::Mat;
use crate::error::{Error, Result};

pub const MAX_WORDS: usize = 20;
pub const DEFAULT_VOCAB: usize = 4096;
/// Table row reserved for the empty prompt.
pub const NULL_ID: usize = 0;

/// Encoded prompt: pooled vector plus per-word vectors for cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    /// `1 × d_text`
    pub pooled: Mat,
    /// `n × d_text`, `n ≤ MAX_WORDS`
    pub tokens: Mat,
    pub is_null: bool,
    /// Vocabulary rows behind `tokens` when they come from a trainable table.
    pub ids: Option<Vec<usize>>,
}

impl TextContext {
    pub fn dim(&self) -> usize {
        self.pooled.ncols()
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

pub trait TextEncoder: Send + Sync {
    fn encode(&self, text: &str) -> TextContext;
    fn dim(&self) -> usize;
}

/// Lowercased words with punctuation stripped, at most [`MAX_WORDS`].
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .take(MAX_WORDS)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stable bucket in `1..vocab`; row 0 is never returned.
pub fn word_id(word: &str, vocab: usize) -> usize {
    (fnv1a(word.as_bytes()) % (vocab as u64 - 1)) as usize + 1
}

/// Row ids for a prompt; the empty prompt maps to `[NULL_ID]`.
pub fn token_ids(text: &str, vocab: usize) -> Vec<usize> {
    let words = tokenize(text);
    if words.is_empty() {
        vec![NULL_ID]
    } else {
        words.iter().map(|w| word_id(w, vocab)).collect()
    }
}

/// Looks words up in a `vocab × d_text` table by hash bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    table: Mat,
}

impl ToyEncoder {
    pub fn new(table: Mat) -> Result<Self> {
        if table.nrows() < 2 || table.ncols() == 0 {
            return Err(Error::config("embedding table needs at least 2 rows and 1 column"));
        }
        Ok(Self { table })
    }

    pub fn vocab(&self) -> usize {
        self.table.nrows()
    }

    pub fn table(&self) -> &Mat {
        &self.table
    }
}

impl TextEncoder for ToyEncoder {
    fn encode(&self, text: &str) -> TextContext {
        let ids = token_ids(text, self.vocab());
        let tokens = self.table.select(Axis(0), &ids);
        let pooled = tokens.mean_axis(Axis(0)).expect("at least one id").insert_axis(Axis(0));
        TextContext {
            pooled,
            tokens,
            is_null: ids == [NULL_ID],
            ids: Some(ids),
        }
    }

    fn dim(&self) -> usize {
        self.table.ncols()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRecord {
    text: String,
    pooled: Vec<f64>,
    tokens: Vec<Vec<f64>>,
}

/// Precomputed embeddings keyed by prompt text.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    records: HashMap<String, (Mat, Mat)>,
}

impl EmbeddingFile {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<(&Mat, &Mat)> {
        self.records.get(text.trim()).map(|(p, t)| (p, t))
    }
}

/// Reads JSONL records `{"text", "pooled", "tokens"}`. Later duplicates win.
pub fn load_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_file(&body, &path.display().to_string())
}

pub fn parse_embedding_file(body: &str, source: &str) -> Result<EmbeddingFile> {
    let mut file = EmbeddingFile::default();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = || format!("{source}:{}", i + 1);
        let rec: EmbeddingRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(at(), e.to_string()))?;
        if rec.pooled.is_empty() {
            return Err(Error::parse(at(), "empty pooled vector"));
        }
        if file.dim == 0 {
            file.dim = rec.pooled.len();
        }
        if rec.pooled.len() != file.dim {
            return Err(Error::parse(
                at(),
                format!("pooled has {} values, expected {}", rec.pooled.len(), file.dim),
            ));
        }
        if let Some(k) = rec.tokens.iter().position(|t| t.len() != file.dim) {
            return Err(Error::parse(
                at(),
                format!("token {k} has {} values, expected {}", rec.tokens[k].len(), file.dim),
            ));
        }
        let n = rec.tokens.len().min(MAX_WORDS);
        let pooled = Mat::from_shape_vec((1, file.dim), rec.pooled).expect("checked length");
        let tokens = Mat::from_shape_vec(
            (n, file.dim),
            rec.tokens.into_iter().take(n).flatten().collect(),
        )
        .expect("checked lengths");
        let key = rec.text.trim().to_string();
        if file.records.insert(key.clone(), (pooled, tokens)).is_some() {
            warn!("{}: duplicate embedding for {key:?}, keeping the later record", at());
        }
    }
    Ok(file)
}

/// Serves stored embeddings, falling back to a toy encoder for unknown prompts.
#[derive(Debug, Clone)]
pub struct FileEncoder {
    file: EmbeddingFile,
    fallback: ToyEncoder,
}

impl FileEncoder {
    pub fn new(file: EmbeddingFile, fallback: ToyEncoder) -> Result<Self> {
        if !file.is_empty() && file.dim() != fallback.dim() {
            return Err(Error::config(format!(
                "embedding file has width {}, model expects {}",
                file.dim(),
                fallback.dim()
            )));
        }
        Ok(Self { file, fallback })
    }
}

impl TextEncoder for FileEncoder {
    fn encode(&self, text: &str) -> TextContext {
        match self.file.get(text) {
            Some((pooled, tokens)) => TextContext {
                pooled: pooled.clone(),
                tokens: tokens.clone(),
                is_null: text.trim().is_empty(),
                ids: None,
            },
            None => {
                if !text.trim().is_empty() {
                    warn!("no stored embedding for {text:?}, using the hashed encoder");
                }
                self.fallback.encode(text)
            }
        }
    }

    fn dim(&self) -> usize {
        self.fallback.dim()
    }
}
