//! Byte-level BPE: training, encoding to fixed-length id/mask sequences, and
//! the `tokenizer.json` file format.
//!
//! Text is split on whitespace; every chunk after the first is prefixed with
//! a space byte, which acts as the word-boundary marker and decodes back to a
//! single space. Merges never cross chunk boundaries.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
/// Specials plus the 256 byte tokens.
pub const BASE_VOCAB: usize = 260;
pub const DEFAULT_VOCAB_SIZE: usize = 8000;
pub const DEFAULT_MAX_LEN: usize = 64;
/// Longest merged token, in bytes, that training will create.
pub const DEFAULT_MAX_TOKEN_BYTES: usize = 12;
pub const FORMAT_VERSION: u32 = 1;

const SPECIAL_NAMES: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];
const BOUNDARY: u8 = b' ';
const BYTE_ENCODING: &str = "bytes-to-unicode: bytes 0x21-0x7E, 0xA1-0xAC and 0xAE-0xFF map to the same code point; the remaining 68 bytes map to U+0100.. in ascending byte order (space is U+0120)";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size {0} is below the base size of 260")]
    VocabTooSmall(usize),
    #[error("token bytes do not form valid UTF-8")]
    InvalidUtf8,
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("malformed tokenizer file: {0}")]
    Format(String),
    #[error("tokenizer I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed-length model input: `[CLS] tokens… [SEP] [PAD]…`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub overflow: bool,
}

impl Encoding {
    /// Number of non-PAD positions.
    pub fn len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    merges: Vec<(u32, u32)>,
    // id → raw bytes; specials map to empty.
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

/// Outcome of [`train`]. `shortfall` is set when the corpus ran out of
/// repeating pairs before reaching the requested size.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: TokenizerModel,
    pub requested: usize,
    pub shortfall: Option<usize>,
}

impl TrainReport {
    /// Fails with the reached size if the target was unreachable.
    pub fn require_full(self) -> Result<TokenizerModel, String> {
        match self.shortfall {
            None => Ok(self.model),
            Some(missing) => Err(format!(
                "corpus too small: reached {} of {} tokens ({missing} short)",
                self.model.vocab_size(),
                self.requested
            )),
        }
    }
}

fn chunks(text: &str) -> impl Iterator<Item = Vec<u8>> + '_ {
    text.split_whitespace().enumerate().map(|(i, chunk)| {
        let mut bytes = Vec::with_capacity(chunk.len() + 1);
        if i > 0 {
            bytes.push(BOUNDARY);
        }
        bytes.extend_from_slice(chunk.as_bytes());
        bytes
    })
}

fn byte_id(b: u8) -> u32 {
    NUM_SPECIALS + b as u32
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    merged: Vec<u8>,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap: higher count first, then the lexicographically smaller
        // merged string, then the smaller id pair.
        self.count
            .cmp(&other.count)
            .then_with(|| other.merged.cmp(&self.merged))
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy most-frequent-pair BPE over whitespace chunks of `corpus`, with
/// merged tokens capped at [`DEFAULT_MAX_TOKEN_BYTES`].
pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<TrainReport, TokenizerError> {
    train_with_limit(corpus, vocab_size, DEFAULT_MAX_TOKEN_BYTES)
}

/// As [`train`], but a pair is only merged if the merged token has at most
/// `max_token_bytes` bytes.
///
/// A pair whose merged bytes already exist as a token is never merged, so
/// every merge adds exactly one vocabulary entry.
pub fn train_with_limit<S: AsRef<str>>(
    corpus: &[S],
    vocab_size: usize,
    max_token_bytes: usize,
) -> Result<TrainReport, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if vocab_size < BASE_VOCAB {
        return Err(TokenizerError::VocabTooSmall(vocab_size));
    }

    let mut freq: HashMap<Vec<u8>, i64> = HashMap::new();
    for text in corpus {
        for chunk in chunks(text.as_ref()) {
            *freq.entry(chunk).or_default() += 1;
        }
    }
    let mut word_list: Vec<(Vec<u8>, i64)> = freq.into_iter().collect();
    word_list.sort_unstable();
    let mut words: Vec<Vec<u32>> = word_list
        .iter()
        .map(|(bytes, _)| bytes.iter().map(|&b| byte_id(b)).collect())
        .collect();
    let counts: Vec<i64> = word_list.iter().map(|(_, c)| *c).collect();

    let mut model = TokenizerModel::base();
    let mut known: HashSet<Vec<u8>> = model.tokens.iter().skip(NUM_SPECIALS as usize).cloned().collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurs: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (w, symbols) in words.iter().enumerate() {
        for pair in symbols.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_default() += counts[w];
            occurs.entry(key).or_default().insert(w);
        }
    }

    let merged_bytes = |model: &TokenizerModel, (a, b): (u32, u32)| -> Vec<u8> {
        let mut m = model.tokens[a as usize].clone();
        m.extend_from_slice(&model.tokens[b as usize]);
        m
    };

    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&pair, &count)| Candidate {
            count,
            merged: merged_bytes(&model, pair),
            pair,
        })
        .collect();

    while model.vocab_size() < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            if current > 0 {
                heap.push(Candidate {
                    count: current,
                    ..top
                });
            }
            continue;
        }
        if current < 2 {
            break;
        }
        if known.contains(&top.merged) || top.merged.len() > max_token_bytes {
            continue;
        }

        let new_id = model.tokens.len() as u32;
        known.insert(top.merged.clone());
        model.push_merge(top.pair, top.merged);

        let mut affected: Vec<usize> = occurs
            .remove(&top.pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for w in affected {
            let symbols = &mut words[w];
            if !symbols.windows(2).any(|p| (p[0], p[1]) == top.pair) {
                continue;
            }
            for pair in symbols.windows(2) {
                let key = (pair[0], pair[1]);
                *pair_counts.get_mut(&key).expect("counted pair") -= counts[w];
                touched.insert(key);
            }
            *symbols = merge_pair(symbols, top.pair, new_id);
            for pair in symbols.windows(2) {
                let key = (pair[0], pair[1]);
                *pair_counts.entry(key).or_default() += counts[w];
                occurs.entry(key).or_default().insert(w);
                touched.insert(key);
            }
        }
        pair_counts.remove(&top.pair);
        let mut touched: Vec<(u32, u32)> = touched.into_iter().collect();
        touched.sort_unstable();
        for pair in touched {
            if let Some(&count) = pair_counts.get(&pair) {
                if count > 0 && pair != top.pair {
                    heap.push(Candidate {
                        count,
                        merged: merged_bytes(&model, pair),
                        pair,
                    });
                }
            }
        }
    }

    let shortfall = (model.vocab_size() < vocab_size).then(|| vocab_size - model.vocab_size());
    if let Some(missing) = shortfall {
        log::warn!(
            "tokenizer corpus too small: reached {} of {vocab_size} tokens ({missing} short)",
            model.vocab_size()
        );
    }
    Ok(TrainReport {
        model,
        requested: vocab_size,
        shortfall,
    })
}

fn merge_pair(symbols: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

impl TokenizerModel {
    /// Specials and byte tokens only.
    pub fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = vec![Vec::new(); NUM_SPECIALS as usize];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        TokenizerModel {
            merges: Vec::new(),
            tokens,
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, pair: (u32, u32), merged: Vec<u8>) {
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        self.tokens.push(merged);
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    fn encode_chunk(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = bytes.iter().map(|&b| byte_id(b)).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            symbols = merge_pair(&symbols, pair, rank + BASE_VOCAB as u32);
        }
        out.extend_from_slice(&symbols);
    }

    /// Content token ids without specials or padding.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for chunk in chunks(text) {
            self.encode_chunk(&chunk, &mut ids);
        }
        ids
    }

    pub fn encode(&self, text: &str, max_len: usize) -> Encoding {
        assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
        let content = self.tokenize(text);
        let room = max_len - 2;
        let overflow = content.len() > room;
        let kept = &content[..content.len().min(room)];
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend_from_slice(kept);
        ids.push(SEP);
        let used = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; used];
        attention_mask.resize(max_len, 0);
        Encoding {
            ids,
            attention_mask,
            overflow,
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id < NUM_SPECIALS {
                continue;
            }
            let tok = self.token_bytes(id).ok_or(TokenizerError::UnknownId(id))?;
            bytes.extend_from_slice(tok);
        }
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }

    fn token_string(&self, id: u32) -> String {
        if id < NUM_SPECIALS {
            SPECIAL_NAMES[id as usize].to_string()
        } else {
            escape_bytes(&self.tokens[id as usize])
        }
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            byte_encoding: BYTE_ENCODING.to_string(),
            specials: SPECIAL_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i as u32))
                .collect(),
            merges: self
                .merges
                .iter()
                .map(|&(a, b)| (self.token_string(a), self.token_string(b)))
                .collect(),
            vocab: OrderedVocab(
                (0..self.vocab_size() as u32)
                    .map(|id| (self.token_string(id), id))
                    .collect(),
            ),
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: TokenizerFile =
            serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(TokenizerError::Format(format!(
                "unsupported version {}",
                file.version
            )));
        }
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            let found = file.specials.iter().find(|(n, _)| n == name).map(|(_, id)| *id);
            if found != Some(i as u32) {
                return Err(TokenizerError::Format(format!("special {name} must have id {i}")));
            }
        }
        let by_string: HashMap<&str, u32> =
            file.vocab.0.iter().map(|(s, id)| (s.as_str(), *id)).collect();
        let mut model = TokenizerModel::base();
        for (left, right) in &file.merges {
            let lookup = |s: &str| {
                by_string
                    .get(s)
                    .copied()
                    .filter(|&id| (id as usize) < model.vocab_size() && id >= NUM_SPECIALS)
                    .ok_or_else(|| TokenizerError::Format(format!("merge references unknown token `{s}`")))
            };
            let pair = (lookup(left)?, lookup(right)?);
            let mut merged = model.tokens[pair.0 as usize].clone();
            merged.extend_from_slice(&model.tokens[pair.1 as usize]);
            model.push_merge(pair, merged);
        }
        if file.vocab.0.len() != model.vocab_size() {
            return Err(TokenizerError::Format(format!(
                "vocab has {} entries but merges imply {}",
                file.vocab.0.len(),
                model.vocab_size()
            )));
        }
        for (s, id) in &file.vocab.0 {
            if (*id as usize) >= model.vocab_size() || &model.token_string(*id) != s {
                return Err(TokenizerError::Format(format!("vocab entry `{s}` -> {id} is inconsistent")));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    byte_encoding: String,
    #[serde(with = "pairs_as_map")]
    specials: Vec<(String, u32)>,
    merges: Vec<(String, String)>,
    vocab: OrderedVocab,
}

// Token → id map that keeps id order on disk.
struct OrderedVocab(Vec<(String, u32)>);

impl Serialize for OrderedVocab {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        pairs_as_map::serialize(&self.0, serializer)
    }
}

impl<'de> Deserialize<'de> for OrderedVocab {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        pairs_as_map::deserialize(deserializer).map(OrderedVocab)
    }
}

mod pairs_as_map {
    use super::*;

    pub fn serialize<S: Serializer>(pairs: &[(String, u32)], serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(pairs.len()))?;
        for (k, v) in pairs {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<(String, u32)>, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = Vec<(String, u32)>;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of token strings to ids")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                let mut seen = HashSet::new();
                while let Some((k, v)) = access.next_entry::<String, u32>()? {
                    if !seen.insert(k.clone()) {
                        return Err(de::Error::custom(format!("duplicate token `{k}`")));
                    }
                    out.push((k, v));
                }
                Ok(out)
            }
        }
        deserializer.deserialize_map(PairVisitor)
    }
}

fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next = 0u32;
    for b in 0..=255u8 {
        let direct = matches!(b, 0x21..=0x7E | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if direct {
            char::from(b)
        } else {
            let c = char::from_u32(0x100 + next).expect("valid code point");
            next += 1;
            c
        };
    }
    table
}

fn escape_bytes(bytes: &[u8]) -> String {
    let table = byte_to_char_table();
    bytes.iter().map(|&b| table[b as usize]).collect()
}

#[cfg(test)]
fn unescape(s: &str) -> Option<Vec<u8>> {
    let table = byte_to_char_table();
    s.chars()
        .map(|c| table.iter().position(|&t| t == c).map(|p| p as u8))
        .collect()
}
