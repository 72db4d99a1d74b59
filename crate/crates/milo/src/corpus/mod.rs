//! Corpus handling: vocabularies, tokenization, synthetic generation,
//! chunking, frequency buckets, and domain sampling weights.

mod buckets;
mod cache;
mod domains;
mod zipf;

pub use buckets::{
    bucket_report, build_frequency_buckets, Bucket, FrequencyBuckets, DEFAULT_COVERAGE,
};
pub use cache::{load_token_cache, read_documents, save_token_cache, Document};
pub use domains::{compute_sampling_weights, sample_domain, Domain, DomainManifest};
pub use zipf::{generate_zipf_corpus, harmonic, zipf_probs, ZipfMarkov};

use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokenizeMode {
    Bytes,
    Words,
}

/// Bijective id <-> surface table with dense ids in [0, N).
#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_string: Vec<String>,
    string_to_id: HashMap<String, u32>,
    unk: Option<u32>,
    mode: TokenizeMode,
}

fn byte_surface(b: u8) -> String {
    if b.is_ascii_graphic() || b == b' ' {
        (b as char).to_string()
    } else {
        format!("\\x{b:02x}")
    }
}

impl Vocab {
    /// All 256 byte values; no unknowns can occur.
    pub fn bytes() -> Self {
        Self::build(
            (0..=255u8).map(byte_surface).collect(),
            None,
            TokenizeMode::Bytes,
        )
    }

    /// Whitespace words from `texts` by descending frequency (ties by
    /// ascending word), capped at `max_size` including the reserved UNK
    /// at id 0.
    pub fn words<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "word vocabulary needs room for UNK plus one word, got size {max_size}"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut by_freq: Vec<(&str, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut table = vec!["<unk>".to_string()];
        table.extend(
            by_freq
                .into_iter()
                .take(max_size - 1)
                .map(|(w, _)| w.to_string()),
        );
        Ok(Self::build(table, Some(0), TokenizeMode::Words))
    }

    /// Placeholder surfaces "t0".."t{n-1}" for generated token streams.
    pub fn synthetic(n: usize) -> Self {
        Self::build(
            (0..n).map(|i| format!("t{i}")).collect(),
            None,
            TokenizeMode::Words,
        )
    }

    fn build(id_to_string: Vec<String>, unk: Option<u32>, mode: TokenizeMode) -> Self {
        let string_to_id = id_to_string
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let v = Vocab {
            id_to_string,
            string_to_id,
            unk,
            mode,
        };
        debug_assert_eq!(
            v.string_to_id.len(),
            v.id_to_string.len(),
            "surfaces must be unique"
        );
        v
    }

    pub fn len(&self) -> usize {
        self.id_to_string.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_string.is_empty()
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.id_to_string.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, surface: &str) -> Option<u32> {
        self.string_to_id.get(surface).copied()
    }
}

/// Deterministic text -> token ids under the vocab's mode.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    match vocab.mode {
        TokenizeMode::Bytes => Ok(text.bytes().map(u32::from).collect()),
        TokenizeMode::Words => text
            .split_whitespace()
            .map(|w| {
                vocab.id(w).or(vocab.unk).ok_or_else(|| Error::Format {
                    what: "tokenize",
                    detail: format!("word {w:?} is out of vocabulary and no UNK is reserved"),
                })
            })
            .collect(),
    }
}

/// Per-token-id occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CorpusStats {
    pub fn from_tokens(tokens: &[u32], vocab_size: usize) -> Result<Self> {
        let mut counts = vec![0u64; vocab_size];
        for &t in tokens {
            let slot = counts
                .get_mut(t as usize)
                .ok_or(Error::TokenOutOfRange { id: t, vocab_size })?;
            *slot += 1;
        }
        Ok(CorpusStats {
            counts,
            total: tokens.len() as u64,
        })
    }
}

/// Non-overlapping fixed-length windows; the tail shorter than `seq_len`
/// is dropped.
pub fn chunk(tokens: &[u32], seq_len: usize) -> Result<Vec<Vec<u32>>> {
    if seq_len < 2 {
        return Err(Error::InvalidConfig(format!(
            "chunking needs seq_len of at least 2 for input/target pairs, got {seq_len}"
        )));
    }
    Ok(tokens.chunks_exact(seq_len).map(|c| c.to_vec()).collect())
}
