//! Corpus types, label vocabularies, batch encoding and file formats.

mod io;
mod synth;

pub use io::{
    load_corpus, load_teacher_embeddings, read_utterances, write_teacher_embeddings,
    write_utterances, Split, TeacherEmbedding,
};
pub use synth::{gen_synthetic, SynthConfig, SyntheticCorpus};

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Target value for positions excluded from the slot loss.
pub const DEFAULT_IGNORE_INDEX: i64 = -100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("utterance {id}: invalid BIO sequence: {msg}")]
    Bio { id: String, msg: String },
    #[error("utterance {id}: {msg}")]
    Invalid { id: String, msg: String },
    #[error("duplicate id {id}")]
    DuplicateId { id: String },
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("embedding {id}: expected dimension {expected}, got {got}")]
    Dimension {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("cannot encode an empty batch")]
    EmptyBatch,
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// One tokenized utterance with its gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(rename = "slots")]
    pub slot_tags: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(DataError::Invalid {
                id: self.id.clone(),
                msg: "no tokens".into(),
            });
        }
        if self.tokens.len() != self.slot_tags.len() {
            return Err(DataError::Invalid {
                id: self.id.clone(),
                msg: format!(
                    "{} tokens but {} slot tags",
                    self.tokens.len(),
                    self.slot_tags.len()
                ),
            });
        }
        validate_bio(&self.slot_tags).map_err(|msg| DataError::Bio {
            id: self.id.clone(),
            msg,
        })
    }
}

/// Splits a tag into its prefix and type, e.g. `B-song` into `('B', "song")`.
pub fn parse_tag(tag: &str) -> Option<(char, &str)> {
    if tag == "O" {
        return Some(('O', ""));
    }
    let (prefix, ty) = tag.split_once('-')?;
    match prefix {
        "B" | "I" if !ty.is_empty() => Some((prefix.chars().next()?, ty)),
        _ => None,
    }
}

/// Every tag is `O`, `B-X` or `I-X`, and every `I-X` follows `B-X` or `I-X`.
pub fn validate_bio(tags: &[String]) -> std::result::Result<(), String> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, ty) = parse_tag(tag).ok_or_else(|| format!("malformed tag {tag:?} at {i}"))?;
        match prefix {
            'I' if prev != Some(ty) => {
                return Err(format!("{tag:?} at {i} does not continue a {ty} chunk"));
            }
            'O' => prev = None,
            _ => prev = Some(ty),
        }
    }
    Ok(())
}

/// A bijective string ↔ index map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn get(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.items[i]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(items: Vec<String>) -> std::result::Result<Self, String> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, s) in items.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {s:?}"));
            }
        }
        Ok(Self { items, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

/// Intent, slot-tag and token vocabularies built from a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMaps {
    pub intents: Vocab,
    pub slots: Vocab,
    pub tokens: Vocab,
}

impl LabelMaps {
    /// Sorted label sets, so the result does not depend on utterance order.
    /// Tokens start after the reserved `PAD` and `UNK` entries.
    pub fn build(train: &[Utterance]) -> Self {
        let mut intents = BTreeSet::new();
        let mut slots = BTreeSet::new();
        let mut tokens = BTreeSet::new();
        for u in train {
            intents.insert(u.intent.clone());
            slots.extend(u.slot_tags.iter().cloned());
            tokens.extend(u.tokens.iter().cloned());
        }
        tokens.remove(PAD_TOKEN);
        tokens.remove(UNK_TOKEN);
        let tokens: Vec<String> = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(tokens)
            .collect();
        Self {
            intents: Vocab::try_from(intents.into_iter().collect::<Vec<_>>()).expect("set"),
            slots: Vocab::try_from(slots.into_iter().collect::<Vec<_>>()).expect("set"),
            tokens: Vocab::try_from(tokens).expect("set"),
        }
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.get(token).unwrap_or(UNK_ID)
    }
}

/// How labels missing from the training vocabularies are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Unknown labels are an error (training).
    Strict,
    /// Unknown labels become the ignore index (evaluation).
    Lenient,
}

/// A padded batch. `L` is the longest utterance in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub ids: Vec<String>,
    /// Row-major `[d_b × L]`, `PAD_ID` beyond each utterance.
    pub token_ids: Vec<usize>,
    /// `[d_b × L]` of 0/1.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub intent_targets: Vec<i64>,
    /// Row-major `[d_b × L]`, `ignore_index` at padded positions.
    pub slot_targets: Vec<i64>,
    pub ignore_index: i64,
}

impl EncodedBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.mask.last_dim()
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    pub fn token(&self, b: usize, t: usize) -> usize {
        self.token_ids[b * self.max_len() + t]
    }

    /// Token strings at valid positions, sample by sample.
    pub fn decode_tokens(&self, maps: &LabelMaps) -> Vec<Vec<String>> {
        (0..self.batch_size())
            .map(|b| {
                (0..self.lengths[b])
                    .map(|t| maps.tokens.name(self.token(b, t)).to_string())
                    .collect()
            })
            .collect()
    }

    /// Pads every row to `len` (must be at least the current width).
    pub fn padded_to(&self, len: usize) -> EncodedBatch {
        assert!(len >= self.max_len());
        let old = self.max_len();
        let n = self.batch_size();
        let mut token_ids = vec![PAD_ID; n * len];
        let mut slot_targets = vec![self.ignore_index; n * len];
        let mut mask = vec![0.0; n * len];
        for b in 0..n {
            token_ids[b * len..b * len + old]
                .copy_from_slice(&self.token_ids[b * old..(b + 1) * old]);
            slot_targets[b * len..b * len + old]
                .copy_from_slice(&self.slot_targets[b * old..(b + 1) * old]);
            mask[b * len..b * len + self.lengths[b]].fill(1.0);
        }
        EncodedBatch {
            ids: self.ids.clone(),
            token_ids,
            mask: Tensor::new(vec![n, len], mask).expect("mask shape"),
            lengths: self.lengths.clone(),
            intent_targets: self.intent_targets.clone(),
            slot_targets,
            ignore_index: self.ignore_index,
        }
    }
}

pub fn encode_batch(
    utts: &[&Utterance],
    maps: &LabelMaps,
    policy: LabelPolicy,
    ignore_index: i64,
) -> Result<EncodedBatch> {
    if utts.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    let n = utts.len();
    let len = utts.iter().map(|u| u.tokens.len()).max().unwrap_or(0);
    let mut token_ids = vec![PAD_ID; n * len];
    let mut slot_targets = vec![ignore_index; n * len];
    let mut mask = vec![0.0; n * len];
    let mut intent_targets = Vec::with_capacity(n);
    let lookup = |vocab: &Vocab, kind: &'static str, label: &str| -> Result<i64> {
        match (vocab.get(label), policy) {
            (Some(i), _) => Ok(i as i64),
            (None, LabelPolicy::Lenient) => Ok(ignore_index),
            (None, LabelPolicy::Strict) => Err(DataError::UnknownLabel {
                kind,
                label: label.to_string(),
            }),
        }
    };
    for (b, u) in utts.iter().enumerate() {
        intent_targets.push(lookup(&maps.intents, "intent", &u.intent)?);
        for (t, (tok, tag)) in u.tokens.iter().zip(&u.slot_tags).enumerate() {
            token_ids[b * len + t] = maps.token_id(tok);
            slot_targets[b * len + t] = lookup(&maps.slots, "slot", tag)?;
            mask[b * len + t] = 1.0;
        }
    }
    Ok(EncodedBatch {
        ids: utts.iter().map(|u| u.id.clone()).collect(),
        token_ids,
        mask: Tensor::new(vec![n, len], mask).expect("mask shape"),
        lengths: utts.iter().map(|u| u.tokens.len()).collect(),
        intent_targets,
        slot_targets,
        ignore_index,
    })
}
