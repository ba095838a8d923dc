//! Frozen teacher backends producing one sentence embedding per utterance.
//!
//! The synthetic encoder mimics the last-four-layer pipeline of a real text
//! embedding model: every layer's hidden state is a fixed linear map of the
//! token embedding, the four layers are averaged per position, and the
//! result is mean-pooled over valid positions.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{load_teacher_embeddings, DataError, EncodedBatch, TeacherEmbedding};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Number of trailing hidden layers averaged before pooling.
pub const POOLED_LAYERS: usize = 4;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("no teacher embedding for utterance {0}")]
    MissingId(String),
    #[error("sample {row} has an empty attention mask")]
    DegenerateMask { row: usize },
    #[error("token id {token} outside teacher vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("invalid teacher spec {0:?} (expected file:PATH or synth:SEED)")]
    BadSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T, E = TeacherError> = std::result::Result<T, E>;

/// Fixed random encoder; never placed on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrozenEncoder {
    seed: u64,
    token_embedding: Tensor,
    layers: [Tensor; POOLED_LAYERS],
}

impl SyntheticFrozenEncoder {
    pub fn new(seed: u64, vocab: usize, d_et: usize) -> Self {
        let mut rng = stream(seed, Stream::Teacher);
        let unit = Normal::new(0.0, 1.0).expect("std");
        let mix = Normal::new(0.0, 1.0 / (d_et as f64).sqrt()).expect("std");
        let mut draw = |n: usize, dist: &Normal<f64>| -> Vec<f64> {
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let token_embedding =
            Tensor::new(vec![vocab, d_et], draw(vocab * d_et, &unit)).expect("shape");
        let layers = std::array::from_fn(|_| {
            Tensor::new(vec![d_et, d_et], draw(d_et * d_et, &mix)).expect("shape")
        });
        Self {
            seed,
            token_embedding,
            layers,
        }
    }

    /// Builds an encoder from explicit parameters.
    pub fn from_parts(seed: u64, token_embedding: Tensor, layers: [Tensor; POOLED_LAYERS]) -> Self {
        Self {
            seed,
            token_embedding,
            layers,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_et(&self) -> usize {
        self.token_embedding.last_dim()
    }

    /// Hidden states `h_k[l] = M_k · x_l` of the last four layers, each `[L × d_et]`.
    pub fn hidden_states(&self, tokens: &[usize]) -> Result<[Tensor; POOLED_LAYERS]> {
        let vocab = self.token_embedding.shape()[0];
        let d = self.d_et();
        let mut inputs = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= vocab {
                return Err(TeacherError::TokenOutOfRange { token: t, vocab });
            }
            inputs.extend_from_slice(self.token_embedding.row(t));
        }
        let x = Tensor::new(vec![tokens.len(), d], inputs).expect("shape");
        Ok(std::array::from_fn(|k| {
            // rows of x · M_kᵀ are M_k · x_l
            x.matmul(&self.layers[k].transpose().expect("square"))
                .expect("shape")
        }))
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.seed.to_le_bytes());
        self.token_embedding.write_bytes(out);
        for m in &self.layers {
            m.write_bytes(out);
        }
    }
}

/// Averages the layers at each valid position, then mean-pools over the
/// valid positions. Masked positions are never read.
pub fn pool_layers(layers: &[Tensor], mask: &[f64]) -> Result<Vec<f64>> {
    let d = layers[0].last_dim();
    let k = layers.len() as f64;
    let mut sum = vec![0.0; d];
    let mut count = 0.0;
    for (l, &m) in mask.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (j, s) in sum.iter_mut().enumerate() {
            let avg = layers.iter().map(|h| h.row(l)[j]).sum::<f64>() / k;
            *s += avg * m;
        }
        count += m;
    }
    if count == 0.0 {
        return Err(TeacherError::DegenerateMask { row: 0 });
    }
    Ok(sum.into_iter().map(|s| s / count).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherBackend {
    /// Precomputed, already pooled sentence vectors keyed by utterance id.
    File {
        d_et: usize,
        embeddings: BTreeMap<String, Vec<f64>>,
    },
    SyntheticFrozen(SyntheticFrozenEncoder),
}

impl TeacherBackend {
    pub fn from_file(path: &Path, d_et: usize) -> Result<Self> {
        Ok(TeacherBackend::File {
            d_et,
            embeddings: load_teacher_embeddings(path, d_et)?,
        })
    }

    /// Parses `file:PATH` or `synth:SEED`. The synthetic encoder is sized to
    /// the given token vocabulary.
    pub fn from_records(d_et: usize, records: &[TeacherEmbedding]) -> Result<Self> {
        let mut embeddings = BTreeMap::new();
        for r in records {
            if r.embedding.len() != d_et {
                return Err(DataError::Dimension {
                    id: r.id.clone(),
                    expected: d_et,
                    got: r.embedding.len(),
                }
                .into());
            }
            if embeddings
                .insert(r.id.clone(), r.embedding.clone())
                .is_some()
            {
                return Err(DataError::DuplicateId { id: r.id.clone() }.into());
            }
        }
        Ok(TeacherBackend::File { d_et, embeddings })
    }

    pub fn from_spec(spec: &str, d_et: usize, vocab: usize) -> Result<Self> {
        if let Some(path) = spec.strip_prefix("file:") {
            Self::from_file(Path::new(path), d_et)
        } else if let Some(seed) = spec.strip_prefix("synth:") {
            let seed = seed
                .parse()
                .map_err(|_| TeacherError::BadSpec(spec.to_string()))?;
            Ok(TeacherBackend::SyntheticFrozen(
                SyntheticFrozenEncoder::new(seed, vocab, d_et),
            ))
        } else {
            Err(TeacherError::BadSpec(spec.to_string()))
        }
    }

    pub fn d_et(&self) -> usize {
        match self {
            TeacherBackend::File { d_et, .. } => *d_et,
            TeacherBackend::SyntheticFrozen(enc) => enc.d_et(),
        }
    }

    /// Sentence embeddings `[d_b × d_et]` for a batch.
    pub fn embed(&self, batch: &EncodedBatch) -> Result<Tensor> {
        let n = batch.batch_size();
        let d = self.d_et();
        let mut out = Vec::with_capacity(n * d);
        for b in 0..n {
            let mask = batch.mask.row(b);
            if mask.iter().all(|&m| m == 0.0) {
                return Err(TeacherError::DegenerateMask { row: b });
            }
            match self {
                TeacherBackend::File { embeddings, .. } => {
                    let v = embeddings
                        .get(&batch.ids[b])
                        .ok_or_else(|| TeacherError::MissingId(batch.ids[b].clone()))?;
                    out.extend_from_slice(v);
                }
                TeacherBackend::SyntheticFrozen(enc) => {
                    let len = batch.max_len();
                    let tokens = &batch.token_ids[b * len..(b + 1) * len];
                    let layers = enc.hidden_states(tokens)?;
                    let pooled = pool_layers(&layers, mask).map_err(|e| match e {
                        TeacherError::DegenerateMask { .. } => {
                            TeacherError::DegenerateMask { row: b }
                        }
                        other => other,
                    })?;
                    out.extend(pooled);
                }
            }
        }
        Ok(Tensor::new(vec![n, d], out).expect("shape"))
    }

    /// SHA-256 over every parameter byte.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        match self {
            TeacherBackend::File { d_et, embeddings } => {
                bytes.extend_from_slice(b"file");
                bytes.extend_from_slice(&(*d_et as u64).to_le_bytes());
                for (id, v) in embeddings {
                    bytes.extend_from_slice(&(id.len() as u64).to_le_bytes());
                    bytes.extend_from_slice(id.as_bytes());
                    for x in v {
                        bytes.extend_from_slice(&x.to_bits().to_le_bytes());
                    }
                }
            }
            TeacherBackend::SyntheticFrozen(enc) => {
                bytes.extend_from_slice(b"synth");
                enc.write_bytes(&mut bytes);
            }
        }
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_batch, LabelMaps, LabelPolicy, Utterance};

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    fn utt(id: &str, tokens: &[&str]) -> Utterance {
        Utterance {
            id: id.into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            slot_tags: vec!["O".into(); tokens.len()],
            intent: "x".into(),
        }
    }

    #[test]
    fn single_valid_position_is_returned_exactly() {
        let layers: Vec<Tensor> = (0..4)
            .map(|k| {
                Tensor::from_rows(&[vec![k as f64, 1.0], vec![100.0, -100.0], vec![7.0, 7.0]])
                    .unwrap()
            })
            .collect();
        let pooled = pool_layers(&layers, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(pooled, vec![1.5, 1.0]);
    }

    #[test]
    fn two_orthogonal_positions_average() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let layers = vec![h.clone(), h.clone(), h.clone(), h];
        assert_eq!(pool_layers(&layers, &[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(
            pool_layers(&layers, &[0.0, 0.0]),
            Err(TeacherError::DegenerateMask { .. })
        ));
    }

    #[test]
    fn identity_layers_and_equal_tokens_return_the_token_embedding() {
        let emb = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.5, -2.0, 3.0]]).unwrap();
        let enc = SyntheticFrozenEncoder::from_parts(0, emb, std::array::from_fn(|_| eye(3)));
        let layers = enc.hidden_states(&[1, 1, 1]).unwrap();
        assert_eq!(
            pool_layers(&layers, &[1.0, 1.0, 1.0]).unwrap(),
            vec![0.5, -2.0, 3.0]
        );
    }

    #[test]
    fn masked_hidden_states_are_ignored() {
        let enc = SyntheticFrozenEncoder::new(3, 10, 6);
        let mut layers = enc.hidden_states(&[2, 5, 7, 0]).unwrap();
        let mask = [1.0, 1.0, 0.0, 0.0];
        let before = pool_layers(&layers, &mask).unwrap();
        for h in layers.iter_mut() {
            h.data_mut()[2 * 6 + 1] = 1e9;
            h.data_mut()[3 * 6] = f64::NAN;
        }
        assert_eq!(pool_layers(&layers, &mask).unwrap(), before);
    }

    #[test]
    fn embed_is_padding_invariant_and_frozen() {
        let train = vec![utt("a", &["p", "q", "r"]), utt("b", &["q"])];
        let maps = LabelMaps::build(&train);
        let refs: Vec<&Utterance> = train.iter().collect();
        let batch = encode_batch(&refs, &maps, LabelPolicy::Strict, -100).unwrap();
        let teacher = TeacherBackend::from_spec("synth:5", 8, maps.tokens.len()).unwrap();
        let sum = teacher.checksum();
        let short = teacher.embed(&batch).unwrap();
        let long = teacher
            .embed(&batch.padded_to(batch.max_len() + 5))
            .unwrap();
        assert_eq!(short, long);
        assert_eq!(short.shape(), &[2, 8]);
        assert_eq!(teacher.checksum(), sum);
    }

    #[test]
    fn file_backend_lookups() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"embedding\":[1.0,2.0]}\n").unwrap();
        let teacher = TeacherBackend::from_spec(&format!("file:{}", p.display()), 2, 0).unwrap();
        let train = vec![utt("a", &["x"]), utt("b", &["x"])];
        let maps = LabelMaps::build(&train);
        let one = encode_batch(&[&train[0]], &maps, LabelPolicy::Strict, -100).unwrap();
        assert_eq!(teacher.embed(&one).unwrap().data(), &[1.0, 2.0]);
        let miss = encode_batch(&[&train[1]], &maps, LabelPolicy::Strict, -100).unwrap();
        assert!(matches!(teacher.embed(&miss), Err(TeacherError::MissingId(id)) if id == "b"));
        assert!(TeacherBackend::from_spec("http://x", 2, 0).is_err());
        assert!(TeacherBackend::from_spec("synth:abc", 2, 0).is_err());
    }

    #[test]
    fn checksum_tracks_parameters() {
        let a = TeacherBackend::SyntheticFrozen(SyntheticFrozenEncoder::new(1, 4, 3));
        let b = TeacherBackend::SyntheticFrozen(SyntheticFrozenEncoder::new(2, 4, 3));
        assert_eq!(a.checksum(), a.clone().checksum());
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum().len(), 64);
    }
}
