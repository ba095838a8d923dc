//! Desk-scale synthetic corpus with label-aware teacher embeddings.
//!
//! Each intent owns a few slot-type templates and a pool of cue words; slot
//! spans draw their words from a per-slot-type pool that is sometimes mixed
//! with a neighbouring type's pool. The teacher vector of an utterance is a
//! fixed Gaussian projection of its intent one-hot concatenated with
//! slot-type presence indicators, plus small isotropic noise.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_teacher_embeddings, write_utterances, Split, TeacherEmbedding};
use super::{DataError, Result, Utterance};
use crate::rng::{stream, Stream};

const SLOT_WORDS: usize = 4;
const TEMPLATES_PER_INTENT: usize = 3;
const SLOTS_PER_INTENT: usize = 3;
const CUE_PROB: f64 = 0.5;
const CONFUSION_PROB: f64 = 0.2;
pub const TEACHER_NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab: usize,
    pub n_intents: usize,
    pub n_slot_types: usize,
    pub d_et: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 500,
            n_dev: 100,
            n_test: 100,
            vocab: 120,
            n_intents: 6,
            n_slot_types: 8,
            d_et: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    /// One record per utterance across all splits, in split order.
    pub teacher: Vec<TeacherEmbedding>,
}

impl SyntheticCorpus {
    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `teacher.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_utterances(&Split::Train.path(dir), &self.train)?;
        write_utterances(&Split::Dev.path(dir), &self.dev)?;
        write_utterances(&Split::Test.path(dir), &self.test)?;
        write_teacher_embeddings(&dir.join("teacher.jsonl"), &self.teacher)
    }
}

struct Layout {
    fillers: Vec<usize>,
    cues: Vec<Vec<usize>>,
    slot_words: Vec<Vec<usize>>,
    templates: Vec<Vec<Vec<usize>>>,
}

fn layout(cfg: &SynthConfig) -> Result<Layout> {
    let slot_region = cfg.n_slot_types * SLOT_WORDS;
    let needed = slot_region + cfg.n_intents + 2;
    if cfg.vocab < needed {
        return Err(DataError::Config(format!(
            "vocab {} too small for {} slot types and {} intents (need at least {needed})",
            cfg.vocab, cfg.n_slot_types, cfg.n_intents
        )));
    }
    let mut rng = stream(cfg.seed, Stream::SynthLayout);
    let slot_words = (0..cfg.n_slot_types)
        .map(|k| (k * SLOT_WORDS..(k + 1) * SLOT_WORDS).collect())
        .collect();
    let context: Vec<usize> = (slot_region..cfg.vocab).collect();
    let n_fillers = context.len() / 2;
    let (fillers, cue_region) = context.split_at(n_fillers);
    let stride = (cue_region.len() / cfg.n_intents).max(1);
    let width = (2 * stride).min(cue_region.len());
    let cues = (0..cfg.n_intents)
        .map(|i| {
            (0..width)
                .map(|j| cue_region[(i * stride + j) % cue_region.len()])
                .collect()
        })
        .collect();

    let all_types: Vec<usize> = (0..cfg.n_slot_types).collect();
    let templates = (0..cfg.n_intents)
        .map(|_| {
            let preferred: Vec<usize> = all_types
                .choose_multiple(&mut rng, SLOTS_PER_INTENT.min(cfg.n_slot_types))
                .copied()
                .collect();
            (0..TEMPLATES_PER_INTENT)
                .map(|_| {
                    let len = rng.random_range(1..=preferred.len().min(3));
                    let mut t = preferred.clone();
                    t.shuffle(&mut rng);
                    t.truncate(len);
                    t
                })
                .collect()
        })
        .collect();
    Ok(Layout {
        fillers: fillers.to_vec(),
        cues,
        slot_words,
        templates,
    })
}

fn word(i: usize) -> String {
    format!("w{i:03}")
}

fn context_word(rng: &mut impl Rng, lay: &Layout, intent: usize) -> String {
    let pool = if rng.random_bool(CUE_PROB) || lay.fillers.is_empty() {
        &lay.cues[intent]
    } else {
        &lay.fillers
    };
    word(*pool.choose(rng).expect("non-empty pool"))
}

fn sample_utterance(
    rng: &mut impl Rng,
    lay: &Layout,
    id: String,
    n_slot_types: usize,
) -> (Utterance, Vec<usize>) {
    let intent = rng.random_range(0..lay.cues.len());
    let template = lay.templates[intent].choose(rng).expect("templates");
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for &ty in template {
        for _ in 0..rng.random_range(0..=2) {
            tokens.push(context_word(rng, lay, intent));
            tags.push("O".to_string());
        }
        let span = rng.random_range(1..=2);
        for j in 0..span {
            let source = if rng.random_bool(CONFUSION_PROB) {
                (ty + 1) % n_slot_types
            } else {
                ty
            };
            tokens.push(word(
                *lay.slot_words[source].choose(rng).expect("slot pool"),
            ));
            let prefix = if j == 0 { "B" } else { "I" };
            tags.push(format!("{prefix}-slot{ty}"));
        }
    }
    for _ in 0..rng.random_range(0..=1) {
        tokens.push(context_word(rng, lay, intent));
        tags.push("O".to_string());
    }
    let utt = Utterance {
        id,
        tokens,
        slot_tags: tags,
        intent: format!("intent{intent}"),
    };
    (utt, template.clone())
}

/// Generates a full corpus deterministically from `cfg.seed`.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    for (name, n) in [
        ("n_train", cfg.n_train),
        ("n_dev", cfg.n_dev),
        ("n_test", cfg.n_test),
        ("n_intents", cfg.n_intents),
        ("n_slot_types", cfg.n_slot_types),
        ("d_et", cfg.d_et),
    ] {
        if n == 0 {
            return Err(DataError::Config(format!("{name} must be at least 1")));
        }
    }
    let lay = layout(cfg)?;
    let features = cfg.n_intents + cfg.n_slot_types;

    let mut proj_rng = stream(cfg.seed, Stream::SynthProjection);
    let proj_dist = Normal::new(0.0, 1.0 / (cfg.d_et as f64).sqrt()).expect("std");
    let projection: Vec<f64> = (0..cfg.d_et * features)
        .map(|_| proj_dist.sample(&mut proj_rng))
        .collect();

    let mut utt_rng = stream(cfg.seed, Stream::SynthUtterances);
    let mut noise_rng = stream(cfg.seed, Stream::SynthNoise);
    let noise = Normal::new(0.0, TEACHER_NOISE_STD).expect("std");

    let mut teacher = Vec::new();
    let mut make_split = |name: &str, n: usize| -> Vec<Utterance> {
        (0..n)
            .map(|i| {
                let (u, template) = sample_utterance(
                    &mut utt_rng,
                    &lay,
                    format!("{name}-{i:05}"),
                    cfg.n_slot_types,
                );
                let indicator = label_indicator(&u, &template, cfg);
                let embedding = (0..cfg.d_et)
                    .map(|r| {
                        let row = &projection[r * features..(r + 1) * features];
                        let signal: f64 = row.iter().zip(&indicator).map(|(a, b)| a * b).sum();
                        signal + noise.sample(&mut noise_rng)
                    })
                    .collect();
                teacher.push(TeacherEmbedding {
                    id: u.id.clone(),
                    embedding,
                });
                u
            })
            .collect()
    };
    let train = make_split("train", cfg.n_train);
    let dev = make_split("dev", cfg.n_dev);
    let test = make_split("test", cfg.n_test);
    Ok(SyntheticCorpus {
        train,
        dev,
        test,
        teacher,
    })
}

/// Intent one-hot followed by slot-type presence flags.
fn label_indicator(u: &Utterance, template: &[usize], cfg: &SynthConfig) -> Vec<f64> {
    let mut v = vec![0.0; cfg.n_intents + cfg.n_slot_types];
    let intent: usize = u.intent["intent".len()..]
        .parse()
        .expect("generated intent");
    v[intent] = 1.0;
    for &ty in template {
        v[cfg.n_intents + ty] = 1.0;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_utterances;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            n_train: 60,
            n_dev: 10,
            n_test: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_synthetic(&small(7)).unwrap().write(a.path()).unwrap();
        gen_synthetic(&small(7)).unwrap().write(b.path()).unwrap();
        for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "teacher.jsonl"] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
        assert_ne!(
            gen_synthetic(&small(8)).unwrap(),
            gen_synthetic(&small(7)).unwrap()
        );
    }

    #[test]
    fn generated_utterances_are_valid_and_unique() {
        let corpus = gen_synthetic(&small(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let train = read_utterances(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(train, corpus.train);
        assert_eq!(corpus.teacher.len(), 80);
        assert!(corpus.teacher.iter().all(|t| t.embedding.len() == 64));
    }

    #[test]
    fn single_intent_corpus() {
        let corpus = gen_synthetic(&SynthConfig {
            n_intents: 1,
            ..small(3)
        })
        .unwrap();
        assert!(corpus.train.iter().all(|u| u.intent == "intent0"));
    }

    #[test]
    fn rejects_impossible_configs() {
        let too_many = SynthConfig {
            vocab: 20,
            n_slot_types: 8,
            ..small(0)
        };
        assert!(matches!(
            gen_synthetic(&too_many),
            Err(DataError::Config(_))
        ));
        let empty = SynthConfig {
            n_dev: 0,
            ..small(0)
        };
        assert!(matches!(gen_synthetic(&empty), Err(DataError::Config(_))));
    }

    #[test]
    fn equal_labels_give_nearby_teacher_vectors() {
        let cfg = small(11);
        let corpus = gen_synthetic(&cfg).unwrap();
        let all: Vec<&Utterance> = corpus
            .train
            .iter()
            .chain(&corpus.dev)
            .chain(&corpus.test)
            .collect();
        let key = |u: &Utterance| {
            let mut types: Vec<&str> = u
                .slot_tags
                .iter()
                .filter_map(|t| t.strip_prefix("B-"))
                .collect();
            types.sort();
            types.dedup();
            (u.intent.clone(), types.join(","))
        };
        let bound = 6.0 * TEACHER_NOISE_STD * (cfg.d_et as f64).sqrt();
        let mut pairs = 0;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                if key(all[i]) != key(all[j]) {
                    continue;
                }
                pairs += 1;
                let d: f64 = corpus.teacher[i]
                    .embedding
                    .iter()
                    .zip(&corpus.teacher[j].embedding)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d <= bound, "{} vs {}: {d} > {bound}", all[i].id, all[j].id);
            }
        }
        assert!(pairs > 10);
    }
}
