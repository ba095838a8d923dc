#![allow(dead_code)]

use afd_slu::config::{RunConfig, StudentConfig};
use afd_slu::data::{gen_synthetic, LabelMaps, SynthConfig, SyntheticCorpus};
use afd_slu::teacher::TeacherBackend;
use afd_slu::trainer::TrainData;

pub const D_ET: usize = 8;

pub fn small_corpus(seed: u64) -> SyntheticCorpus {
    gen_synthetic(&SynthConfig {
        seed,
        n_train: 24,
        n_dev: 8,
        n_test: 8,
        vocab: 30,
        n_intents: 3,
        n_slot_types: 3,
        d_et: D_ET,
    })
    .expect("synthetic corpus")
}

pub fn train_data(corpus: &SyntheticCorpus) -> TrainData {
    TrainData {
        train: corpus.train.clone(),
        dev: corpus.dev.clone(),
        maps: LabelMaps::build(&corpus.train),
    }
}

pub fn file_teacher(corpus: &SyntheticCorpus) -> TeacherBackend {
    TeacherBackend::from_records(D_ET, &corpus.teacher).expect("teacher")
}

pub fn small_config(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        student: StudentConfig {
            d_emb: 8,
            d_lstm: 8,
            d_attn: 8,
            dropout: 0.4,
        },
        ..RunConfig::default()
    };
    cfg.adapter.d_teacher = D_ET;
    cfg.distill.epochs = epochs;
    cfg.optim.lr = 0.01;
    cfg.optim.batch_size = 8;
    cfg
}

pub fn desk_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.json");
    RunConfig::load(std::path::Path::new(path)).expect("desk config")
}

/// Brute-force chunk matcher: every span `[i, j]` is tested against the
/// definition (opens with `B-X`, continues with `I-X`, and is not followed by
/// `I-X`); F1 is computed from the resulting span sets.
pub fn oracle_chunks(tags: &[String]) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..tags.len() {
        let Some(ty) = tags[i].strip_prefix("B-") else {
            continue;
        };
        let inside = format!("I-{ty}");
        for j in i..tags.len() {
            let body = tags[i + 1..=j].iter().all(|t| *t == inside);
            let closed = j + 1 == tags.len() || tags[j + 1] != inside;
            if body && closed {
                out.push((ty.to_string(), i, j));
            }
        }
    }
    out
}

/// Returns `(correct, predicted, gold)` chunk counts.
pub fn oracle_counts(gold: &[String], pred: &[String]) -> (usize, usize, usize) {
    let g = oracle_chunks(gold);
    let p = oracle_chunks(pred);
    let correct = p.iter().filter(|c| g.iter().any(|d| d == *c)).count();
    (correct, p.len(), g.len())
}

pub fn oracle_f1(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let (mut c, mut p, mut g) = (0, 0, 0);
    for (gold, pred) in pairs {
        let (a, b, d) = oracle_counts(gold, pred);
        c += a;
        p += b;
        g += d;
    }
    if p + g == 0 {
        100.0
    } else {
        100.0 * 2.0 * c as f64 / (p + g) as f64
    }
}
