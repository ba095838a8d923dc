mod common;

use afd_slu::checkpoint::Checkpoint;
use afd_slu::config::Ablation;
use afd_slu::data::{gen_synthetic, LabelMaps, SynthConfig};
use afd_slu::params::Parameters;
use afd_slu::student::evaluate;
use afd_slu::teacher::{SyntheticFrozenEncoder, TeacherBackend};
use afd_slu::trainer::{train, TrainData};

fn bits(p: &impl Parameters) -> Vec<u64> {
    p.tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn identical_runs_are_byte_identical() {
    let corpus = common::small_corpus(1);
    let data = common::train_data(&corpus);
    let teacher = common::file_teacher(&corpus);
    let cfg = common::small_config(7, 3);
    let run = || {
        let mut log = Vec::new();
        let out = train(&cfg, &data, &teacher, Some(&mut log)).unwrap();
        (log, out.checkpoint.digest())
    };
    let (log_a, digest_a) = run();
    let (log_b, digest_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(digest_a, digest_b);
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 3);
}

#[test]
fn different_seeds_diverge() {
    let corpus = common::small_corpus(1);
    let data = common::train_data(&corpus);
    let teacher = common::file_teacher(&corpus);
    let a = train(&common::small_config(1, 1), &data, &teacher, None).unwrap();
    let b = train(&common::small_config(2, 1), &data, &teacher, None).unwrap();
    assert_ne!(a.checkpoint.digest(), b.checkpoint.digest());
}

#[test]
fn zero_lambda_reproduces_the_baseline_trajectory() {
    let corpus = common::small_corpus(2);
    let data = common::train_data(&corpus);
    let teacher = common::file_teacher(&corpus);
    let mut zero = common::small_config(3, 4);
    zero.distill.lambda_initial = 0.0;
    zero.distill.lambda_final = 0.0;
    let mut baseline = zero.clone();
    baseline.distill.ablation = Ablation::NoDistill;

    let a = train(&zero, &data, &teacher, None).unwrap();
    let b = train(&baseline, &data, &teacher, None).unwrap();
    assert_eq!(bits(&a.final_student), bits(&b.final_student));
    assert_eq!(bits(&a.checkpoint.student), bits(&b.checkpoint.student));
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.task_loss.to_bits(), y.task_loss.to_bits());
        assert_eq!(x.dev, y.dev);
        assert_eq!(x.lambda, 0.0);
    }
    assert!(a.log.iter().all(|e| e.distill_loss.is_some()));
    assert!(b.log.iter().all(|e| e.distill_loss.is_none()));
}

#[test]
fn training_leaves_the_teacher_untouched() {
    let corpus = common::small_corpus(3);
    let data = common::train_data(&corpus);
    for teacher in [
        common::file_teacher(&corpus),
        TeacherBackend::SyntheticFrozen(SyntheticFrozenEncoder::new(
            5,
            data.maps.tokens.len(),
            common::D_ET,
        )),
    ] {
        let before = teacher.checksum();
        let snapshot = teacher.clone();
        let out = train(&common::small_config(0, 2), &data, &teacher, None).unwrap();
        assert_eq!(teacher.checksum(), before);
        assert_eq!(teacher, snapshot);
        assert_eq!(
            out.checkpoint.teacher_checksum.as_deref(),
            Some(before.as_str())
        );
    }
}

#[test]
fn best_dev_checkpoint_is_kept_and_ties_go_to_the_earlier_epoch() {
    let corpus = common::small_corpus(4);
    let data = common::train_data(&corpus);
    let teacher = common::file_teacher(&corpus);
    let out = train(&common::small_config(1, 6), &data, &teacher, None).unwrap();
    let best = out
        .log
        .iter()
        .map(|e| e.dev.overall_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    let first = out
        .log
        .iter()
        .position(|e| e.dev.overall_acc == best)
        .unwrap();
    assert_eq!(out.checkpoint.epoch, first);
    assert_eq!(out.checkpoint.dev, out.log[first].dev);
    let rescored = evaluate(&out.checkpoint.student, &data.maps, &data.dev, 8).unwrap();
    assert_eq!(rescored.metrics(), out.checkpoint.dev);
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let corpus = common::small_corpus(5);
    let data = common::train_data(&corpus);
    let teacher = common::file_teacher(&corpus);
    for ablation in Ablation::ALL {
        let mut cfg = common::small_config(2, 1);
        cfg.distill.ablation = ablation;
        let ck = train(&cfg, &data, &teacher, None).unwrap().checkpoint;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.digest(), ck.digest());
        assert_eq!(bits(&back.student), bits(&ck.student));
        assert_eq!(back.aligner.is_some(), ablation != Ablation::NoDistill);
    }
}

#[test]
fn checkpoint_rejects_foreign_documents() {
    assert!(Checkpoint::from_bytes(b"{}").is_err());
    let corpus = common::small_corpus(5);
    let data = common::train_data(&corpus);
    let teacher = common::file_teacher(&corpus);
    let ck = train(&common::small_config(2, 1), &data, &teacher, None)
        .unwrap()
        .checkpoint;
    let text = String::from_utf8(ck.to_bytes()).unwrap();
    let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
    assert!(Checkpoint::from_bytes(bumped.as_bytes()).is_err());
}

#[test]
fn mismatched_teacher_width_is_rejected() {
    let corpus = common::small_corpus(6);
    let data = common::train_data(&corpus);
    let teacher = common::file_teacher(&corpus);
    let mut cfg = common::small_config(0, 1);
    cfg.adapter.d_teacher = common::D_ET + 1;
    assert!(train(&cfg, &data, &teacher, None).is_err());
    cfg.distill.ablation = Ablation::NoDistill;
    assert!(train(&cfg, &data, &teacher, None).is_ok());
}

#[test]
fn task_loss_falls_over_training_on_every_seed() {
    let corpus = gen_synthetic(&SynthConfig::default()).unwrap();
    let data = TrainData {
        train: corpus.train.clone(),
        dev: corpus.dev.clone(),
        maps: LabelMaps::build(&corpus.train),
    };
    let teacher = TeacherBackend::from_records(64, &corpus.teacher).unwrap();
    for seed in 0..5 {
        let mut cfg = common::desk_config();
        cfg.seed = seed;
        let out = train(&cfg, &data, &teacher, None).unwrap();
        let first = out.log.first().unwrap().task_loss;
        let last = out.log.last().unwrap().task_loss;
        assert_eq!(out.log.len(), 15);
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}
