//! Distillation training: the dynamic distillation coefficient, the combined
//! objective, Adam, dev-driven model selection and the ablation sweep.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::Aligner;
use crate::checkpoint::{Checkpoint, FORMAT, VERSION};
use crate::config::{Ablation, DistillConfig, OptimConfig, RunConfig, ScheduleVariant};
use crate::data::{
    encode_batch, load_corpus, read_utterances, LabelMaps, LabelPolicy, Split, Utterance,
};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::params::Parameters;
use crate::rng::{stream, Stream};
use crate::student::{evaluate, forward, task_loss, Dropout, StudentParams, StudentVars};
use crate::teacher::TeacherBackend;
use crate::tensor::{Tape, Tensor, Var};

/// Cosine-scheduled distillation weight at epoch `e` of `E`.
pub fn ddc_lambda(e: usize, cfg: &DistillConfig) -> Result<f64> {
    if e > cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {e} outside the schedule of {} epochs",
            cfg.epochs
        )));
    }
    let (li, lf) = (cfg.lambda_initial, cfg.lambda_final);
    let wave = 1.0 + (e as f64 * PI / cfg.epochs as f64).cos();
    let lambda = match cfg.schedule_variant {
        ScheduleVariant::Literal => lf + (li - lf) * wave,
        ScheduleVariant::Halved => lf + (li - lf) * wave / 2.0,
    };
    Ok(if cfg.clamp_nonnegative {
        lambda.max(0.0)
    } else {
        lambda
    })
}

/// The weight actually applied at epoch `e` under the configured ablation.
pub fn epoch_lambda(e: usize, cfg: &DistillConfig) -> Result<f64> {
    match cfg.ablation {
        Ablation::NoDistill => Ok(0.0),
        Ablation::NoDdc => Ok(cfg.lambda_final),
        Ablation::Full | Ablation::NoRpnn => ddc_lambda(e, cfg),
    }
}

/// `task + λ·distill`.
pub fn total_loss<'t>(
    task: Var<'t>,
    distill: Var<'t>,
    lambda: f64,
) -> crate::tensor::Result<Var<'t>> {
    task.add(distill.scale(lambda))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], cfg: &OptimConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping. Non-positive `max_norm` disables it.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub maps: LabelMaps,
}

impl TrainData {
    /// Reads `train.jsonl` and `dev.jsonl` from `dir`; label maps come from
    /// the training split only.
    pub fn load(dir: &Path) -> Result<Self> {
        let (train, maps) = load_corpus(&Split::Train.path(dir))?;
        let dev = read_utterances(&Split::Dev.path(dir))?;
        Ok(Self { train, dev, maps })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean over batches.
    pub task_loss: f64,
    /// Mean over batches; absent without distillation.
    pub distill_loss: Option<f64>,
    pub dev: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-dev model.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Parameters after the last epoch.
    pub final_student: StudentParams,
    pub final_aligner: Option<Aligner>,
}

fn init_models(cfg: &RunConfig, maps: &LabelMaps) -> (StudentParams, Option<Aligner>) {
    let mut rng = stream(cfg.seed, Stream::Init);
    let student = StudentParams::init(
        &mut rng,
        &cfg.student,
        maps.tokens.len(),
        maps.intents.len(),
        maps.slots.len(),
    );
    let d_es = student.d_es();
    let aligner = match cfg.distill.ablation {
        Ablation::NoDistill => None,
        Ablation::NoRpnn => Some(Aligner::linear(&mut rng, &cfg.adapter, d_es)),
        Ablation::Full | Ablation::NoDdc => Some(Aligner::rpnn(&mut rng, &cfg.adapter, d_es)),
    };
    (student, aligner)
}

struct StepLosses {
    task: f64,
    distill: Option<f64>,
    total: f64,
}

/// Builds `L_total` for one batch and returns it with gradients for every
/// student tensor followed by every aligner tensor.
fn batch_gradients<R: rand::Rng>(
    student: &StudentParams,
    aligner: Option<&Aligner>,
    batch: &crate::data::EncodedBatch,
    teacher: &TeacherBackend,
    lambda: f64,
    dropout: Option<Dropout<'_, R>>,
) -> Result<(StepLosses, Vec<Tensor>)> {
    let tape = Tape::new();
    let s_vars = student.register(&tape, true);
    let a_vars = aligner.map(|a| a.register(&tape, true)).unwrap_or_default();
    let out = forward(&StudentVars::from_slice(&s_vars), batch, dropout)?;
    let task = task_loss(&out, batch)?;
    let (root, distill) = match aligner {
        Some(al) => {
            let projected = al.forward(&a_vars, out.sentence)?;
            let target = tape.constant(teacher.embed(batch)?);
            let distill = target.mse_sum(projected)?;
            (
                total_loss(task, distill, lambda)?,
                Some(distill.value().item()),
            )
        }
        None => (task, None),
    };
    let losses = StepLosses {
        task: task.value().item(),
        distill,
        total: root.value().item(),
    };
    if !losses.total.is_finite() {
        return Ok((losses, Vec::new()));
    }
    let grads = tape.backward(root)?;
    let g = s_vars
        .iter()
        .chain(&a_vars)
        .map(|&v| grads.get_or_zeros(v))
        .collect();
    Ok((losses, g))
}

pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    teacher: &TeacherBackend,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.dev.is_empty() {
        return Err(Error::Config(
            "train and dev splits must be non-empty".into(),
        ));
    }
    let distilling = cfg.distill.ablation != Ablation::NoDistill;
    if distilling && teacher.d_et() != cfg.adapter.d_teacher {
        return Err(Error::Config(format!(
            "teacher width {} does not match adapter d_teacher {}",
            teacher.d_et(),
            cfg.adapter.d_teacher
        )));
    }
    let maps = &data.maps;
    let (mut student, mut aligner) = init_models(cfg, maps);
    let mut adam = {
        let mut all = student.tensors();
        if let Some(a) = &aligner {
            all.extend(a.tensors());
        }
        Adam::new(&all, &cfg.optim)
    };
    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.distill.epochs);
    let mut best: Option<(f64, usize, Metrics, StudentParams, Option<Aligner>)> = None;

    for epoch in 0..cfg.distill.epochs {
        let lambda = epoch_lambda(epoch, &cfg.distill)?;
        order.shuffle(&mut shuffle_rng);
        let (mut task_sum, mut distill_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, idx) in order.chunks(cfg.optim.batch_size).enumerate() {
            let refs: Vec<&Utterance> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = encode_batch(&refs, maps, LabelPolicy::Strict, cfg.ignore_index)?;
            let dropout = Some(Dropout {
                rate: cfg.student.dropout,
                rng: &mut dropout_rng,
            });
            let (losses, mut grads) =
                batch_gradients(&student, aligner.as_ref(), &batch, teacher, lambda, dropout)?;
            if !losses.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    id: batch.ids[0].clone(),
                });
            }
            clip_global_norm(&mut grads, cfg.optim.clip_norm);
            let mut params = student.tensors_mut();
            if let Some(a) = aligner.as_mut() {
                params.extend(a.tensors_mut());
            }
            adam.update(params, &grads);
            task_sum += losses.task;
            distill_sum += losses.distill.unwrap_or(0.0);
            batches += 1;
        }
        let dev = evaluate(&student, maps, &data.dev, cfg.optim.batch_size)?.metrics();
        let entry = EpochLog {
            epoch,
            lambda,
            task_loss: task_sum / batches as f64,
            distill_loss: distilling.then(|| distill_sum / batches as f64),
            dev,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&entry).expect("log serializes");
            writeln!(w, "{line}").map_err(|source| Error::Io {
                path: "<epoch log>".into(),
                source,
            })?;
        }
        logs.push(entry);
        if best.as_ref().is_none_or(|b| dev.overall_acc > b.0) {
            best = Some((
                dev.overall_acc,
                epoch,
                dev,
                student.clone(),
                aligner.clone(),
            ));
        }
    }

    let (_, epoch, dev, best_student, best_aligner) = best.expect("at least one epoch");
    let checkpoint = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg.clone(),
        label_maps: maps.clone(),
        epoch,
        dev,
        teacher_checksum: distilling.then(|| teacher.checksum()),
        student: best_student,
        aligner: best_aligner,
    };
    Ok(TrainOutcome {
        checkpoint,
        log: logs,
        final_student: student,
        final_aligner: aligner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Ablation,
    pub seeds: Vec<u64>,
    /// Test metrics of each seed's best-dev model.
    pub runs: Vec<Metrics>,
    pub intent_acc: Summary,
    pub slot_f1: Summary,
    pub overall_acc: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmReport>,
}

impl AblationReport {
    pub fn arm(&self, arm: Ablation) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

/// Minimum number of seeds for a comparison.
pub const MIN_ABLATION_SEEDS: usize = 3;

/// Trains every arm on every seed (in parallel) and scores each best-dev
/// model on `test`.
pub fn ablate(
    cfg: &RunConfig,
    data: &TrainData,
    test: &[Utterance],
    teacher: &TeacherBackend,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.len() < MIN_ABLATION_SEEDS {
        return Err(Error::Config(format!(
            "ablation needs at least {MIN_ABLATION_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let jobs: Vec<(Ablation, u64)> = Ablation::ALL
        .iter()
        .flat_map(|&arm| seeds.iter().map(move |&s| (arm, s)))
        .collect();
    let results: Vec<Metrics> = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let mut run = cfg.clone();
            run.seed = seed;
            run.distill.ablation = arm;
            let out = train(&run, data, teacher, None)?;
            let ck = &out.checkpoint;
            Ok(evaluate(&ck.student, &ck.label_maps, test, cfg.optim.batch_size)?.metrics())
        })
        .collect::<Result<_>>()?;
    let arms = Ablation::ALL
        .iter()
        .enumerate()
        .map(|(i, &arm)| {
            let runs = results[i * seeds.len()..(i + 1) * seeds.len()].to_vec();
            let pick =
                |f: fn(&Metrics) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
            ArmReport {
                arm,
                seeds: seeds.to_vec(),
                intent_acc: pick(|m| m.intent_acc),
                slot_f1: pick(|m| m.slot_f1),
                overall_acc: pick(|m| m.overall_acc),
                runs,
            }
        })
        .collect();
    Ok(AblationReport { arms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(li: f64, lf: f64, epochs: usize, v: ScheduleVariant, clamp: bool) -> DistillConfig {
        DistillConfig {
            lambda_initial: li,
            lambda_final: lf,
            epochs,
            schedule_variant: v,
            clamp_nonnegative: clamp,
            ablation: Ablation::Full,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let h = sched(0.1, 0.7, 10, ScheduleVariant::Halved, true);
        let l = sched(0.1, 0.7, 10, ScheduleVariant::Literal, false);
        assert!((ddc_lambda(0, &h).unwrap() - 0.1).abs() < 1e-12);
        assert!((ddc_lambda(10, &h).unwrap() - 0.7).abs() < 1e-12);
        assert!((ddc_lambda(10, &l).unwrap() - 0.7).abs() < 1e-12);
        assert!((ddc_lambda(5, &l).unwrap() - 0.1).abs() < 1e-12);
        assert!((ddc_lambda(0, &l).unwrap() - (2.0 * 0.1 - 0.7)).abs() < 1e-12);
        let lc = DistillConfig {
            clamp_nonnegative: true,
            ..l
        };
        assert_eq!(ddc_lambda(0, &lc).unwrap(), 0.0);
        assert!(ddc_lambda(11, &h).is_err());
    }

    #[test]
    fn ablations_fix_lambda() {
        let mut c = sched(0.1, 0.7, 10, ScheduleVariant::Halved, true);
        c.ablation = Ablation::NoDdc;
        assert_eq!(epoch_lambda(0, &c).unwrap(), 0.7);
        c.ablation = Ablation::NoDistill;
        assert_eq!(epoch_lambda(3, &c).unwrap(), 0.0);
        c.ablation = Ablation::NoRpnn;
        assert_eq!(epoch_lambda(0, &c).unwrap(), ddc_lambda(0, &c).unwrap());
    }

    #[test]
    fn total_loss_arithmetic() {
        let tape = Tape::new();
        let t = tape.constant(Tensor::scalar(1.5));
        let d = tape.constant(Tensor::scalar(2.0));
        let v = total_loss(t, d, 0.1).unwrap().value().item();
        assert!((v - 1.7).abs() < 1e-15);
        assert_eq!(total_loss(t, d, 0.0).unwrap().value().item(), 1.5);
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(total_loss(t, z, 0.4).unwrap().value().item(), 1.5);
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let mut p = Tensor::vector(vec![0.3, -2.0, 5.0]);
        let before = p.clone();
        let mut adam = Adam::new(&[&p], &OptimConfig::default());
        for _ in 0..5 {
            adam.update(vec![&mut p], &[Tensor::zeros(&[3])]);
        }
        assert_eq!(p, before);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias correction makes the first step ±lr·g/(|g| + eps)
        let mut p = Tensor::vector(vec![1.0, 1.0]);
        let cfg = OptimConfig::default();
        let mut adam = Adam::new(&[&p], &cfg);
        adam.update(vec![&mut p], &[Tensor::vector(vec![0.5, -4.0])]);
        let want = [
            1.0 - cfg.lr * 0.5 / (0.5 + cfg.eps),
            1.0 + cfg.lr * 4.0 / (4.0 + cfg.eps),
        ];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let (m, v) = adam.moments();
        assert_eq!(m[0].shape(), &[2]);
        assert_eq!(v[0].shape(), &[2]);
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-15);
    }
}
