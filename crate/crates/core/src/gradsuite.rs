//! Finite-difference gradient checks over every differentiable op, the
//! adapter, the task loss, and the full distillation objective.
//!
//! Tensor-valued ops are reduced to a scalar as `Σ w ⊙ op(x)` with a random
//! constant `w`, so every output coordinate contributes to the check.

use std::rc::Rc;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::{project, AdapterParams, Aligner};
use crate::config::{AdapterConfig, ResidualWidth, StudentConfig};
use crate::data::{encode_batch, gen_synthetic, EncodedBatch, LabelMaps, LabelPolicy, SynthConfig};
use crate::error::Result;
use crate::params::{init_uniform, Parameters};
use crate::rng::{stream, Stream};
use crate::student::{forward, task_loss, StudentParams, StudentVars, STUDENT_TENSORS};
use crate::tensor::{agrees, finite_diff_pairs, relative_error, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::trainer::total_loss;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Absolute slack for the round-off-aware comparison: about `ε·|f|/h` for
/// losses of order one at `h = 1e-6`.
pub const ROUNDOFF_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    /// Worst `|a − n| / max(1e-8, |a| + |n|)` over all coordinates.
    pub max_rel_err: f64,
    /// Gradient magnitude at the worst coordinate.
    pub worst_grad: f64,
    /// Whether every coordinate agrees within `TOLERANCE` relative error plus
    /// `ROUNDOFF_SLACK`.
    pub within_roundoff: bool,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn check<F>(name: &str, seed: u64, f: F, inputs: &[Tensor]) -> Result<CheckResult>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::tensor::Result<Var<'t>> + Sync,
{
    let pairs = finite_diff_pairs(f, inputs, STEP)?;
    let mut worst = (0.0, 0.0);
    let mut within = true;
    for &(a, n) in pairs.iter().flatten() {
        let e = relative_error(a, n);
        if e > worst.0 {
            worst = (e, a);
        }
        within &= agrees(a, n, TOLERANCE, ROUNDOFF_SLACK);
    }
    Ok(CheckResult {
        name: name.to_string(),
        seed,
        max_rel_err: worst.0,
        worst_grad: worst.1,
        within_roundoff: within,
    })
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    init_uniform(rng, shape, 1, 1.0)
}

fn weighted<'t>(tape: &'t Tape, w: &Tensor, y: Var<'t>) -> crate::tensor::Result<Var<'t>> {
    Ok(y.mul(tape.constant(w.clone()))?.sum())
}

/// Every differentiable tensor op on random shapes up to 8×8.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = stream(seed, Stream::Init);
    let dim = |rng: &mut ChaCha8Rng| rng.random_range(1..=8usize);
    let (n, k, m) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
    let d2 = dim(&mut rng).max(2);
    let mut out = Vec::new();

    let a = random(&mut rng, &[n, k]);
    let b = random(&mut rng, &[k, m]);
    let w_nm = random(&mut rng, &[n, m]);
    out.push(check(
        "matmul",
        seed,
        |t, v| weighted(t, &w_nm, v[0].matmul(v[1])?),
        &[a.clone(), b],
    )?);

    let w_kn = random(&mut rng, &[k, n]);
    out.push(check(
        "transpose",
        seed,
        |t, v| weighted(t, &w_kn, v[0].transpose()?),
        std::slice::from_ref(&a),
    )?);

    let a2 = random(&mut rng, &[n, k]);
    let w_nk = random(&mut rng, &[n, k]);
    for (name, op) in [("add", 0u8), ("sub", 1), ("mul", 2)] {
        out.push(check(
            name,
            seed,
            |t, v| {
                let y = match op {
                    0 => v[0].add(v[1])?,
                    1 => v[0].sub(v[1])?,
                    _ => v[0].mul(v[1])?,
                };
                weighted(t, &w_nk, y)
            },
            &[a.clone(), a2.clone()],
        )?);
    }

    let bias = random(&mut rng, &[k]);
    out.push(check(
        "add_row",
        seed,
        |t, v| weighted(t, &w_nk, v[0].add_row(v[1])?),
        &[a.clone(), bias],
    )?);

    let wt = random(&mut rng, &[k, m]);
    let bt = random(&mut rng, &[m]);
    out.push(check(
        "affine",
        seed,
        |t, v| weighted(t, &w_nm, v[0].affine(v[1], v[2])?),
        &[a.clone(), wt, bt],
    )?);

    let c = rng.random_range(-2.0..2.0);
    out.push(check(
        "scale",
        seed,
        |t, v| weighted(t, &w_nk, v[0].scale(c)),
        std::slice::from_ref(&a),
    )?);

    let konst = random(&mut rng, &[n, k]);
    out.push(check(
        "mul_const",
        seed,
        |t, v| weighted(t, &w_nk, v[0].mul_const(Rc::new(konst.clone()))?),
        std::slice::from_ref(&a),
    )?);

    out.push(check(
        "sum",
        seed,
        |_, v| Ok(v[0].sum()),
        std::slice::from_ref(&a),
    )?);

    let wide = init_uniform(&mut rng, &[n, k], 1, 3.0);
    out.push(check(
        "sigmoid",
        seed,
        |t, v| weighted(t, &w_nk, v[0].sigmoid()),
        std::slice::from_ref(&wide),
    )?);
    out.push(check(
        "tanh",
        seed,
        |t, v| weighted(t, &w_nk, v[0].tanh()),
        std::slice::from_ref(&wide),
    )?);
    out.push(check(
        "gelu",
        seed,
        |t, v| weighted(t, &w_nk, v[0].gelu()),
        &[wide],
    )?);

    let x_ln = random(&mut rng, &[n, d2]);
    let gain = random(&mut rng, &[d2]);
    let shift = random(&mut rng, &[d2]);
    let w_ln = random(&mut rng, &[n, d2]);
    out.push(check(
        "layer_norm",
        seed,
        |t, v| weighted(t, &w_ln, v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)?),
        &[x_ln, gain, shift],
    )?);

    let logits = init_uniform(&mut rng, &[n, k], 1, 3.0);
    let mask_data: Vec<f64> = (0..n * k)
        .map(|i| {
            if i % k == 0 || rng.random_bool(0.7) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::new(vec![n, k], mask_data)?;
    out.push(check(
        "softmax_masked",
        seed,
        |t, v| weighted(t, &w_nk, v[0].softmax_masked(&mask)?),
        std::slice::from_ref(&logits),
    )?);

    out.push(check(
        "mse_sum",
        seed,
        |_, v| v[0].mse_sum(v[1]),
        &[a.clone(), a2],
    )?);

    let mut targets: Vec<i64> = (0..n).map(|_| rng.random_range(0..k as i64)).collect();
    if n > 1 {
        targets[n - 1] = -100;
    }
    out.push(check(
        "cross_entropy",
        seed,
        |_, v| v[0].cross_entropy(&targets, Some(-100)),
        &[logits],
    )?);

    let index: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..n)).collect();
    let w_g = random(&mut rng, &[index.len(), k]);
    out.push(check(
        "gather_rows",
        seed,
        |t, v| weighted(t, &w_g, v[0].gather_rows(&index)?),
        std::slice::from_ref(&a),
    )?);

    let start = rng.random_range(0..k);
    let width = rng.random_range(1..=k - start);
    let w_s = random(&mut rng, &[n, width]);
    out.push(check(
        "slice_cols",
        seed,
        |t, v| weighted(t, &w_s, v[0].slice_cols(start, width)?),
        std::slice::from_ref(&a),
    )?);

    let side = random(&mut rng, &[n, m]);
    let w_cc = random(&mut rng, &[n, k + m]);
    out.push(check(
        "concat_cols",
        seed,
        |t, v| weighted(t, &w_cc, Var::concat_cols(&[v[0], v[1]])?),
        &[a.clone(), side],
    )?);

    let below = random(&mut rng, &[m, k]);
    let w_cr = random(&mut rng, &[n + m, k]);
    out.push(check(
        "concat_rows",
        seed,
        |t, v| weighted(t, &w_cr, Var::concat_rows(&[v[0], v[1]])?),
        &[a.clone(), below],
    )?);

    let other = random(&mut rng, &[n, k]);
    let keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    out.push(check(
        "select_rows",
        seed,
        |t, v| weighted(t, &w_nk, v[0].select_rows(&keep, v[1])?),
        &[a, other],
    )?);

    Ok(out)
}

/// A small labelled batch of two utterances with its label maps.
fn tiny_batch(seed: u64) -> Result<(EncodedBatch, LabelMaps)> {
    let corpus = gen_synthetic(&SynthConfig {
        seed,
        n_train: 2,
        n_dev: 1,
        n_test: 1,
        vocab: 14,
        n_intents: 2,
        n_slot_types: 2,
        d_et: 6,
    })?;
    let maps = LabelMaps::build(&corpus.train);
    let refs: Vec<_> = corpus.train.iter().collect();
    let batch = encode_batch(&refs, &maps, LabelPolicy::Strict, -100)?;
    Ok((batch, maps))
}

pub fn tiny_student_config() -> StudentConfig {
    StudentConfig {
        d_emb: 4,
        d_lstm: 3,
        d_attn: 4,
        dropout: 0.0,
    }
}

fn adapter_config(width: ResidualWidth) -> AdapterConfig {
    AdapterConfig {
        residual_width: width,
        d_teacher: 6,
        output_init_scale: 0.1,
    }
}

/// `mse_sum(project(e_s), target)` with initialized parameters, `d_es = 4`,
/// `d_et = 6`, batch 2, under both residual readings.
pub fn project_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for width in [ResidualWidth::Dh, ResidualWidth::Des] {
        let mut rng = stream(seed, Stream::Init);
        let params = AdapterParams::init(&mut rng, &adapter_config(width), 4);
        let mut inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        inputs.push(random(&mut rng, &[2, 4]));
        let target = random(&mut rng, &[2, 6]);
        let name = match width {
            ResidualWidth::Dh => "project[dh]",
            ResidualWidth::Des => "project[des]",
        };
        out.push(check(
            name,
            seed,
            |t, v| project(width, &v[..12], v[12])?.mse_sum(t.constant(target.clone())),
            &inputs,
        )?);
    }
    Ok(out)
}

/// Task loss of an initialized student on a two-utterance batch.
pub fn task_loss_check(seed: u64) -> Result<CheckResult> {
    let (batch, maps) = tiny_batch(seed)?;
    let mut rng = stream(seed, Stream::Init);
    let student = StudentParams::init(
        &mut rng,
        &tiny_student_config(),
        maps.tokens.len(),
        maps.intents.len(),
        maps.slots.len(),
    );
    let inputs: Vec<Tensor> = student.tensors().into_iter().cloned().collect();
    check(
        "task_loss",
        seed,
        |_, v| {
            let out = forward::<ChaCha8Rng>(&StudentVars::from_slice(v), &batch, None)?;
            task_loss(&out, &batch)
        },
        &inputs,
    )
}

/// `L_task + λ·L_distill` through the student and the residual adapter.
pub fn total_loss_check(seed: u64) -> Result<CheckResult> {
    let (batch, maps) = tiny_batch(seed)?;
    let mut rng = stream(seed, Stream::Init);
    let cfg = tiny_student_config();
    let student = StudentParams::init(
        &mut rng,
        &cfg,
        maps.tokens.len(),
        maps.intents.len(),
        maps.slots.len(),
    );
    let aligner = Aligner::rpnn(
        &mut rng,
        &adapter_config(ResidualWidth::Dh),
        2 * cfg.d_lstm + cfg.d_attn,
    );
    let teacher = random(&mut rng, &[batch.batch_size(), 6]);
    let lambda = 0.1 + 0.6 * (rng.next_u32() as f64 / u32::MAX as f64);
    let mut inputs: Vec<Tensor> = student.tensors().into_iter().cloned().collect();
    inputs.extend(aligner.tensors().into_iter().cloned());
    check(
        "total_loss",
        seed,
        |t, v| {
            let out = forward::<ChaCha8Rng>(
                &StudentVars::from_slice(&v[..STUDENT_TENSORS]),
                &batch,
                None,
            )?;
            let task = task_loss(&out, &batch)?;
            let projected = aligner.forward(&v[STUDENT_TENSORS..], out.sentence)?;
            let distill = t.constant(teacher.clone()).mse_sum(projected)?;
            total_loss(task, distill, lambda)
        },
        &inputs,
    )
}

/// The whole suite for one seed.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.extend(project_checks(seed)?);
    out.push(task_loss_check(seed)?);
    out.push(total_loss_check(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_agree_within_roundoff() {
        for seed in 0..3 {
            for r in op_checks(seed).unwrap() {
                assert!(
                    r.within_roundoff,
                    "{} seed {}: {}",
                    r.name, r.seed, r.max_rel_err
                );
            }
        }
    }

    #[test]
    fn well_conditioned_ops_pass_the_relative_bound() {
        // a two-wide layer_norm row outputs ±1 whatever its input, so its
        // gradient is eps-sized and only the round-off bound applies
        for seed in 0..3 {
            for r in op_checks(seed).unwrap() {
                if r.name != "layer_norm" {
                    assert!(r.passes(), "{} seed {}: {}", r.name, r.seed, r.max_rel_err);
                }
            }
        }
    }

    #[test]
    fn model_gradients_agree_within_roundoff() {
        for seed in 0..2 {
            let mut rs = project_checks(seed).unwrap();
            rs.push(task_loss_check(seed).unwrap());
            rs.push(total_loss_check(seed).unwrap());
            for r in rs {
                assert!(
                    r.within_roundoff,
                    "{} seed {}: {}",
                    r.name, r.seed, r.max_rel_err
                );
            }
        }
    }
}
