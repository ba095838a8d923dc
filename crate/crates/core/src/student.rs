//! The joint intent/slot student.
//!
//! Token embeddings feed a bidirectional LSTM; a single-head scaled
//! dot-product self-attention layer turns the concatenated directions into
//! per-token states `u_l`. Slot logits are read from every `u_l`. An
//! attention-pooling layer (`s_l = w_p · u_l`, masked softmax, weighted sum)
//! produces the sentence vector `e^s`, which feeds the intent head and the
//! adapter.
//!
//! Padding never influences valid positions: LSTM states are carried
//! unchanged across padded steps, and every softmax is masked.

use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StudentConfig;
use crate::data::{encode_batch, EncodedBatch, LabelMaps, LabelPolicy, Utterance};
use crate::metrics::{Labels, MetricCounts};
use crate::params::{init_uniform, Linear, Parameters};
use crate::tensor::{Result, Tape, Tensor, Var};

/// Gate order in the packed weights: input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmParams {
    /// `[d_in × 4h]`
    pub w_input: Tensor,
    /// `[h × 4h]`
    pub w_hidden: Tensor,
    /// `[4h]`
    pub bias: Tensor,
}

impl LstmParams {
    fn init(rng: &mut impl Rng, d_in: usize, hidden: usize) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            w_input: init_uniform(rng, &[d_in, 4 * hidden], d_in, 1.0),
            w_hidden: init_uniform(rng, &[hidden, 4 * hidden], hidden, 1.0),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentParams {
    /// `[V × d_emb]`
    pub token_embedding: Tensor,
    pub lstm_forward: LstmParams,
    pub lstm_backward: LstmParams,
    /// `[2h × d_a]` each.
    pub w_query: Tensor,
    pub w_key: Tensor,
    pub w_value: Tensor,
    /// Pooling score vector over `d_es = 2h + d_a`, stored as a column.
    pub pool_score: Tensor,
    pub intent_head: Linear,
    pub slot_head: Linear,
}

impl StudentParams {
    pub fn init(
        rng: &mut impl Rng,
        cfg: &StudentConfig,
        vocab: usize,
        n_intents: usize,
        n_slots: usize,
    ) -> Self {
        let h = cfg.d_lstm;
        let a = cfg.d_attn;
        let d_es = 2 * h + a;
        Self {
            // a lookup reads one row, so its fan-in is 1
            token_embedding: init_uniform(rng, &[vocab, cfg.d_emb], 1, 1.0),
            lstm_forward: LstmParams::init(rng, cfg.d_emb, h),
            lstm_backward: LstmParams::init(rng, cfg.d_emb, h),
            w_query: init_uniform(rng, &[2 * h, a], 2 * h, 1.0),
            w_key: init_uniform(rng, &[2 * h, a], 2 * h, 1.0),
            w_value: init_uniform(rng, &[2 * h, a], 2 * h, 1.0),
            pool_score: init_uniform(rng, &[d_es, 1], d_es, 1.0),
            intent_head: Linear::init(rng, d_es, n_intents, 1.0),
            slot_head: Linear::init(rng, d_es, n_slots, 1.0),
        }
    }

    /// Sentence embedding width `d_es`: BiLSTM state plus attention output.
    pub fn d_es(&self) -> usize {
        self.pool_score.shape()[0]
    }
}

impl Parameters for StudentParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("token_embedding", &self.token_embedding),
            ("lstm_forward.w_input", &self.lstm_forward.w_input),
            ("lstm_forward.w_hidden", &self.lstm_forward.w_hidden),
            ("lstm_forward.bias", &self.lstm_forward.bias),
            ("lstm_backward.w_input", &self.lstm_backward.w_input),
            ("lstm_backward.w_hidden", &self.lstm_backward.w_hidden),
            ("lstm_backward.bias", &self.lstm_backward.bias),
            ("w_query", &self.w_query),
            ("w_key", &self.w_key),
            ("w_value", &self.w_value),
            ("pool_score", &self.pool_score),
            ("intent_head.weight", &self.intent_head.weight),
            ("intent_head.bias", &self.intent_head.bias),
            ("slot_head.weight", &self.slot_head.weight),
            ("slot_head.bias", &self.slot_head.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.token_embedding,
            &mut self.lstm_forward.w_input,
            &mut self.lstm_forward.w_hidden,
            &mut self.lstm_forward.bias,
            &mut self.lstm_backward.w_input,
            &mut self.lstm_backward.w_hidden,
            &mut self.lstm_backward.bias,
            &mut self.w_query,
            &mut self.w_key,
            &mut self.w_value,
            &mut self.pool_score,
            &mut self.intent_head.weight,
            &mut self.intent_head.bias,
            &mut self.slot_head.weight,
            &mut self.slot_head.bias,
        ]
    }
}

struct LstmVars<'t> {
    w_input: Var<'t>,
    w_hidden: Var<'t>,
    bias: Var<'t>,
}

/// Student parameters placed on a tape, in [`Parameters::named`] order.
pub struct StudentVars<'t> {
    token_embedding: Var<'t>,
    forward: LstmVars<'t>,
    backward: LstmVars<'t>,
    w_query: Var<'t>,
    w_key: Var<'t>,
    w_value: Var<'t>,
    pool_score: Var<'t>,
    intent_w: Var<'t>,
    intent_b: Var<'t>,
    slot_w: Var<'t>,
    slot_b: Var<'t>,
}

/// Number of tensors in [`StudentParams`].
pub const STUDENT_TENSORS: usize = 15;

impl<'t> StudentVars<'t> {
    pub fn from_slice(v: &[Var<'t>]) -> Self {
        assert_eq!(v.len(), STUDENT_TENSORS);
        Self {
            token_embedding: v[0],
            forward: LstmVars {
                w_input: v[1],
                w_hidden: v[2],
                bias: v[3],
            },
            backward: LstmVars {
                w_input: v[4],
                w_hidden: v[5],
                bias: v[6],
            },
            w_query: v[7],
            w_key: v[8],
            w_value: v[9],
            pool_score: v[10],
            intent_w: v[11],
            intent_b: v[12],
            slot_w: v[13],
            slot_b: v[14],
        }
    }
}

pub struct StudentOutput<'t> {
    /// `[d_b × n_intents]`
    pub intent_logits: Var<'t>,
    /// `[(d_b·L) × n_slots]`, row `b·L + t`.
    pub slot_logits: Var<'t>,
    /// Sentence embedding `e^s`, `[d_b × d_es]`.
    pub sentence: Var<'t>,
}

/// Dropout rate and the RNG that draws its masks; `None` at evaluation.
pub struct Dropout<'r, R: Rng> {
    pub rate: f64,
    pub rng: &'r mut R,
}

impl<R: Rng> Dropout<'_, R> {
    fn apply<'t>(&mut self, x: Var<'t>) -> Result<Var<'t>> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = x.value().shape().to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if self.rng.random_bool(keep) {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        x.mul_const(Rc::new(Tensor::new(shape, mask)?))
    }
}

fn lstm_step<'t>(
    p: &LstmVars<'t>,
    x: Var<'t>,
    h: Var<'t>,
    c: Var<'t>,
    keep: &[bool],
) -> Result<(Var<'t>, Var<'t>)> {
    let hidden = h.value().last_dim();
    let z = x
        .matmul(p.w_input)?
        .add(h.matmul(p.w_hidden)?)?
        .add_row(p.bias)?;
    let i = z.slice_cols(0, hidden)?.sigmoid();
    let f = z.slice_cols(hidden, hidden)?.sigmoid();
    let g = z.slice_cols(2 * hidden, hidden)?.tanh();
    let o = z.slice_cols(3 * hidden, hidden)?.sigmoid();
    let c_new = f.mul(c)?.add(i.mul(g)?)?;
    let h_new = o.mul(c_new.tanh())?;
    Ok((h_new.select_rows(keep, h)?, c_new.select_rows(keep, c)?))
}

pub fn forward<'t, R: Rng>(
    vars: &StudentVars<'t>,
    batch: &EncodedBatch,
    mut dropout: Option<Dropout<'_, R>>,
) -> Result<StudentOutput<'t>> {
    let tape = vars.token_embedding.tape();
    let n = batch.batch_size();
    let len = batch.max_len();
    let hidden = vars.forward.w_hidden.value().shape()[0];

    let mut inputs = Vec::with_capacity(len);
    let mut keep = Vec::with_capacity(len);
    for t in 0..len {
        let ids: Vec<usize> = (0..n).map(|b| batch.token(b, t)).collect();
        let mut x = vars.token_embedding.gather_rows(&ids)?;
        if let Some(d) = dropout.as_mut() {
            x = d.apply(x)?;
        }
        inputs.push(x);
        keep.push((0..n).map(|b| batch.is_valid(b, t)).collect::<Vec<bool>>());
    }

    let zeros = || tape.constant(Tensor::zeros(&[n, hidden]));
    let mut fwd = Vec::with_capacity(len);
    let (mut h, mut c) = (zeros(), zeros());
    for t in 0..len {
        (h, c) = lstm_step(&vars.forward, inputs[t], h, c, &keep[t])?;
        fwd.push(h);
    }
    let mut bwd = vec![None; len];
    let (mut h, mut c) = (zeros(), zeros());
    for t in (0..len).rev() {
        (h, c) = lstm_step(&vars.backward, inputs[t], h, c, &keep[t])?;
        bwd[t] = Some(h);
    }
    let steps: Vec<Var<'t>> = (0..len)
        .map(|t| Var::concat_cols(&[fwd[t], bwd[t].expect("filled")]))
        .collect::<Result<_>>()?;
    // time-major: row t·n + b
    let states = Var::concat_rows(&steps)?;
    let queries = states.matmul(vars.w_query)?;
    let keys = states.matmul(vars.w_key)?;
    let values = states.matmul(vars.w_value)?;
    let d_attn = values.value().last_dim();
    let scale = 1.0 / (d_attn as f64).sqrt();

    let mut token_states = Vec::with_capacity(n);
    let mut pooled = Vec::with_capacity(n);
    for b in 0..n {
        let rows: Vec<usize> = (0..len).map(|t| t * n + b).collect();
        let q = queries.gather_rows(&rows)?;
        let k = keys.gather_rows(&rows)?;
        let v = values.gather_rows(&rows)?;
        let mask_row = batch.mask.row(b);
        let key_mask = Tensor::new(vec![len, len], mask_row.repeat(len))?;
        let weights = q
            .matmul(k.transpose()?)?
            .scale(scale)
            .softmax_masked(&key_mask)?;
        let attended = weights.matmul(v)?;
        let mut u = Var::concat_cols(&[states.gather_rows(&rows)?, attended])?;
        if let Some(d) = dropout.as_mut() {
            u = d.apply(u)?;
        }
        let pool_mask = Tensor::new(vec![1, len], mask_row.to_vec())?;
        let alpha = u
            .matmul(vars.pool_score)?
            .transpose()?
            .softmax_masked(&pool_mask)?;
        pooled.push(alpha.matmul(u)?);
        token_states.push(u);
    }
    let sentence = Var::concat_rows(&pooled)?;
    let tokens = Var::concat_rows(&token_states)?;
    Ok(StudentOutput {
        intent_logits: sentence.affine(vars.intent_w, vars.intent_b)?,
        slot_logits: tokens.affine(vars.slot_w, vars.slot_b)?,
        sentence,
    })
}

/// `CE(intent) + CE(slots)`, padded slot positions ignored.
pub fn task_loss<'t>(out: &StudentOutput<'t>, batch: &EncodedBatch) -> Result<Var<'t>> {
    let ignore = Some(batch.ignore_index);
    let intent = out
        .intent_logits
        .cross_entropy(&batch.intent_targets, ignore)?;
    let slots = out.slot_logits.cross_entropy(&batch.slot_targets, ignore)?;
    intent.add(slots)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax intent and per-token argmax slot tags at valid positions.
pub fn predict(
    params: &StudentParams,
    batch: &EncodedBatch,
    maps: &LabelMaps,
) -> Result<Vec<Labels>> {
    let tape = Tape::new();
    let vars = StudentVars::from_slice(&params.register(&tape, false));
    let out = forward::<rand_chacha::ChaCha8Rng>(&vars, batch, None)?;
    let intents = out.intent_logits.value();
    let slots = out.slot_logits.value();
    let len = batch.max_len();
    Ok((0..batch.batch_size())
        .map(|b| Labels {
            intent: maps.intents.name(argmax(intents.row(b))).to_string(),
            slots: (0..batch.lengths[b])
                .map(|t| maps.slots.name(argmax(slots.row(b * len + t))).to_string())
                .collect(),
        })
        .collect())
}

/// Scores the student on a corpus; gold labels unseen in training simply
/// never match. Batches run in parallel over read-only parameters.
pub fn evaluate(
    params: &StudentParams,
    maps: &LabelMaps,
    corpus: &[Utterance],
    batch_size: usize,
) -> crate::error::Result<MetricCounts> {
    let batches: Vec<&[Utterance]> = corpus.chunks(batch_size.max(1)).collect();
    let counts: Vec<MetricCounts> = batches
        .par_iter()
        .map(|chunk| -> crate::error::Result<MetricCounts> {
            let refs: Vec<&Utterance> = chunk.iter().collect();
            let batch = encode_batch(&refs, maps, LabelPolicy::Lenient, -100)?;
            let preds = predict(params, &batch, maps)?;
            let mut c = MetricCounts::default();
            for (u, p) in chunk.iter().zip(&preds) {
                let gold = Labels {
                    intent: u.intent.clone(),
                    slots: u.slot_tags.clone(),
                };
                c.add(&gold, p);
            }
            Ok(c)
        })
        .collect::<crate::error::Result<_>>()?;
    let mut total = MetricCounts::default();
    for c in &counts {
        total.merge(c);
    }
    Ok(total)
}
