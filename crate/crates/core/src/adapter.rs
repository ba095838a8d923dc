//! Maps student sentence embeddings into the teacher's embedding space.
//!
//! The residual projection network expands `e^s` to `d_h = 4·d_es` with
//! GELU and LayerNorm, applies a feed-forward block with a skip connection,
//! and finishes with a linear map to `d_et`:
//!
//! ```text
//! h1  = LN1(GELU(e_s·W1 + b1))
//! h2  = LN2(skip(h1) + GELU(h1·W2 + b2)·W3 + b3)
//! e^S = h2·W4 + b4
//! ```
//!
//! The branch width cannot match the skip under every printed shape, so two
//! readings exist (see [`ResidualWidth`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdapterConfig, ResidualWidth};
use crate::params::{init_uniform, Linear, Parameters};
use crate::tensor::{Result, Tensor, TensorError, Var, LAYER_NORM_EPS};

/// Hidden expansion factor: `d_h = 4·d_es`.
pub const EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterParams {
    pub residual_width: ResidualWidth,
    /// `[d_es × d_h]`, `[d_h]`
    pub w1: Tensor,
    pub b1: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[d_h × d_h]`, `[d_h]`
    pub w2: Tensor,
    pub b2: Tensor,
    /// `[d_h × d_r]`, `[d_r]` where `d_r` is `d_h` or `d_es`.
    pub w3: Tensor,
    pub b3: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `[d_r × d_et]`, `[d_et]`
    pub w4: Tensor,
    pub b4: Tensor,
}

impl AdapterParams {
    pub fn init(rng: &mut impl Rng, cfg: &AdapterConfig, d_es: usize) -> Self {
        let d_h = EXPANSION * d_es;
        let d_r = match cfg.residual_width {
            ResidualWidth::Dh => d_h,
            ResidualWidth::Des => d_es,
        };
        Self {
            residual_width: cfg.residual_width,
            w1: init_uniform(rng, &[d_es, d_h], d_es, 1.0),
            b1: Tensor::zeros(&[d_h]),
            ln1_gain: Tensor::full(&[d_h], 1.0),
            ln1_bias: Tensor::zeros(&[d_h]),
            w2: init_uniform(rng, &[d_h, d_h], d_h, 1.0),
            b2: Tensor::zeros(&[d_h]),
            w3: init_uniform(rng, &[d_h, d_r], d_h, 1.0),
            b3: Tensor::zeros(&[d_r]),
            ln2_gain: Tensor::full(&[d_r], 1.0),
            ln2_bias: Tensor::zeros(&[d_r]),
            w4: init_uniform(rng, &[d_r, cfg.d_teacher], d_r, cfg.output_init_scale),
            b4: Tensor::zeros(&[cfg.d_teacher]),
        }
    }

    pub fn d_es(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_et(&self) -> usize {
        self.w4.shape()[1]
    }
}

impl Parameters for AdapterParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w4", &self.w4),
            ("b4", &self.b4),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w4,
            &mut self.b4,
        ]
    }
}

/// Residual projection forward pass over tape variables in
/// [`AdapterParams::named`] order.
pub fn project<'t>(width: ResidualWidth, p: &[Var<'t>], e_s: Var<'t>) -> Result<Var<'t>> {
    let [w1, b1, g1, c1, w2, b2, w3, b3, g2, c2, w4, b4] = p else {
        return Err(TensorError::Invalid {
            op: "project",
            msg: format!("expected 12 adapter tensors, got {}", p.len()),
        });
    };
    let d_es = w1.value().shape()[0];
    let got = e_s.value().dims2("project")?.1;
    if got != d_es {
        return Err(TensorError::ShapeMismatch {
            op: "project",
            left: e_s.value().shape().to_vec(),
            right: w1.value().shape().to_vec(),
        });
    }
    let h1 = e_s
        .affine(*w1, *b1)?
        .gelu()
        .layer_norm(*g1, *c1, LAYER_NORM_EPS)?;
    let branch = h1.affine(*w2, *b2)?.gelu().affine(*w3, *b3)?;
    let skip = match width {
        ResidualWidth::Dh => h1,
        ResidualWidth::Des => h1.slice_cols(0, d_es)?,
    };
    let h2 = skip.add(branch)?.layer_norm(*g2, *c2, LAYER_NORM_EPS)?;
    h2.affine(*w4, *b4)
}

/// The module that aligns `e^s` with the teacher: the residual network, or a
/// single linear map when that network is ablated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Aligner {
    Rpnn(AdapterParams),
    Linear(Linear),
}

impl Aligner {
    pub fn rpnn(rng: &mut impl Rng, cfg: &AdapterConfig, d_es: usize) -> Self {
        Aligner::Rpnn(AdapterParams::init(rng, cfg, d_es))
    }

    pub fn linear(rng: &mut impl Rng, cfg: &AdapterConfig, d_es: usize) -> Self {
        Aligner::Linear(Linear::init(
            rng,
            d_es,
            cfg.d_teacher,
            cfg.output_init_scale,
        ))
    }

    /// Forward pass over tape variables in [`Parameters::named`] order.
    pub fn forward<'t>(&self, p: &[Var<'t>], e_s: Var<'t>) -> Result<Var<'t>> {
        match self {
            Aligner::Rpnn(params) => project(params.residual_width, p, e_s),
            Aligner::Linear(_) => e_s.affine(p[0], p[1]),
        }
    }
}

impl Parameters for Aligner {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Aligner::Rpnn(p) => p.named(),
            Aligner::Linear(l) => l.named(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Aligner::Rpnn(p) => p.tensors_mut(),
            Aligner::Linear(l) => l.tensors_mut(),
        }
    }
}
