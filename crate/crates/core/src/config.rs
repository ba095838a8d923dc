//! Run configuration. Every field has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_IGNORE_INDEX;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    /// Token embedding width.
    pub d_emb: usize,
    /// LSTM hidden size per direction.
    pub d_lstm: usize,
    /// Attention width; also the sentence embedding width `d_es`.
    pub d_attn: usize,
    pub dropout: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            d_emb: 32,
            d_lstm: 32,
            d_attn: 32,
            dropout: 0.4,
        }
    }
}

/// Which self-consistent shape reading of the residual block to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualWidth {
    /// Branch maps back to `d_h`; the skip adds the full `h1`.
    Dh,
    /// Branch maps to `d_es`; the skip adds the first `d_es` coordinates of `h1`.
    Des,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub residual_width: ResidualWidth,
    /// Teacher embedding width `d_et`.
    pub d_teacher: usize,
    /// Multiplier on the initial output projection.
    pub output_init_scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            residual_width: ResidualWidth::Dh,
            d_teacher: 64,
            output_init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    /// `λ_f + (λ_i − λ_f)(1 + cos(eπ/E))`.
    Literal,
    /// `λ_f + (λ_i − λ_f)(1 + cos(eπ/E))/2`, running from `λ_i` to `λ_f`.
    Halved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// A single linear map replaces the residual projection network.
    NoRpnn,
    /// Constant `λ_final` instead of the schedule.
    NoDdc,
    /// No distillation term at all.
    NoDistill,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoRpnn,
        Ablation::NoDdc,
        Ablation::NoDistill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRpnn => "no_rpnn",
            Ablation::NoDdc => "no_ddc",
            Ablation::NoDistill => "no_distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_initial: f64,
    pub lambda_final: f64,
    pub epochs: usize,
    pub schedule_variant: ScheduleVariant,
    pub clamp_nonnegative: bool,
    pub ablation: Ablation,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_initial: 0.1,
            lambda_final: 0.7,
            epochs: 50,
            schedule_variant: ScheduleVariant::Halved,
            clamp_nonnegative: true,
            ablation: Ablation::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub student: StudentConfig,
    pub adapter: AdapterConfig,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub ignore_index: i64,
    /// Corpus directory; the `--data` flag takes precedence.
    pub data: Option<String>,
    /// Teacher spec (`file:PATH` or `synth:SEED`); the `--teacher` flag takes precedence.
    pub teacher: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            student: StudentConfig::default(),
            adapter: AdapterConfig::default(),
            distill: DistillConfig::default(),
            optim: OptimConfig::default(),
            ignore_index: DEFAULT_IGNORE_INDEX,
            data: None,
            teacher: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let s = &self.student;
        if s.d_emb == 0 || s.d_lstm == 0 || s.d_attn == 0 || self.adapter.d_teacher == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&s.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", s.dropout));
        }
        let d = &self.distill;
        if d.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if d.lambda_initial < 0.0 || d.lambda_final < 0.0 {
            return bad("lambda values must be non-negative".into());
        }
        if self.optim.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.optim.lr.is_nan() || self.optim.lr <= 0.0 {
            return bad(format!("lr must be positive, got {}", self.optim.lr));
        }
        if self.ignore_index >= 0 {
            return bad("ignore_index must be negative".into());
        }
        Ok(())
    }
}
