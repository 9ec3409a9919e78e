//! Positional encodings: ExPE, ExQPE, RoPE, sinusoidal and learned-absolute,
//! plus inference-time scaling and a low-precision collision analyzer.

mod additive;
mod exact;
mod quant;
mod rope;

use serde::{Deserialize, Serialize};

use crate::error::{key_path, Error, Result};

pub use additive::{additive_apply, sinusoidal_rows, sinusoidal_table};
pub use exact::{
    expe_apply, expe_position_vector, expe_table, exqpe_apply, exqpe_position_vector,
    exqpe_recurrence, exqpe_table, learned_scalar_params, LearnedExpe,
};
pub use quant::{quantization_sensitivity, round_to_format, CollisionReport, FloatFormat};
pub use rope::{rope_apply, rope_tables};

/// ExPE: the first `l` dims of token `n` become `scale·(S + θ·j)` for `j = n..n+l`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpeParams {
    #[serde(default)]
    pub start: f64,
    pub theta: f64,
    pub l: usize,
    #[serde(default = "one")]
    pub scale: f64,
}

/// ExQPE: a ramp of width `l` where position `i` bumps slot `i mod l` by `θ2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExqpeParams {
    #[serde(default)]
    pub start: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub l: usize,
    #[serde(default = "one")]
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeParams {
    #[serde(default = "rope_base")]
    pub theta_base: f64,
}

impl Default for RopeParams {
    fn default() -> Self {
        Self {
            theta_base: rope_base(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn rope_base() -> f64 {
    10_000.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnedMode {
    #[default]
    Off,
    LearnedRandom,
    LearnedInitialized,
}

/// Variations on ExPE/ExQPE used by the ablation suite.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Fill all `l` slots with `p_n` instead of the window `p_n..p_{n+l-1}`.
    pub stable_p: bool,
    /// Encode only in front of the first block.
    pub apply_once: bool,
    pub learned_params: LearnedMode,
}

impl AblationFlags {
    pub fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoding {
    Expe(ExpeParams),
    Exqpe(ExqpeParams),
    Rope(RopeParams),
    Sinusoidal,
    LearnedAbsolute { max_len: usize },
    /// No positional signal; used to isolate attention behaviour in tests.
    None,
}

/// One active encoding plus its ablation flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingScheme {
    pub encoding: Encoding,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl From<Encoding> for EncodingScheme {
    fn from(encoding: Encoding) -> Self {
        Self {
            encoding,
            ablation: AblationFlags::default(),
        }
    }
}

impl Encoding {
    pub fn name(&self) -> &'static str {
        match self {
            Encoding::Expe(_) => "expe",
            Encoding::Exqpe(_) => "exqpe",
            Encoding::Rope(_) => "rope",
            Encoding::Sinusoidal => "sinusoidal",
            Encoding::LearnedAbsolute { .. } => "learned_absolute",
            Encoding::None => "none",
        }
    }

    /// Override width for the exact schemes.
    pub fn width(&self) -> Option<usize> {
        match self {
            Encoding::Expe(p) => Some(p.l),
            Encoding::Exqpe(p) => Some(p.l),
            _ => None,
        }
    }

    pub fn scale(&self) -> Option<f64> {
        match self {
            Encoding::Expe(p) => Some(p.scale),
            Encoding::Exqpe(p) => Some(p.scale),
            _ => None,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Encoding::Expe(_) | Encoding::Exqpe(_))
    }

    /// Defaults for a model of width `d_model` trained on `seq_len`.
    pub fn default_expe(d_model: usize, seq_len: usize) -> Self {
        Encoding::Expe(ExpeParams {
            start: 0.0,
            theta: default_theta(seq_len),
            l: (d_model / 8).max(1),
            scale: 1.0,
        })
    }

    pub fn default_exqpe(d_model: usize, seq_len: usize) -> Self {
        Encoding::Exqpe(ExqpeParams {
            start: 0.0,
            theta1: default_theta(seq_len),
            theta2: 1.0 / 16.0,
            l: (d_model / 8).max(1),
            scale: 1.0,
        })
    }
}

/// `1 / (2·seq_len)`: position values of a training window span about `[0, 0.5]`.
pub fn default_theta(seq_len: usize) -> f64 {
    1.0 / (2.0 * seq_len as f64)
}

impl EncodingScheme {
    pub fn name(&self) -> &'static str {
        self.encoding.name()
    }

    /// Checks parameter invariants against the model width; errors carry
    /// key paths rooted at `prefix`.
    pub fn validate(&self, prefix: &str, d_model: usize, head_dim: usize) -> Vec<Error> {
        let mut errs = Vec::new();
        let key = |k: &str| key_path(prefix, k);
        let positive = |name: &str, v: f64, errs: &mut Vec<Error>| {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(Error::config(key(name), format!("must be > 0, got {v}")));
            }
        };
        match self.encoding {
            Encoding::Expe(p) => {
                positive("theta", p.theta, &mut errs);
                positive("scale", p.scale, &mut errs);
            }
            Encoding::Exqpe(p) => {
                positive("theta2", p.theta2, &mut errs);
                positive("scale", p.scale, &mut errs);
                if !(p.theta1 >= 0.0) {
                    errs.push(Error::config(key("theta1"), "must be >= 0"));
                }
            }
            Encoding::Rope(p) => {
                positive("theta_base", p.theta_base, &mut errs);
                if head_dim % 2 != 0 {
                    errs.push(Error::config(
                        key("kind"),
                        format!("rope needs an even head size, got {head_dim}"),
                    ));
                }
            }
            Encoding::Sinusoidal => {
                if d_model % 2 != 0 {
                    errs.push(Error::config(
                        key("kind"),
                        format!("sinusoidal needs an even d_model, got {d_model}"),
                    ));
                }
            }
            Encoding::LearnedAbsolute { max_len } => {
                if max_len == 0 {
                    errs.push(Error::config(key("max_len"), "must be >= 1"));
                }
            }
            Encoding::None => {}
        }
        if let Some(l) = self.encoding.width() {
            if l == 0 || l > d_model {
                errs.push(Error::config(
                    key("l"),
                    format!("must be in [1, d_model={d_model}], got {l}"),
                ));
            }
        }
        if !self.ablation.is_default() && !self.encoding.is_exact() {
            errs.push(Error::config(
                key("ablation"),
                "ablation flags apply only to expe/exqpe",
            ));
        }
        if self.ablation.learned_params != LearnedMode::Off
            && !matches!(self.encoding, Encoding::Expe(_))
        {
            errs.push(Error::config(
                key("ablation.learned_params"),
                "learned start/theta is defined for expe only",
            ));
        }
        errs
    }
}

/// Multiplies the emitted position values of an ExPE/ExQPE scheme by `factor`.
pub fn scale_encoding(scheme: &EncodingScheme, factor: f64) -> Result<EncodingScheme> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::config("scale", format!("factor must be > 0, got {factor}")));
    }
    let mut out = *scheme;
    match &mut out.encoding {
        Encoding::Expe(p) => p.scale *= factor,
        Encoding::Exqpe(p) => p.scale *= factor,
        other => {
            return Err(Error::UnsupportedScheme {
                op: "scale_encoding",
                scheme: other.name().to_string(),
            })
        }
    }
    Ok(out)
}
