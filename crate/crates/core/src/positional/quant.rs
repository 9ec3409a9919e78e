//! Simulated low-precision rounding and adjacent-position collision counting.

use serde::{Deserialize, Serialize};

use super::exact::{expe_position_vector, exqpe_position_vector};
use super::{additive::sinusoidal_rows, rope::rope_tables, Encoding, EncodingScheme};
use crate::error::{Error, Result};

/// Binary floating-point layout: sign bit, `exp_bits` exponent, `man_bits`
/// stored mantissa bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatFormat {
    pub exp_bits: u32,
    pub man_bits: u32,
}

impl FloatFormat {
    pub const BF16: Self = Self::new(8, 7);
    pub const FP16: Self = Self::new(5, 10);
    pub const TF32: Self = Self::new(8, 10);
    pub const FP32: Self = Self::new(8, 23);
    pub const FP64: Self = Self::new(11, 52);

    pub const fn new(exp_bits: u32, man_bits: u32) -> Self {
        Self { exp_bits, man_bits }
    }

    /// Accepts `bf16`, `bf16-sim`, `fp16`, `tf32`, `fp32`, `fp64`, or `e<E>m<M>`.
    pub fn parse(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let fmt = match lower.trim_end_matches("-sim") {
            "bf16" => Self::BF16,
            "fp16" | "f16" => Self::FP16,
            "tf32" => Self::TF32,
            "fp32" | "f32" => Self::FP32,
            "fp64" | "f64" => Self::FP64,
            other => {
                let parsed = other
                    .strip_prefix('e')
                    .and_then(|r| r.split_once('m'))
                    .and_then(|(e, m)| Some(Self::new(e.parse().ok()?, m.parse().ok()?)));
                parsed.ok_or_else(|| Error::config("format", format!("unknown float format `{name}`")))?
            }
        };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.man_bits < 1 || self.man_bits > 52 {
            return Err(Error::config(
                "format.man_bits",
                format!("must be in [1, 52], got {}", self.man_bits),
            ));
        }
        if self.exp_bits < 2 || self.exp_bits > 11 {
            return Err(Error::config(
                "format.exp_bits",
                format!("must be in [2, 11], got {}", self.exp_bits),
            ));
        }
        Ok(())
    }

    fn bias(&self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    pub fn max_finite(&self) -> f64 {
        let m = self.man_bits as i32;
        (2.0 - 2f64.powi(-m)) * 2f64.powi(self.bias())
    }
}

/// Rounds `x` to the nearest value of `fmt`, ties to even, keeping
/// subnormals; magnitudes past the largest finite value become infinite.
pub fn round_to_format(x: f64, fmt: FloatFormat) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let emin = 1 - fmt.bias();
    let biased = ((x.to_bits() >> 52) & 0x7ff) as i32;
    let e = if biased == 0 {
        x.abs().log2().floor() as i32
    } else {
        biased - 1023
    };
    let quantum = 2f64.powi(e.max(emin) - fmt.man_bits as i32);
    let r = (x / quantum).round_ties_even() * quantum;
    if r.abs() > fmt.max_finite() {
        f64::INFINITY.copysign(x)
    } else {
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub scheme: String,
    pub format: FloatFormat,
    /// Smallest `n` whose rounded vector equals that of `n + 1`.
    pub first_collision: Option<usize>,
    pub collision_count: usize,
    pub max_len: usize,
}

fn position_vector(scheme: &EncodingScheme, dim: usize, n: usize) -> Result<Vec<f64>> {
    Ok(match &scheme.encoding {
        Encoding::Expe(p) => expe_position_vector(n, p, scheme.ablation.stable_p),
        Encoding::Exqpe(p) => exqpe_position_vector(n, p),
        Encoding::Rope(p) => {
            let (mut c, s) = rope_tables::<f64>(1, n, dim, p);
            c.extend(s);
            c
        }
        Encoding::Sinusoidal => sinusoidal_rows(n, 1, dim),
        other => {
            return Err(Error::UnsupportedScheme {
                op: "quantization_sensitivity",
                scheme: other.name().to_string(),
            })
        }
    })
}

/// Rounds the vectors of positions `0..max_len` to `fmt` and counts adjacent
/// pairs that become indistinguishable. `dim` is the table width used by
/// RoPE (head size) and sinusoidal (model width); exact schemes use `l`.
pub fn quantization_sensitivity(
    scheme: &EncodingScheme,
    dim: usize,
    max_len: usize,
    fmt: FloatFormat,
) -> Result<CollisionReport> {
    fmt.validate()?;
    if max_len < 2 {
        return Err(Error::config("max_len", format!("must be >= 2, got {max_len}")));
    }
    if matches!(scheme.encoding, Encoding::Rope(_) | Encoding::Sinusoidal) && (dim == 0 || dim % 2 != 0) {
        return Err(Error::config("dim", format!("must be even and positive, got {dim}")));
    }
    let round = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| round_to_format(x, fmt)).collect() };
    let mut first = None;
    let mut count = 0;
    let mut prev = round(position_vector(scheme, dim, 0)?);
    for n in 1..max_len {
        let cur = round(position_vector(scheme, dim, n)?);
        if cur == prev {
            count += 1;
            first.get_or_insert(n - 1);
        }
        prev = cur;
    }
    Ok(CollisionReport {
        scheme: scheme.name().to_string(),
        format: fmt,
        first_collision: first,
        collision_count: count,
        max_len,
    })
}
