use serde::{Deserialize, Serialize};

use crate::error::{key_path, Error};
use crate::positional::{AblationFlags, Encoding, EncodingScheme};

/// Architecture hyperparameters. Defaults are the desk-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Training sequence length.
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_size: usize,
    pub n_layers: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub encoding: Encoding,
    /// Also feed the position-overridden input to the value projection.
    pub apply_to_value: bool,
    pub ablation: AblationFlags,
    pub init_std: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (d_model, seq_len) = (128, 64);
        Self {
            vocab_size: crate::training::VOCAB_SIZE,
            seq_len,
            d_model,
            n_heads: 4,
            head_size: 32,
            n_layers: 4,
            ffn_mult: 4,
            dropout: 0.0,
            tie_embeddings: false,
            encoding: Encoding::default_expe(d_model, seq_len),
            apply_to_value: false,
            ablation: AblationFlags::default(),
            init_std: 0.02,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn scheme(&self) -> EncodingScheme {
        EncodingScheme {
            encoding: self.encoding,
            ablation: self.ablation,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Every invariant violation, with key paths rooted at `prefix`.
    pub fn validate(&self, prefix: &str) -> Vec<Error> {
        let key = |k: &str| key_path(prefix, k);
        let mut errs = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_size", self.head_size),
            ("n_layers", self.n_layers),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                errs.push(Error::config(key(name), "must be >= 1"));
            }
        }
        if self.n_heads * self.head_size != self.d_model {
            errs.push(Error::config(
                key("head_size"),
                format!(
                    "n_heads ({}) * head_size ({}) must equal d_model ({})",
                    self.n_heads, self.head_size, self.d_model
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(Error::config(key("dropout"), format!("must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            errs.push(Error::config(key("init_std"), "must be finite and >= 0"));
        }
        if !(self.norm_eps > 0.0) {
            errs.push(Error::config(key("norm_eps"), "must be > 0"));
        }
        let enc = EncodingScheme {
            encoding: self.encoding,
            ablation: self.ablation,
        };
        let mut enc_errs = enc.validate(&key("encoding"), self.d_model, self.head_size);
        // ablation lives beside the encoding in this layout
        for e in enc_errs.iter_mut() {
            if let Error::Config { key: k, .. } = e {
                let abl = key("encoding.ablation");
                if let Some(rest) = k.strip_prefix(&abl) {
                    *k = format!("{}{rest}", key("ablation"));
                }
            }
        }
        errs.extend(enc_errs);
        errs
    }
}
