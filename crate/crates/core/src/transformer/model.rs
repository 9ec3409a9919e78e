use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{
    derived_rng, gaussian_init, AttnShape, Gradients, Mask, Scalar, Tape, Tensor, Var,
};
use crate::positional::{
    expe_table, exqpe_table, learned_scalar_params, rope_tables, sinusoidal_rows, Encoding,
    EncodingScheme, LearnedMode,
};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    /// Whether AdamW weight decay applies (matrices only).
    pub decay: bool,
}

/// Indices into [`Model::params`] for one transformer block. The key
/// projection has no bias: it would shift every score in a row equally.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub norm1: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub norm2: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: Vec<Param<S>>,
    tok_emb: usize,
    pos_emb: Option<usize>,
    expe_start: Option<usize>,
    expe_theta: Option<usize>,
    blocks: Vec<Block>,
    final_norm: usize,
    lm_head: Option<usize>,
}

/// Knobs for a single forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Absolute position of the first token.
    pub offset: usize,
    /// Record parameters as gradient-tracking leaves.
    pub track_grads: bool,
    /// Dropout RNG seed; dropout is active only when this is set.
    pub dropout_seed: Option<u64>,
    /// Use this encoding instead of the configured one (weights untouched).
    pub encoding: Option<EncodingScheme>,
    /// Blocks whose attention runs without positional encoding.
    pub disable_encoding_in: Vec<usize>,
}

/// Vars recorded for one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub input: Var,
    pub q: Var,
    pub k: Var,
    pub attn: Var,
    pub output: Var,
}

/// Tape and handles of one forward pass; dropped after the optimizer step.
pub struct ForwardPass<S> {
    pub tape: Tape<S>,
    pub param_vars: Vec<Var>,
    pub embedded: Var,
    pub blocks: Vec<BlockTrace>,
    pub logits: Var,
    pub batch: usize,
    pub seq: usize,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn logits(&self) -> &Tensor<S> {
        self.tape.value(self.logits)
    }
}

enum PositionPlan<S> {
    Nothing,
    Override(Var),
    Rotate { cos: Vec<S>, sin: Vec<S> },
}

impl<S: Scalar> Model<S> {
    /// Fresh model with Gaussian weights (std `init_std`), zero biases, unit
    /// gains; residual output projections are scaled by `1/sqrt(2·n_layers)`
    /// and an untied output head by `1/sqrt(d_model)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if let Some(e) = config.validate("model").into_iter().next() {
            return Err(e);
        }
        let mut rng = derived_rng(seed, "model-init");
        let d = config.d_model;
        let ff = config.ffn_dim();
        let std = config.init_std;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params = Vec::new();
        let mut add = |name: String, tensor: Tensor<S>, decay: bool| {
            params.push(Param {
                name,
                tensor: tensor.with_requires_grad(true),
                decay,
            });
            params.len() - 1
        };

        let tok_emb = add("tok_emb".into(), gaussian_init(&[config.vocab_size, d], std, &mut rng), false);
        let pos_emb = match config.encoding {
            Encoding::LearnedAbsolute { max_len } => {
                Some(add("pos_emb".into(), gaussian_init(&[max_len, d], std, &mut rng), false))
            }
            _ => None,
        };
        let (mut expe_start, mut expe_theta) = (None, None);
        if let Encoding::Expe(p) = config.encoding {
            // Separate stream so the other weights match the non-learned variants.
            let mut lrng = derived_rng(seed, "expe-learned");
            if let Some(learned) =
                learned_scalar_params::<S>(config.ablation.learned_params, &p, std, &mut lrng)
            {
                expe_start = Some(add("expe.start".into(), learned.start, false));
                expe_theta = Some(add("expe.theta".into(), learned.theta, false));
            }
        }
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut w = |n: &str, shape: [usize; 2], s: f64| {
                add(format!("blocks.{i}.{n}"), gaussian_init(&shape, s, &mut rng), true)
            };
            let wq = w("wq", [d, d], std);
            let wk = w("wk", [d, d], std);
            let wv = w("wv", [d, d], std);
            let wo = w("wo", [d, d], proj_std);
            let w1 = w("w1", [d, ff], std);
            let w2 = w("w2", [ff, d], proj_std);
            let mut b = |n: &str, len: usize| add(format!("blocks.{i}.{n}"), Tensor::zeros([len]), false);
            let bq = b("bq", d);
            let bv = b("bv", d);
            let bo = b("bo", d);
            let b1 = b("b1", ff);
            let b2 = b("b2", d);
            let mut g = |n: &str| add(format!("blocks.{i}.{n}"), Tensor::full([d], S::ONE), false);
            let norm1 = g("norm1");
            let norm2 = g("norm2");
            blocks.push(Block {
                norm1,
                wq,
                bq,
                wk,
                wv,
                bv,
                wo,
                bo,
                norm2,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let final_norm = add("final_norm".into(), Tensor::full([d], S::ONE), false);
        // Small output init keeps the initial prediction close to uniform.
        let head_std = std / (d as f64).sqrt();
        let lm_head = (!config.tie_embeddings)
            .then(|| add("lm_head".into(), gaussian_init(&[d, config.vocab_size], head_std, &mut rng), true));
        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            expe_start,
            expe_theta,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replaces the positional scheme without touching any weight.
    pub fn set_scheme(&mut self, scheme: EncodingScheme) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.encoding = scheme.encoding;
        cfg.ablation = scheme.ablation;
        if std::mem::discriminant(&cfg.encoding) != std::mem::discriminant(&self.config.encoding)
            || cfg.ablation.learned_params != self.config.ablation.learned_params
        {
            return Err(Error::Contract(
                "set_scheme may only change parameters within the same encoding".into(),
            ));
        }
        if let Some(e) = cfg.validate("model").into_iter().next() {
            return Err(e);
        }
        self.config = cfg;
        Ok(())
    }

    /// SHA-256 over every parameter name, shape and bit pattern.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Adds `factor ·` the gradients of `pass` into each parameter.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass<S>, grads: &mut Gradients<S>, factor: S) {
        for (p, &v) in self.params.iter_mut().zip(&pass.param_vars) {
            let mut g = grads.take(v);
            if factor != S::ONE {
                g.iter_mut().for_each(|x| *x *= factor);
            }
            p.tensor.accumulate_grad(&g);
        }
    }

    /// Runs tokens (`batch` rows of equal length) through the model.
    pub fn forward(&self, tokens: &[usize], batch: usize, opts: &ForwardOptions) -> Result<ForwardPass<S>> {
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Shape {
                op: "model_forward",
                lhs: vec![tokens.len()],
                rhs: vec![batch],
            });
        }
        let mut tape = Tape::new();
        let param_vars = self.register(&mut tape, opts.track_grads);
        let x = tape.embedding(param_vars[self.tok_emb], tokens)?;
        self.forward_embedded(tape, param_vars, x, batch, opts)
    }

    /// Continues a forward pass from an already-embedded `[batch·seq, d]` input.
    pub fn forward_embedded(
        &self,
        mut tape: Tape<S>,
        param_vars: Vec<Var>,
        embedded: Var,
        batch: usize,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass<S>> {
        let cfg = &self.config;
        let scheme = opts.encoding.unwrap_or_else(|| cfg.scheme());
        let rows = tape.value(embedded).rows();
        let seq = rows / batch;
        let offset = opts.offset;
        let mut dropout_rng = opts.dropout_seed.map(|s| derived_rng(s, "dropout"));
        let p_drop = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

        let mut x = embedded;
        match scheme.encoding {
            Encoding::Sinusoidal => {
                let table = tape.constant(Tensor::new([seq, cfg.d_model], sinusoidal_rows(offset, seq, cfg.d_model))?);
                x = tape.add_rows(x, table, seq, 0)?;
            }
            Encoding::LearnedAbsolute { .. } => {
                let pos = self.pos_emb.expect("learned table exists");
                x = tape.add_rows(x, param_vars[pos], seq, offset)?;
            }
            _ => {}
        }
        let plan = self.position_plan(&mut tape, &param_vars, &scheme, seq, offset)?;

        // The overridden dims stay out of the attention-norm statistic so Q/K
        // depend on them only through the position values.
        let norm_skip = cfg.encoding.width().unwrap_or(0);
        let mask = Mask::causal(seq);
        let shape = AttnShape {
            batch,
            seq,
            heads: cfg.n_heads,
            head_dim: cfg.head_size,
        };
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let p = |idx: usize| param_vars[idx];
            let encode_here = !opts.disable_encoding_in.contains(&i)
                && !(scheme.ablation.apply_once && i > 0);
            let input = x;
            let h = tape.rms_norm_skip(x, p(blk.norm1), S::from_f64(cfg.norm_eps), norm_skip)?;
            let (qk_in, v_in) = match &plan {
                PositionPlan::Override(table) if encode_here => {
                    let o = tape.override_prefix(h, *table, seq)?;
                    (o, if cfg.apply_to_value { o } else { h })
                }
                _ => (h, h),
            };
            let mut q = tape.linear(qk_in, p(blk.wq), Some(p(blk.bq)))?;
            let mut k = tape.linear(qk_in, p(blk.wk), None)?;
            let v = tape.linear(v_in, p(blk.wv), Some(p(blk.bv)))?;
            if let (PositionPlan::Rotate { cos, sin }, true) = (&plan, encode_here) {
                q = tape.rope(q, cos.clone(), sin.clone(), seq)?;
                k = tape.rope(k, cos.clone(), sin.clone(), seq)?;
            }
            let attn = match dropout_rng.as_mut() {
                Some(rng) => tape.attention_dropout(q, k, v, shape, &mask, p_drop, rng)?,
                None => tape.attention(q, k, v, shape, &mask)?,
            };
            let o = tape.linear(attn, p(blk.wo), Some(p(blk.bo)))?;
            x = tape.add(x, o)?;
            let h2 = tape.rms_norm(x, p(blk.norm2), S::from_f64(cfg.norm_eps))?;
            let f = tape.linear(h2, p(blk.w1), Some(p(blk.b1)))?;
            let f = tape.gelu(f);
            let mut f = tape.linear(f, p(blk.w2), Some(p(blk.b2)))?;
            if let Some(rng) = dropout_rng.as_mut() {
                f = tape.dropout(f, p_drop, rng);
            }
            x = tape.add(x, f)?;
            traces.push(BlockTrace {
                input,
                q,
                k,
                attn,
                output: x,
            });
        }
        let h = tape.rms_norm(x, param_vars[self.final_norm], S::from_f64(cfg.norm_eps))?;
        let logits = match self.lm_head {
            Some(head) => tape.linear(h, param_vars[head], None)?,
            None => tape.linear_t(h, param_vars[self.tok_emb])?,
        };
        Ok(ForwardPass {
            tape,
            param_vars,
            embedded,
            blocks: traces,
            logits,
            batch,
            seq,
        })
    }

    /// Records every parameter on `tape`, in [`params`](Self::params) order.
    pub fn register(&self, tape: &mut Tape<S>, track_grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if track_grads {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    fn position_plan(
        &self,
        tape: &mut Tape<S>,
        param_vars: &[Var],
        scheme: &EncodingScheme,
        seq: usize,
        offset: usize,
    ) -> Result<PositionPlan<S>> {
        let stable = scheme.ablation.stable_p;
        Ok(match scheme.encoding {
            Encoding::Expe(p) => {
                let learned = scheme.ablation.learned_params != LearnedMode::Off;
                match (learned, self.expe_start, self.expe_theta) {
                    (true, Some(s), Some(t)) => {
                        let positions: Vec<S> = (offset..offset + seq)
                            .flat_map(|n| (0..p.l).map(move |j| if stable { n } else { n + j }))
                            .map(|pos| S::from_f64(pos as f64))
                            .collect();
                        let ramp = tape.ramp(
                            param_vars[s],
                            param_vars[t],
                            positions,
                            S::from_f64(p.scale),
                            &[seq, p.l],
                        )?;
                        PositionPlan::Override(ramp)
                    }
                    (true, _, _) => {
                        return Err(Error::Contract("learned encoding without learned parameters".into()))
                    }
                    _ => PositionPlan::Override(
                        tape.constant(Tensor::new([seq, p.l], expe_table(seq, offset, &p, stable))?),
                    ),
                }
            }
            Encoding::Exqpe(p) => {
                PositionPlan::Override(tape.constant(Tensor::new([seq, p.l], exqpe_table(seq, offset, &p))?))
            }
            Encoding::Rope(p) => {
                let (cos, sin) = rope_tables(seq, offset, self.config.head_size, &p);
                PositionPlan::Rotate { cos, sin }
            }
            Encoding::Sinusoidal | Encoding::LearnedAbsolute { .. } | Encoding::None => PositionPlan::Nothing,
        })
    }

    /// Logits `[batch, seq, vocab]` for `tokens` with no gradient tracking.
    pub fn logits(&self, tokens: &[usize], batch: usize, offset: usize) -> Result<Tensor<S>> {
        let opts = ForwardOptions {
            offset,
            ..Default::default()
        };
        let pass = self.forward(tokens, batch, &opts)?;
        let seq = pass.seq;
        let out = pass.tape.value(pass.logits).clone();
        out.reshape([batch, seq, self.config.vocab_size])
    }

    /// Mean cross-entropy of `targets` under `tokens`, without gradients.
    pub fn loss(&self, tokens: &[usize], targets: &[usize], batch: usize, opts: &ForwardOptions) -> Result<S> {
        let mut pass = self.forward(tokens, batch, opts)?;
        let l = pass.tape.cross_entropy(pass.logits, targets)?;
        Ok(pass.tape.value(l).item())
    }

    /// Forward + backward; adds `grad_scale ·` gradients into every parameter
    /// and returns the loss.
    pub fn loss_and_grads(
        &mut self,
        tokens: &[usize],
        targets: &[usize],
        batch: usize,
        grad_scale: S,
        dropout_seed: Option<u64>,
    ) -> Result<S> {
        let opts = ForwardOptions {
            track_grads: true,
            dropout_seed,
            ..Default::default()
        };
        let mut pass = self.forward(tokens, batch, &opts)?;
        let l = pass.tape.cross_entropy(pass.logits, targets)?;
        let loss = pass.tape.value(l).item();
        let mut grads = pass.tape.backward(l)?;
        self.accumulate_grads(&pass, &mut grads, grad_scale);
        Ok(loss)
    }

    /// Rebuilds a model from checkpointed parameters; names and shapes must
    /// match what `config` produces.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, (name, t)) in model.params.iter_mut().zip(params) {
            if slot.name != name {
                return Err(Error::Corrupt(format!("expected tensor `{}`, found `{name}`", slot.name)));
            }
            if slot.tensor.shape() != t.shape() {
                return Err(Error::TensorShape {
                    name,
                    expected: slot.tensor.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            slot.tensor = t.with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            expe_start: self.expe_start,
            expe_theta: self.expe_theta,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm,
            lm_head: self.lm_head,
        }
    }
}
