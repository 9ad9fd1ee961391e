//! Causal transformer decoder language model.
//!
//! Blocks are pre-norm by default (stable to train without warmup at desk
//! scale); the post-norm wiring that reads add-then-normalize is available
//! behind [`NormScheme::PostNorm`] for fidelity experiments. The forward
//! pass exposes final-block hidden states and the head-averaged, post-
//! softmax, pre-dropout attention of the last layer, which the auxiliary
//! losses consume.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScheme {
    PreNorm,
    PostNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub norm_scheme: NormScheme,
    /// Tie the output projection to the token embedding.
    pub tie_output: bool,
}

impl ModelConfig {
    /// Laptop-hours defaults; the paper-scale shape (12 layers, 12 heads,
    /// d_model 768, vocab 50,527) remains expressible through the fields.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_positions: 512,
            vocab_size,
            dropout: 0.3,
            norm_scheme: NormScheme::PreNorm,
            tie_output: false,
        }
    }

    /// Smaller shape for the discourse tagger.
    pub fn tagger_scale(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 256,
            max_positions: 128,
            vocab_size,
            dropout: 0.1,
            norm_scheme: NormScheme::PreNorm,
            tie_output: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(ModelError::Config(String::from("zero-sized model dimension")));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::Config(String::from("vocab_size must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(String),
    SequenceTooLong { len: usize, max: usize },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "bad model config: {msg}"),
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_positions {max}")
            }
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

struct LayerWeights<S> {
    ln1_gain: Tensor<S>,
    ln1_bias: Tensor<S>,
    w_q: Tensor<S>,
    b_q: Tensor<S>,
    w_k: Tensor<S>,
    b_k: Tensor<S>,
    w_v: Tensor<S>,
    b_v: Tensor<S>,
    w_o: Tensor<S>,
    b_o: Tensor<S>,
    ln2_gain: Tensor<S>,
    ln2_bias: Tensor<S>,
    w_ff1: Tensor<S>,
    b_ff1: Tensor<S>,
    w_ff2: Tensor<S>,
    b_ff2: Tensor<S>,
}

/// Decoder weights: token + learned positional embeddings, per-layer
/// attention and FFN projections, and the output head.
pub struct TransformerLM<S: Scalar> {
    pub config: ModelConfig,
    token_embedding: Tensor<S>,
    position_embedding: Tensor<S>,
    layers: Vec<LayerWeights<S>>,
    /// Present in pre-norm mode only.
    final_ln: Option<(Tensor<S>, Tensor<S>)>,
    /// Absent when `tie_output`; logits then use the token embedding.
    output_weight: Option<Tensor<S>>,
    output_bias: Tensor<S>,
}

const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn randn_param<S: Scalar>(shape: Vec<usize>, rng: &mut Prng) -> Tensor<S> {
    Tensor::randn(shape, INIT_STD, rng).with_grad()
}

fn zeros_param<S: Scalar>(shape: Vec<usize>) -> Tensor<S> {
    Tensor::zeros(shape).with_grad()
}

fn ones_param<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::full(vec![n], S::one()).with_grad()
}

impl<S: Scalar> TransformerLM<S> {
    pub fn new(config: ModelConfig, rng: &mut Prng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: ones_param(d),
                ln1_bias: zeros_param(vec![d]),
                w_q: randn_param(vec![d, d], rng),
                b_q: zeros_param(vec![d]),
                w_k: randn_param(vec![d, d], rng),
                b_k: zeros_param(vec![d]),
                w_v: randn_param(vec![d, d], rng),
                b_v: zeros_param(vec![d]),
                w_o: randn_param(vec![d, d], rng),
                b_o: zeros_param(vec![d]),
                ln2_gain: ones_param(d),
                ln2_bias: zeros_param(vec![d]),
                w_ff1: randn_param(vec![d, config.d_ff], rng),
                b_ff1: zeros_param(vec![config.d_ff]),
                w_ff2: randn_param(vec![config.d_ff, d], rng),
                b_ff2: zeros_param(vec![d]),
            })
            .collect();
        Ok(Self {
            token_embedding: randn_param(vec![config.vocab_size, d], rng),
            position_embedding: randn_param(vec![config.max_positions, d], rng),
            layers,
            final_ln: match config.norm_scheme {
                NormScheme::PreNorm => Some((ones_param(d), zeros_param(vec![d]))),
                NormScheme::PostNorm => None,
            },
            output_weight: if config.tie_output {
                None
            } else {
                Some(randn_param(vec![d, config.vocab_size], rng))
            },
            output_bias: zeros_param(vec![config.vocab_size]),
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        out.push((String::from("token_embedding"), &self.token_embedding));
        out.push((String::from("position_embedding"), &self.position_embedding));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1.bias"), &l.ln1_bias));
            out.push((format!("layer{i}.attn.w_q"), &l.w_q));
            out.push((format!("layer{i}.attn.b_q"), &l.b_q));
            out.push((format!("layer{i}.attn.w_k"), &l.w_k));
            out.push((format!("layer{i}.attn.b_k"), &l.b_k));
            out.push((format!("layer{i}.attn.w_v"), &l.w_v));
            out.push((format!("layer{i}.attn.b_v"), &l.b_v));
            out.push((format!("layer{i}.attn.w_o"), &l.w_o));
            out.push((format!("layer{i}.attn.b_o"), &l.b_o));
            out.push((format!("layer{i}.ln2.gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2.bias"), &l.ln2_bias));
            out.push((format!("layer{i}.ffn.w1"), &l.w_ff1));
            out.push((format!("layer{i}.ffn.b1"), &l.b_ff1));
            out.push((format!("layer{i}.ffn.w2"), &l.w_ff2));
            out.push((format!("layer{i}.ffn.b2"), &l.b_ff2));
        }
        if let Some((gain, bias)) = &self.final_ln {
            out.push((String::from("final_ln.gain"), gain));
            out.push((String::from("final_ln.bias"), bias));
        }
        if let Some(w) = &self.output_weight {
            out.push((String::from("output.weight"), w));
        }
        out.push((String::from("output.bias"), &self.output_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        out.push((String::from("token_embedding"), &mut self.token_embedding));
        out.push((String::from("position_embedding"), &mut self.position_embedding));
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &mut l.ln1_gain));
            out.push((format!("layer{i}.ln1.bias"), &mut l.ln1_bias));
            out.push((format!("layer{i}.attn.w_q"), &mut l.w_q));
            out.push((format!("layer{i}.attn.b_q"), &mut l.b_q));
            out.push((format!("layer{i}.attn.w_k"), &mut l.w_k));
            out.push((format!("layer{i}.attn.b_k"), &mut l.b_k));
            out.push((format!("layer{i}.attn.w_v"), &mut l.w_v));
            out.push((format!("layer{i}.attn.b_v"), &mut l.b_v));
            out.push((format!("layer{i}.attn.w_o"), &mut l.w_o));
            out.push((format!("layer{i}.attn.b_o"), &mut l.b_o));
            out.push((format!("layer{i}.ln2.gain"), &mut l.ln2_gain));
            out.push((format!("layer{i}.ln2.bias"), &mut l.ln2_bias));
            out.push((format!("layer{i}.ffn.w1"), &mut l.w_ff1));
            out.push((format!("layer{i}.ffn.b1"), &mut l.b_ff1));
            out.push((format!("layer{i}.ffn.w2"), &mut l.w_ff2));
            out.push((format!("layer{i}.ffn.b2"), &mut l.b_ff2));
        }
        if let Some((gain, bias)) = &mut self.final_ln {
            out.push((String::from("final_ln.gain"), gain));
            out.push((String::from("final_ln.bias"), bias));
        }
        if let Some(w) = &mut self.output_weight {
            out.push((String::from("output.weight"), w));
        }
        out.push((String::from("output.bias"), &mut self.output_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named_params().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Convert precision; gradient checks instantiate the f32 model in f64.
    pub fn cast<T: Scalar>(&self) -> TransformerLM<T> {
        TransformerLM {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_q: l.w_q.cast(),
                    b_q: l.b_q.cast(),
                    w_k: l.w_k.cast(),
                    b_k: l.b_k.cast(),
                    w_v: l.w_v.cast(),
                    b_v: l.b_v.cast(),
                    w_o: l.w_o.cast(),
                    b_o: l.b_o.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_ff1: l.w_ff1.cast(),
                    b_ff1: l.b_ff1.cast(),
                    w_ff2: l.w_ff2.cast(),
                    b_ff2: l.b_ff2.cast(),
                })
                .collect(),
            final_ln: self
                .final_ln
                .as_ref()
                .map(|(g, b)| (g.cast(), b.cast())),
            output_weight: self.output_weight.as_ref().map(Tensor::cast),
            output_bias: self.output_bias.cast(),
        }
    }

    /// Record every parameter on the tape, in `named_params` order.
    pub fn bind_params(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.named_params()
            .iter()
            .map(|(_, t)| tape.leaf_from(t))
            .collect()
    }

    /// Add the tape gradients of a bound forward pass into the parameters'
    /// gradient buffers. Grads accumulate until `zero_grads`.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>, param_vars: &[Var]) {
        for ((_, param), &var) in self.named_params_mut().into_iter().zip(param_vars) {
            if let Some(g) = tape.grad(var) {
                param.accumulate_grad(g);
            }
        }
    }

    /// Forward over a `[batch, t]` id matrix recorded on `tape`, reading
    /// parameters from `param_vars` (as produced by [`Self::bind_params`]).
    /// Dropout is applied only when a generator is supplied.
    pub fn forward_with_params(
        &self,
        tape: &mut Tape<S>,
        param_vars: &[Var],
        ids: &[u32],
        batch: usize,
        mut dropout_rng: Option<&mut Prng>,
    ) -> Result<ForwardPass, ModelError> {
        let cfg = &self.config;
        if batch == 0 || ids.len() % batch != 0 {
            return Err(ModelError::Config(format!(
                "id buffer of {} does not divide into batch {batch}",
                ids.len()
            )));
        }
        let t = ids.len() / batch;
        if t == 0 {
            return Err(ModelError::Config(String::from("empty sequence")));
        }
        if t > cfg.max_positions {
            return Err(ModelError::SequenceTooLong { len: t, max: cfg.max_positions });
        }
        let mut params = param_vars.iter().copied();
        let mut next = || params.next().expect("param_vars matches named_params order");

        let emb = next();
        let pos_table = next();
        let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.embedding(emb, &ids_usize, &[batch, t])?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..t).collect();
        let pos = tape.embedding(pos_table, &positions, &[batch, t])?;
        let sum = tape.add(tok, pos)?;
        let mut h = self.dropout(tape, sum, &mut dropout_rng);

        let mut last_attention = None;
        let inv_sqrt_dk = S::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
        for layer in 0..cfg.n_layers {
            let ln1_gain = next();
            let ln1_bias = next();
            let w_q = next();
            let b_q = next();
            let w_k = next();
            let b_k = next();
            let w_v = next();
            let b_v = next();
            let w_o = next();
            let b_o = next();
            let ln2_gain = next();
            let ln2_bias = next();
            let w_ff1 = next();
            let b_ff1 = next();
            let w_ff2 = next();
            let b_ff2 = next();

            let attn_in = match cfg.norm_scheme {
                NormScheme::PreNorm => {
                    tape.layer_norm(h, ln1_gain, ln1_bias, S::from_f64(LAYER_NORM_EPS))?
                }
                NormScheme::PostNorm => h,
            };
            let q = tape.matmul(attn_in, w_q)?;
            let q = tape.add_bias(q, b_q)?;
            let k = tape.matmul(attn_in, w_k)?;
            let k = tape.add_bias(k, b_k)?;
            let v = tape.matmul(attn_in, w_v)?;
            let v = tape.add_bias(v, b_v)?;
            let qh = tape.split_heads(q, cfg.n_heads)?;
            let kh = tape.split_heads(k, cfg.n_heads)?;
            let vh = tape.split_heads(v, cfg.n_heads)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt_dk);
            let probs = tape.causal_softmax(scores)?;
            if layer == cfg.n_layers - 1 {
                // head-averaged, post-softmax, pre-dropout
                last_attention = Some(tape.mean_heads(probs)?);
            }
            let probs = self.dropout(tape, probs, &mut dropout_rng);
            let ctx = tape.matmul(probs, vh)?;
            let merged = tape.merge_heads(ctx)?;
            let proj = tape.matmul(merged, w_o)?;
            let proj = tape.add_bias(proj, b_o)?;
            let attn_out = self.dropout(tape, proj, &mut dropout_rng);

            h = match cfg.norm_scheme {
                NormScheme::PreNorm => tape.add(h, attn_out)?,
                NormScheme::PostNorm => {
                    let summed = tape.add(h, attn_out)?;
                    tape.layer_norm(summed, ln1_gain, ln1_bias, S::from_f64(LAYER_NORM_EPS))?
                }
            };

            let ff_in = match cfg.norm_scheme {
                NormScheme::PreNorm => {
                    tape.layer_norm(h, ln2_gain, ln2_bias, S::from_f64(LAYER_NORM_EPS))?
                }
                NormScheme::PostNorm => h,
            };
            let ff = tape.matmul(ff_in, w_ff1)?;
            let ff = tape.add_bias(ff, b_ff1)?;
            let ff = tape.relu(ff);
            let ff = tape.matmul(ff, w_ff2)?;
            let ff = tape.add_bias(ff, b_ff2)?;
            let ff_out = self.dropout(tape, ff, &mut dropout_rng);

            h = match cfg.norm_scheme {
                NormScheme::PreNorm => tape.add(h, ff_out)?,
                NormScheme::PostNorm => {
                    let summed = tape.add(h, ff_out)?;
                    tape.layer_norm(summed, ln2_gain, ln2_bias, S::from_f64(LAYER_NORM_EPS))?
                }
            };
        }

        let hidden = match cfg.norm_scheme {
            NormScheme::PreNorm => {
                let gain = next();
                let bias = next();
                tape.layer_norm(h, gain, bias, S::from_f64(LAYER_NORM_EPS))?
            }
            NormScheme::PostNorm => h,
        };

        let logits = if cfg.tie_output {
            let bias = next();
            let raw = tape.matmul_nt(hidden, emb)?;
            tape.add_bias(raw, bias)?
        } else {
            let weight = next();
            let bias = next();
            let raw = tape.matmul(hidden, weight)?;
            tape.add_bias(raw, bias)?
        };

        Ok(ForwardPass {
            batch,
            seq_len: t,
            logits,
            hidden,
            attention: last_attention.expect("n_layers >= 1"),
        })
    }

    /// Bind parameters and run the batched forward in one call; returns the
    /// bound vars for gradient harvesting alongside the pass.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<S>,
        ids: &[u32],
        batch: usize,
        dropout_rng: Option<&mut Prng>,
    ) -> Result<(ForwardPass, Vec<Var>), ModelError> {
        let vars = self.bind_params(tape);
        let pass = self.forward_with_params(tape, &vars, ids, batch, dropout_rng)?;
        Ok((pass, vars))
    }

    /// Evaluation-mode forward of a single sequence, returning extracted
    /// values: logits `[T, V]`, final hidden states `[T, d]`, and the
    /// head-averaged last-layer attention `[T, T]`.
    pub fn forward(&self, ids: &[u32]) -> Result<ForwardOutput<S>, ModelError> {
        let mut tape = Tape::new();
        let (pass, _) = self.forward_batch(&mut tape, ids, 1, None)?;
        let t = pass.seq_len;
        let v = self.config.vocab_size;
        let d = self.config.d_model;
        let logits = Tensor::new(vec![t, v], tape.value(pass.logits).data().to_vec())
            .expect("logits shape");
        let hidden = Tensor::new(vec![t, d], tape.value(pass.hidden).data().to_vec())
            .expect("hidden shape");
        let attention = Tensor::new(vec![t, t], tape.value(pass.attention).data().to_vec())
            .expect("attention shape");
        Ok(ForwardOutput { logits, hidden, attention })
    }

    fn dropout(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        rng: &mut Option<&mut Prng>,
    ) -> Var {
        let rate = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return x };
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let scale = S::from_f64(1.0 / keep);
        let n = tape.value(x).numel();
        let mask_data: Vec<S> = (0..n)
            .map(|_| if rng.next_f64() < keep { scale } else { S::zero() })
            .collect();
        let mask = Tensor::new(tape.value(x).shape().to_vec(), mask_data).expect("mask shape");
        let mask = tape.constant(mask);
        tape.mul(x, mask).expect("mask shape matches input")
    }
}

/// Handles into the tape for one batched forward pass.
pub struct ForwardPass {
    pub batch: usize,
    pub seq_len: usize,
    /// `[batch, t, vocab]`
    pub logits: Var,
    /// `[batch, t, d_model]` final-block states (post final layer norm in
    /// pre-norm mode), what the output projection consumes.
    pub hidden: Var,
    /// `[batch, t, t]` head-averaged last-layer attention; rows are
    /// distributions over positions <= t, exactly zero above the diagonal.
    pub attention: Var,
}

/// Extracted single-sequence forward values.
#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    pub logits: Tensor<S>,
    pub hidden: Tensor<S>,
    pub attention: Tensor<S>,
}

/// Language-model loss: shift-aligned masked cross entropy, averaged per
/// unmasked target token. `targets` and `loss_mask` have one entry per
/// position of the flattened `[batch * t]` layout.
pub fn lm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pass: &ForwardPass,
    targets: &[usize],
    loss_mask: &[S],
) -> Result<Var, TensorError> {
    let (b, t) = (pass.batch, pass.seq_len);
    let v = {
        let s = tape.value(pass.logits).shape();
        s[s.len() - 1]
    };
    let flat = tape.reshape(pass.logits, vec![b * t, v])?;
    tape.cross_entropy_masked(flat, targets, loss_mask)
}
