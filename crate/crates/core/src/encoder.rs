//! Transformer encoder over per-entity embeddings with key-padding masks.
//!
//! No positional encoding is added: entity order carries no meaning, so
//! the encoder is permutation equivariant over the entities of a scene.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{prefixed, Binder, LayerNormParams, LayerNormVars, Linear, LinearVars, Params};
use crate::rng::{rng, Rng};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `LN(x + sublayer(x))`
    Post,
    /// `x + sublayer(LN(x))`, with a final LN after the stack.
    Pre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub norm: NormPlacement,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 6,
            num_heads: 8,
            model_dim: 256,
            ffn_dim: 1024,
            dropout: 0.0,
            activation: Activation::Relu,
            norm: NormPlacement::Pre,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder: all dimensions must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "encoder: model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder: dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub norm1: LayerNormParams<T>,
    pub norm2: LayerNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub layers: Vec<EncoderLayer<T>>,
    pub final_norm: Option<LayerNormParams<T>>,
}

impl<T: Scalar> EncoderWeights<T> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let d = cfg.model_dim;
        let layers = (0..cfg.num_layers)
            .map(|_| EncoderLayer {
                query: Linear::xavier(d, d, &mut r),
                key: Linear::xavier(d, d, &mut r),
                value: Linear::xavier(d, d, &mut r),
                output: Linear::xavier(d, d, &mut r),
                ffn_in: Linear::xavier(d, cfg.ffn_dim, &mut r),
                ffn_out: Linear::xavier(cfg.ffn_dim, d, &mut r),
                norm1: LayerNormParams::new(d),
                norm2: LayerNormParams::new(d),
            })
            .collect();
        let final_norm = match cfg.norm {
            NormPlacement::Pre => Some(LayerNormParams::new(d)),
            NormPlacement::Post => None,
        };
        Ok(EncoderWeights { layers, final_norm })
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let d = cfg.model_dim;
        let ok = self.layers.len() == cfg.num_layers
            && self.layers.iter().all(|l| {
                l.query.input_dim() == d
                    && l.query.output_dim() == d
                    && l.ffn_in.output_dim() == cfg.ffn_dim
                    && l.ffn_out.output_dim() == d
            })
            && self.final_norm.is_some() == (cfg.norm == NormPlacement::Pre);
        if ok {
            Ok(())
        } else {
            Err(Error::dim("encoder", "weights do not match the encoder config"))
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, T>) -> EncoderVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                query: l.query.bind(b),
                key: l.key.bind(b),
                value: l.value.bind(b),
                output: l.output.bind(b),
                ffn_in: l.ffn_in.bind(b),
                ffn_out: l.ffn_out.bind(b),
                norm1: l.norm1.bind(b),
                norm2: l.norm2.bind(b),
            })
            .collect();
        let final_norm = self.final_norm.as_ref().map(|n| n.bind(b));
        EncoderVars { layers, final_norm }
    }
}

impl<T: Scalar> Params<T> for EncoderWeights<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = prefixed(prefix, &format!("layers.{i}"));
            l.query.visit(&prefixed(&p, "query"), f);
            l.key.visit(&prefixed(&p, "key"), f);
            l.value.visit(&prefixed(&p, "value"), f);
            l.output.visit(&prefixed(&p, "output"), f);
            l.ffn_in.visit(&prefixed(&p, "ffn_in"), f);
            l.ffn_out.visit(&prefixed(&p, "ffn_out"), f);
            l.norm1.visit(&prefixed(&p, "norm1"), f);
            l.norm2.visit(&prefixed(&p, "norm2"), f);
        }
        if let Some(n) = &self.final_norm {
            n.visit(&prefixed(prefix, "final_norm"), f);
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.query.params_mut());
            out.extend(l.key.params_mut());
            out.extend(l.value.params_mut());
            out.extend(l.output.params_mut());
            out.extend(l.ffn_in.params_mut());
            out.extend(l.ffn_out.params_mut());
            out.extend(l.norm1.params_mut());
            out.extend(l.norm2.params_mut());
        }
        if let Some(n) = &mut self.final_norm {
            out.extend(n.params_mut());
        }
        out
    }
}

#[derive(Clone, Debug)]
struct LayerVars {
    query: LinearVars,
    key: LinearVars,
    value: LinearVars,
    output: LinearVars,
    ffn_in: LinearVars,
    ffn_out: LinearVars,
    norm1: LayerNormVars,
    norm2: LayerNormVars,
}

/// Encoder parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    layers: Vec<LayerVars>,
    final_norm: Option<LayerNormVars>,
}

/// Scenes padded to a common entity count.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch<T> {
    /// `[batch × seq × dim]`, zero at padded slots.
    pub embeddings: Tensor<T>,
    /// `batch·seq` flags, true for real entities.
    pub padding_mask: Vec<bool>,
}

impl<T: Scalar> PaddedBatch<T> {
    /// Pads per-scene `[n_i × dim]` embeddings to `max(n_i)` (or `seq` when
    /// larger) slots.
    pub fn from_scenes(scenes: &[Tensor<T>], seq: Option<usize>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::dim("padded_batch", "empty batch"));
        }
        let dim = scenes[0].rows_cols().1;
        let longest = scenes.iter().map(|s| s.rows_cols().0).max().unwrap_or(0);
        let seq = seq.unwrap_or(longest).max(longest);
        let mut data = vec![T::zero(); scenes.len() * seq * dim];
        let mut mask = vec![false; scenes.len() * seq];
        for (b, s) in scenes.iter().enumerate() {
            let (n, d) = s.rows_cols();
            if s.shape().len() != 2 || d != dim {
                return Err(Error::dim("padded_batch", format!("scene {b} has shape {:?}", s.shape())));
            }
            if n == 0 {
                return Err(Error::dim("padded_batch", format!("scene {b} has no entities")));
            }
            data[b * seq * dim..(b * seq + n) * dim].copy_from_slice(s.data());
            mask[b * seq..b * seq + n].fill(true);
        }
        Ok(PaddedBatch {
            embeddings: Tensor::new(vec![scenes.len(), seq, dim], data)?,
            padding_mask: mask,
        })
    }

    pub fn batch(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn seq(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.embeddings.shape();
        if s.len() != 3 || self.padding_mask.len() != s[0] * s[1] {
            return Err(Error::dim("padded_batch", format!("embeddings {s:?}, mask {}", self.padding_mask.len())));
        }
        for (b, row) in self.padding_mask.chunks(s[1].max(1)).enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(Error::dim("padded_batch", format!("scene {b} has no real entity")));
            }
        }
        for (slot, &real) in self.padding_mask.iter().enumerate() {
            if !real && self.embeddings.row(slot).iter().any(|v| *v != T::zero()) {
                return Err(Error::Invalid(format!("padded slot {slot} carries a non-zero embedding")));
            }
        }
        Ok(())
    }
}

/// Handles produced by a forward pass on a tape.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch·seq × model_dim]`
    pub z: Var,
    /// Per layer, `[batch·heads × seq × seq]` post-softmax weights.
    pub attention: Vec<Var>,
}

/// Runs the encoder on `x` (`[batch·seq × model_dim]`) whose key-padding
/// mask is `valid`. `dropout_rng` enables dropout when the config asks for it.
pub fn encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &EncoderVars,
    x: Var,
    valid: &[bool],
    batch: usize,
    cfg: &EncoderConfig,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<EncoderOutput> {
    let (rows, width) = tape.value(x).rows_cols();
    if batch == 0 || rows % batch != 0 || width != cfg.model_dim || valid.len() != rows {
        return Err(Error::dim(
            "encode",
            format!("[{rows}x{width}] for batch {batch}, model_dim {}, mask {}", cfg.model_dim, valid.len()),
        ));
    }
    if vars.layers.len() != cfg.num_layers {
        return Err(Error::dim("encode", "bound weights do not match the config"));
    }
    let seq = rows / batch;
    let heads = cfg.num_heads;
    let key_valid: Vec<bool> = (0..batch * heads * seq)
        .flat_map(|r| {
            let b = r / (heads * seq);
            valid[b * seq..(b + 1) * seq].iter().copied()
        })
        .collect();
    let scale = T::from_f64_lossy(1.0 / (cfg.head_dim() as f64).sqrt());

    let mut h = x;
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in &vars.layers {
        let attn_in = match cfg.norm {
            NormPlacement::Pre => l.norm1.forward(tape, h)?,
            NormPlacement::Post => h,
        };
        let q = l.query.forward(tape, attn_in)?;
        let k = l.key.forward(tape, attn_in)?;
        let v = l.value.forward(tape, attn_in)?;
        let q = tape.split_heads(q, batch, seq, heads)?;
        let k = tape.split_heads(k, batch, seq, heads)?;
        let v = tape.split_heads(v, batch, seq, heads)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scores, &key_valid)?;
        attention.push(probs);
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.merge_heads(ctx, batch, seq, heads)?;
        let a = l.output.forward(tape, ctx)?;
        let a = dropout(tape, a, cfg.dropout, dropout_rng.as_deref_mut())?;
        h = tape.add(h, a)?;
        if cfg.norm == NormPlacement::Post {
            h = l.norm1.forward(tape, h)?;
        }

        let ffn_in = match cfg.norm {
            NormPlacement::Pre => l.norm2.forward(tape, h)?,
            NormPlacement::Post => h,
        };
        let f = l.ffn_in.forward(tape, ffn_in)?;
        let f = match cfg.activation {
            Activation::Relu => tape.relu(f)?,
            Activation::Gelu => tape.gelu(f)?,
        };
        let f = l.ffn_out.forward(tape, f)?;
        let f = dropout(tape, f, cfg.dropout, dropout_rng.as_deref_mut())?;
        h = tape.add(h, f)?;
        if cfg.norm == NormPlacement::Post {
            h = l.norm2.forward(tape, h)?;
        }
    }
    if let Some(n) = &vars.final_norm {
        h = n.forward(tape, h)?;
    }
    Ok(EncoderOutput { z: h, attention })
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

fn forward_batch<T: Scalar>(
    batch: &PaddedBatch<T>,
    w: &EncoderWeights<T>,
    cfg: &EncoderConfig,
) -> Result<(Tape<T>, EncoderOutput)> {
    cfg.validate()?;
    w.check(cfg)?;
    batch.validate()?;
    let (b, seq) = (batch.batch(), batch.seq());
    if batch.embeddings.shape()[2] != cfg.model_dim {
        return Err(Error::dim("encode", format!("embedding width {} vs model_dim {}", batch.embeddings.shape()[2], cfg.model_dim)));
    }
    let mut tape = Tape::new();
    let vars = {
        let mut binder = Binder::new(&mut tape, false);
        w.bind(&mut binder)
    };
    let x = tape.constant(batch.embeddings.clone().reshaped(vec![b * seq, cfg.model_dim])?);
    let out = encode_on_tape(&mut tape, &vars, x, &batch.padding_mask, b, cfg, None)?;
    Ok((tape, out))
}

/// Context-aware representations `[batch × seq × model_dim]`. Padded slots
/// hold well-defined values that callers should ignore.
pub fn encode<T: Scalar>(batch: &PaddedBatch<T>, w: &EncoderWeights<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let (tape, out) = forward_batch(batch, w, cfg)?;
    let mut z = tape.value(out.z).clone();
    z.clear_grad();
    z.reshaped(vec![batch.batch(), batch.seq(), cfg.model_dim])
}

/// Post-softmax attention weights of every layer and head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    /// One `[batch·heads × seq × seq]` tensor per layer.
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionMaps<T> {
    /// Row-major `seq×seq` weights for one scene, layer and head.
    pub fn scores(&self, layer: usize, head: usize, scene: usize) -> &[T] {
        let block = self.seq * self.seq;
        let start = (scene * self.heads + head) * block;
        &self.layers[layer].data()[start..start + block]
    }
}

pub fn attention_scores<T: Scalar>(
    batch: &PaddedBatch<T>,
    w: &EncoderWeights<T>,
    cfg: &EncoderConfig,
) -> Result<AttentionMaps<T>> {
    let (tape, out) = forward_batch(batch, w, cfg)?;
    Ok(AttentionMaps {
        batch: batch.batch(),
        heads: cfg.num_heads,
        seq: batch.seq(),
        layers: out
            .attention
            .iter()
            .map(|&v| {
                let mut t = tape.value(v).clone();
                t.clear_grad();
                t
            })
            .collect(),
    })
}
