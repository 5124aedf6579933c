//! Neural building blocks: attention, layer norm, feed-forward, transformer
//! blocks, the encoder 2-D conv block, the decoder causal 1-D conv block and
//! the sinusoidal table used by the positional ablations.
//!
//! Layers take parameter handles already recorded on a [`Tape`]; the model
//! decides where those come from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_input: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub d_out: usize,
}

impl AttentionConfig {
    /// `heads` heads splitting `d_model` evenly, projecting back to `d_model`.
    pub fn even(d_model: usize, heads: usize) -> Self {
        let d = d_model.checked_div(heads).unwrap_or(0);
        AttentionConfig {
            d_input: d_model,
            d_k: d,
            d_v: d,
            heads,
            d_out: d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_k == 0 || self.d_v == 0 || self.d_input == 0 || self.d_out == 0
        {
            return Err(Error::config(
                "attention",
                format!("all widths must be positive: {self:?}"),
            ));
        }
        Ok(())
    }
}

/// One stack of conv layers: `kernels.len()` layers, each with `channels`
/// feature maps, optionally followed by max pooling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub kernels: Vec<usize>,
    pub channels: usize,
    pub pool: Option<usize>,
}

impl ConvBlockConfig {
    pub fn uniform(num_layers: usize, kernel: usize, channels: usize, pool: Option<usize>) -> Self {
        ConvBlockConfig {
            kernels: vec![kernel; num_layers],
            channels,
            pool,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.kernels.len()
    }

    /// Pooling stride, 1 when there is none.
    pub fn stride(&self) -> usize {
        self.pool.unwrap_or(1)
    }

    pub fn validate_encoder(&self, key: &str) -> Result<()> {
        self.validate_common(key)?;
        if let Some(k) = self.kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config(
                format!("{key}.kernels"),
                format!("encoder kernels use same padding and must be odd, got {k}"),
            ));
        }
        if self.pool == Some(0) {
            return Err(Error::config(
                format!("{key}.pool"),
                "pool extent must be >= 1",
            ));
        }
        Ok(())
    }

    pub fn validate_decoder(&self, key: &str) -> Result<()> {
        self.validate_common(key)?;
        if self.pool.is_some() {
            return Err(Error::config(
                format!("{key}.pool"),
                "decoder conv blocks never pool",
            ));
        }
        Ok(())
    }

    fn validate_common(&self, key: &str) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::config(
                format!("{key}.kernels"),
                "need at least one layer",
            ));
        }
        if self.kernels.contains(&0) {
            return Err(Error::config(
                format!("{key}.kernels"),
                "kernel widths must be >= 1",
            ));
        }
        if self.channels == 0 {
            return Err(Error::config(format!("{key}.channels"), "must be >= 1"));
        }
        Ok(())
    }
}

/// Context size of stacked causal convolutions: `1 + Σ (k - 1)`.
pub fn receptive_field(kernels: &[usize]) -> Result<usize> {
    if kernels.contains(&0) {
        return Err(Error::Contract("kernel widths must be >= 1".into()));
    }
    Ok(1 + kernels.iter().map(|k| k - 1).sum::<usize>())
}

/// Which (query, key) pairs may attend. Row-major `[t_q, t_k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    t_q: usize,
    t_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(t_q: usize, t_k: usize) -> Self {
        AttentionMask {
            t_q,
            t_k,
            allowed: vec![true; t_q * t_k],
        }
    }

    /// Query `t` sees keys `0..=t`.
    pub fn causal(t: usize) -> Self {
        Self::from_fn(t, t, |q, k| k <= q)
    }

    /// Every query sees the first `valid_keys` keys.
    pub fn key_padding(t_q: usize, t_k: usize, valid_keys: usize) -> Self {
        Self::from_fn(t_q, t_k, |_, k| k < valid_keys)
    }

    pub fn from_fn(t_q: usize, t_k: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..t_q * t_k).map(|i| f(i / t_k, i % t_k)).collect();
        AttentionMask { t_q, t_k, allowed }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.t_k + k]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.t_q, self.t_k)
    }

    /// Additive logit bias: 0 where allowed, `-inf` where blocked.
    fn bias(&self) -> Result<Tensor> {
        for q in 0..self.t_q {
            if !(0..self.t_k).any(|k| self.allows(q, k)) {
                return Err(Error::Contract(format!(
                    "query row {q} has no attendable key"
                )));
            }
        }
        Tensor::new(
            [self.t_q, self.t_k],
            self.allowed
                .iter()
                .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
                .collect(),
        )
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// Attention weights `[.., T_q, T_k]`.
    pub weights: Var,
}

/// `softmax(Q Kᵀ / √d_k + mask) V`. Inputs may carry leading head axes
/// (`[.., T, d]`); the mask applies to every head.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    let (sq, sk, sv) = (
        tape.shape(q).to_vec(),
        tape.shape(k).to_vec(),
        tape.shape(v).to_vec(),
    );
    let r = sq.len();
    let ok = r >= 2
        && sk.len() == r
        && sv.len() == r
        && sq[..r - 2] == sk[..r - 2]
        && sk[..r - 2] == sv[..r - 2]
        && sq[r - 1] == sk[r - 1]
        && sk[r - 2] == sv[r - 2]
        && mask.dims() == (sq[r - 2], sk[r - 2]);
    if !ok {
        return Err(Error::dim(
            "scaled_dot_attention",
            format!("Q {sq:?}, K {sk:?}, V {sv:?}, mask {:?}", mask.dims()),
        ));
    }
    let bias = tape.constant(mask.bias()?);
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (sq[r - 1] as f64).sqrt());
    let scores = tape.add_trailing(scores, bias)?;
    let weights = tape.softmax(scores, r - 1)?;
    let output = tape.matmul(weights, v)?;
    Ok(AttentionOutput { output, weights })
}

/// Affine map over the last axis; `weight: [d_in, d_out]`, `bias: [d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_trailing(y, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

pub fn layer_norm(tape: &mut Tape, x: Var, norm: &Norm) -> Result<Var> {
    tape.layer_norm(x, norm.gain, norm.bias, LN_EPS)
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Projects `[T, d_input]` to per-head `[h, T, d]`.
fn split_heads(tape: &mut Tape, x: Var, proj: &Linear, heads: usize, d: usize) -> Result<Var> {
    let y = proj.forward(tape, x)?;
    let t = tape.shape(y)[0];
    let y = tape.reshape(y, &[t, heads, d])?;
    tape.permute(y, &[1, 0, 2])
}

/// `h` parallel scaled dot-product attentions over separate projections,
/// concatenated to width `h·d_v` and projected to `d_out`.
pub fn multi_head_attention(
    tape: &mut Tape,
    x_q: Var,
    x_kv: Var,
    cfg: &AttentionConfig,
    p: &Attention,
    mask: &AttentionMask,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let (sq, skv) = (tape.shape(x_q).to_vec(), tape.shape(x_kv).to_vec());
    if sq.len() != 2 || skv.len() != 2 || sq[1] != cfg.d_input || skv[1] != cfg.d_input {
        return Err(Error::dim(
            "multi_head_attention",
            format!(
                "queries {sq:?} and keys {skv:?} for d_input {}",
                cfg.d_input
            ),
        ));
    }
    let q = split_heads(tape, x_q, &p.q, cfg.heads, cfg.d_k)?;
    let k = split_heads(tape, x_kv, &p.k, cfg.heads, cfg.d_k)?;
    let v = split_heads(tape, x_kv, &p.v, cfg.heads, cfg.d_v)?;
    let att = scaled_dot_attention(tape, q, k, v, mask)?;
    // [h, T, d_v] -> [T, h·d_v]: head blocks side by side
    let merged = tape.permute(att.output, &[1, 0, 2])?;
    let merged = tape.reshape(merged, &[sq[0], cfg.heads * cfg.d_v])?;
    let output = p.out.forward(tape, merged)?;
    Ok(AttentionOutput {
        output,
        weights: att.weights,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}

/// Inverted dropout. Without an RNG (inference) it is the identity.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - rate);
        let shape = tape.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

/// Encoder transformer block parameters.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
}

fn residual_norm(
    tape: &mut Tape,
    x: Var,
    sub: Var,
    norm: &Norm,
    dropout: &mut Dropout,
) -> Result<Var> {
    let sub = dropout.apply(tape, sub)?;
    let sum = tape.add(x, sub)?;
    layer_norm(tape, sum, norm)
}

fn check_model_width(tape: &Tape, x: Var, cfg: &AttentionConfig, op: &'static str) -> Result<()> {
    let s = tape.shape(x);
    if cfg.d_input != cfg.d_out || s.len() != 2 || s[1] != cfg.d_input {
        return Err(Error::dim(
            op,
            format!(
                "input {s:?} for d_input {} / d_out {}",
                cfg.d_input, cfg.d_out
            ),
        ));
    }
    Ok(())
}

/// Post-norm block: attention → dropout → residual → norm → FFN → dropout →
/// residual → norm.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    cfg: &AttentionConfig,
    p: &TransformerBlock,
    self_mask: &AttentionMask,
    dropout: &mut Dropout,
) -> Result<Var> {
    check_model_width(tape, x, cfg, "transformer_block")?;
    let att = multi_head_attention(tape, x, x, cfg, &p.self_attn, self_mask)?;
    let x = residual_norm(tape, x, att.output, &p.norm1, dropout)?;
    let ff = p.ffn.forward(tape, x)?;
    residual_norm(tape, x, ff, &p.norm2, dropout)
}

/// Decoder transformer block: masked self-attention, then attention over
/// the encoder memory, then the feed-forward layer, each post-normed.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub enc_attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
    pub norm3: Norm,
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_block(
    tape: &mut Tape,
    x: Var,
    memory: Var,
    cfg: &AttentionConfig,
    p: &DecoderBlock,
    self_mask: &AttentionMask,
    memory_mask: &AttentionMask,
    dropout: &mut Dropout,
) -> Result<Var> {
    check_model_width(tape, x, cfg, "decoder_block")?;
    let att = multi_head_attention(tape, x, x, cfg, &p.self_attn, self_mask)?;
    let x = residual_norm(tape, x, att.output, &p.norm1, dropout)?;
    let cross = multi_head_attention(tape, x, memory, cfg, &p.enc_attn, memory_mask)?;
    let x = residual_norm(tape, x, cross.output, &p.norm2, dropout)?;
    let ff = p.ffn.forward(tape, x)?;
    residual_norm(tape, x, ff, &p.norm3, dropout)
}

/// One conv layer with its channel-wise norm.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: Var,
    pub bias: Var,
    pub norm: Norm,
}

/// `[C_in, T, F]` → per layer (2-D conv, layer norm over channels, ReLU) →
/// max pool over time and frequency.
pub fn encoder_conv_block(
    tape: &mut Tape,
    x: Var,
    cfg: &ConvBlockConfig,
    layers: &[ConvLayer],
) -> Result<Var> {
    cfg.validate_encoder("encoder_conv")?;
    if layers.len() != cfg.num_layers() {
        return Err(Error::dim(
            "encoder_conv_block",
            format!(
                "{} layer params for {} layers",
                layers.len(),
                cfg.num_layers()
            ),
        ));
    }
    let s = tape.shape(x).to_vec();
    let kmax = cfg.kernels.iter().copied().max().unwrap_or(1);
    if s.len() != 3 || s[1] < kmax || s[2] < kmax {
        return Err(Error::dim(
            "encoder_conv_block",
            format!("input {s:?} is smaller than kernel {kmax}"),
        ));
    }
    let mut h = x;
    for layer in layers {
        h = tape.conv2d_same(h, layer.weight, layer.bias)?;
        let chan_last = tape.permute(h, &[1, 2, 0])?;
        let normed = layer_norm(tape, chan_last, &layer.norm)?;
        h = tape.permute(normed, &[2, 0, 1])?;
        h = tape.relu(h);
    }
    match cfg.pool {
        Some(p) if p > 1 => tape.max_pool2d(h, p),
        _ => Ok(h),
    }
}

/// `[T, D_in]` → per layer (causal 1-D conv, layer norm, ReLU). Output
/// step `t` depends only on inputs `0..=t`.
pub fn decoder_conv_block(
    tape: &mut Tape,
    e: Var,
    cfg: &ConvBlockConfig,
    layers: &[ConvLayer],
) -> Result<Var> {
    cfg.validate_decoder("decoder_conv")?;
    if layers.len() != cfg.num_layers() {
        return Err(Error::dim(
            "decoder_conv_block",
            format!(
                "{} layer params for {} layers",
                layers.len(),
                cfg.num_layers()
            ),
        ));
    }
    let mut h = e;
    for layer in layers {
        h = tape.causal_conv1d(h, layer.weight, layer.bias)?;
        h = layer_norm(tape, h, &layer.norm)?;
        h = tape.relu(h);
    }
    Ok(h)
}

/// Sin/cos table: `pe[t, 2i] = sin(t / 10000^(2i/D))`,
/// `pe[t, 2i+1] = cos(t / 10000^(2i/D))`.
pub fn sinusoidal_embedding(t_len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(
            "model.d_model",
            format!("sinusoidal embedding needs an even positive width, got {d}"),
        ));
    }
    Ok(Tensor::from_fn([t_len, d], |i| {
        let (t, j) = (i / d, i % d);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
        let angle = t as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}
