//! The convolutional-context encoder-decoder: parameter layout, forward
//! passes, batching and the training loss.
//!
//! Batches are run one utterance at a time over its valid frames and tokens
//! only, so padding can never leak into a valid position.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::layers::{
    decoder_block, decoder_conv_block, encoder_conv_block, sinusoidal_embedding, transformer_block,
    Attention, AttentionMask, ConvLayer, DecoderBlock, Dropout, FeedForward, Linear, Norm,
    TransformerBlock,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{BOS, EOS};

pub use checkpoint::{Checkpoint, Header, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{preset, EncAttentionMode, ModelConfig, PositionalMode};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
    /// Standard normal.
    Normal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec { name, shape, init });
    }

    fn linear(&mut self, p: &str, d_in: usize, d_out: usize) {
        self.push(format!("{p}.weight"), vec![d_in, d_out], Init::FanIn(d_in));
        self.push(format!("{p}.bias"), vec![d_out], Init::Zeros);
    }

    fn norm(&mut self, p: &str, d: usize) {
        self.push(format!("{p}.gain"), vec![d], Init::Ones);
        self.push(format!("{p}.bias"), vec![d], Init::Zeros);
    }

    fn attention(&mut self, p: &str, d: usize) {
        for part in ["q", "k", "v", "out"] {
            self.linear(&format!("{p}.{part}"), d, d);
        }
    }

    fn ffn(&mut self, p: &str, d: usize, width: usize) {
        self.linear(&format!("{p}.fc1"), d, width);
        self.linear(&format!("{p}.fc2"), width, d);
    }

    fn conv(&mut self, p: &str, shape: Vec<usize>, channels: usize) {
        let fan_in = shape[1..].iter().product();
        self.push(format!("{p}.weight"), shape, Init::FanIn(fan_in));
        self.push(format!("{p}.bias"), vec![channels], Init::Zeros);
        self.norm(&format!("{p}.norm"), channels);
    }
}

/// Every parameter tensor the config implies, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut s = Specs::default();

    let mut c_in = 1;
    for (b, block) in cfg.encoder_conv_blocks.iter().enumerate() {
        for (l, &k) in block.kernels.iter().enumerate() {
            let shape = vec![block.channels, c_in, k, k];
            s.conv(&format!("encoder.conv{b}.layer{l}"), shape, block.channels);
            c_in = block.channels;
        }
    }
    s.linear("encoder.proj", cfg.flatten_width(), d);
    for i in 0..cfg.enc_layers {
        let p = format!("encoder.block{i}");
        s.attention(&format!("{p}.self_attn"), d);
        s.norm(&format!("{p}.norm1"), d);
        s.ffn(&format!("{p}.ffn"), d, cfg.ffn_width);
        s.norm(&format!("{p}.norm2"), d);
    }

    s.push(
        "decoder.embed.weight".into(),
        vec![cfg.vocab_size, cfg.emb_dim],
        Init::Normal,
    );
    if cfg.positional_mode.uses_decoder_conv() {
        let mut c_in = cfg.emb_dim;
        let ch = cfg.decoder_conv.channels;
        for (l, &k) in cfg.decoder_conv.kernels.iter().enumerate() {
            s.conv(&format!("decoder.conv.layer{l}"), vec![ch, c_in, k], ch);
            c_in = ch;
        }
    } else {
        s.linear("decoder.embed_proj", cfg.emb_dim, d);
    }
    if cfg.enc_attention_mode == EncAttentionMode::Single {
        s.attention("decoder.enc_attn", d);
    }
    for i in 0..cfg.dec_layers {
        let p = format!("decoder.block{i}");
        s.attention(&format!("{p}.self_attn"), d);
        s.norm(&format!("{p}.norm1"), d);
        if cfg.enc_attention_mode == EncAttentionMode::PerBlock {
            s.attention(&format!("{p}.enc_attn"), d);
        }
        s.norm(&format!("{p}.norm2"), d);
        s.ffn(&format!("{p}.ffn"), d, cfg.ffn_width);
        s.norm(&format!("{p}.norm3"), d);
    }
    s.linear("decoder.out", d, cfg.vocab_size);
    Ok(s.0)
}

/// Reporting group of a parameter name.
pub fn component_of(name: &str) -> String {
    let mut parts = name.split('.');
    let top = parts.next().unwrap_or_default();
    let sub = parts.next().unwrap_or_default();
    if sub.starts_with("block") {
        format!("{top}.blocks")
    } else if sub.starts_with("conv") {
        format!("{top}.conv")
    } else {
        format!("{top}.{sub}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// Per component, in layout order.
    pub components: Vec<(String, usize)>,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    let mut components: Vec<(String, usize)> = Vec::new();
    for spec in param_specs(cfg)? {
        let c = component_of(&spec.name);
        match components.last_mut() {
            Some((name, n)) if *name == c => *n += spec.numel(),
            _ => components.push((c, spec.numel())),
        }
    }
    Ok(ParamCount {
        total: components.iter().map(|(_, n)| n).sum(),
        components,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Fresh parameters drawn from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in param_specs(&config)? {
            let t = match spec.init {
                Init::FanIn(n) => {
                    let a = 1.0 / (n as f64).sqrt();
                    Tensor::from_fn(spec.shape, |_| rng.random_range(-a..a))
                }
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::full(spec.shape, 1.0),
                Init::Normal => {
                    Tensor::from_fn(spec.shape, |_| rng.sample::<f64, _>(StandardNormal))
                }
            };
            params.insert(spec.name, round_f32(t));
        }
        Ok(Model { config, params })
    }

    /// Wraps existing tensors, checking them against the config's layout.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let specs = param_specs(&config)?;
        for spec in &specs {
            let t = params.get(&spec.name).ok_or_else(|| Error::ParamMismatch {
                name: spec.name.clone(),
                msg: "missing".into(),
            })?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParamMismatch {
                    name: spec.name.clone(),
                    msg: format!("shape {:?}, config expects {:?}", t.shape(), spec.shape),
                });
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::ParamMismatch {
                name: extra,
                msg: "not part of this configuration".into(),
            });
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Mutable parameter values; names and shapes stay fixed.
    pub fn values_mut(&mut self) -> impl Iterator<Item = (&String, &mut [f64])> {
        self.params.iter_mut().map(|(k, t)| (k, t.data_mut()))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.params.get_mut(name).map(Tensor::data_mut)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Encodes a padded batch `[B, T, F]`. Rows past each length are zero.
    pub fn encode(&self, features: &Tensor, lengths: &[usize]) -> Result<Encoded> {
        let s = features.shape();
        if s.len() != 3 || s[0] != lengths.len() {
            return Err(Error::dim(
                "encode",
                format!("features {s:?} with {} lengths", lengths.len()),
            ));
        }
        let (b, t_max) = (s[0], s[1]);
        let d = self.config.d_model;
        let t_out = self.config.encoded_length(t_max);
        let mut memory = Tensor::zeros([b, t_out, d]);
        let mut out_lengths = Vec::with_capacity(b);
        let mut sess = Session::inference(self);
        for (i, &len) in lengths.iter().enumerate() {
            if len > t_max {
                return Err(Error::Input(format!(
                    "length {len} exceeds padded extent {t_max}"
                )));
            }
            sess.reset();
            let feats = utterance_rows(features, i, len)?;
            let m = sess.encode(&feats)?;
            let rows = sess.tape.value(m);
            let n = rows.shape()[0];
            memory.data_mut()[i * t_out * d..(i * t_out + n) * d].copy_from_slice(rows.data());
            out_lengths.push(n);
        }
        Ok(Encoded {
            memory,
            lengths: out_lengths,
        })
    }

    /// Logits `[B, U, V]` for BOS-started prefixes. Positions past a
    /// prefix's own length are zero.
    pub fn decode_step_logits(&self, enc: &Encoded, prefixes: &[Vec<usize>]) -> Result<Tensor> {
        if prefixes.len() != enc.len() {
            return Err(Error::dim(
                "decode_step_logits",
                format!(
                    "{} prefixes for {} encoded utterances",
                    prefixes.len(),
                    enc.len()
                ),
            ));
        }
        let u_max = prefixes.iter().map(Vec::len).max().unwrap_or(0);
        let v = self.config.vocab_size;
        let mut out = Tensor::zeros([prefixes.len(), u_max, v]);
        let mut sess = Session::inference(self);
        for (i, prefix) in prefixes.iter().enumerate() {
            if prefix.first() != Some(&BOS) {
                return Err(Error::Input(format!("prefix {i} does not start with BOS")));
            }
            sess.reset();
            let mem = sess.tape.constant(enc.utterance(i)?);
            let logits = sess.decode(mem, prefix)?;
            let vals = sess.tape.value(logits).data();
            out.data_mut()[i * u_max * v..i * u_max * v + vals.len()].copy_from_slice(vals);
        }
        Ok(out)
    }

    /// Teacher-forced loss and token accuracy without dropout.
    pub fn evaluate(&self, batch: &Batch) -> Result<EvalStats> {
        let mut sess = Session::inference(self);
        let mut stats = EvalStats::default();
        for i in 0..batch.len() {
            sess.reset();
            let (feats, tokens) = batch.utterance(i)?;
            let (nll, logits) = sess.utterance_nll(&feats, tokens)?;
            stats.nll_sum += sess.tape.value(nll).item()?;
            let lv = sess.tape.value(logits);
            let v = lv.shape()[1];
            for (row, &want) in lv.data().chunks(v).zip(&tokens[1..]) {
                stats.correct += usize::from(argmax(row) == want);
                stats.tokens += 1;
            }
        }
        Ok(stats)
    }
}

fn round_f32(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
    t
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn utterance_rows(features: &Tensor, b: usize, len: usize) -> Result<Tensor> {
    let s = features.shape();
    let (t, f) = (s[1], s[2]);
    let start = b * t * f;
    Tensor::new([len, f], features.data()[start..start + len * f].to_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub nll_sum: f64,
    pub correct: usize,
    pub tokens: usize,
}

impl EvalStats {
    pub fn loss(&self) -> f64 {
        self.nll_sum / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

/// Encoder output for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// `[B, T', d_model]`, zero past each length.
    pub memory: Tensor,
    pub lengths: Vec<usize>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// `mask[b][t]` is true for valid frames.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        let t = self.memory.shape()[1];
        self.lengths
            .iter()
            .map(|&n| (0..t).map(|i| i < n).collect())
            .collect()
    }

    /// Valid memory rows `[T'_b, d_model]` of one utterance.
    pub fn utterance(&self, b: usize) -> Result<Tensor> {
        let len = *self
            .lengths
            .get(b)
            .ok_or_else(|| Error::Input(format!("no utterance {b}")))?;
        utterance_rows(&self.memory, b, len)
    }
}

/// A padded training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T, F]`.
    pub features: Tensor,
    pub feature_lengths: Vec<usize>,
    /// `B` rows of `U` ids, padded with [`crate::text::PAD`].
    pub targets: Vec<Vec<usize>>,
    pub target_lengths: Vec<usize>,
}

impl Batch {
    /// Pads `(features [T_i, F], BOS … EOS tokens)` pairs into one batch.
    pub fn from_utterances(items: &[(&Tensor, &[usize])]) -> Result<Self> {
        let f = items
            .first()
            .map_or(0, |(x, _)| x.shape().get(1).copied().unwrap_or(0));
        let t_max = items.iter().map(|(x, _)| x.shape()[0]).max().unwrap_or(0);
        let u_max = items.iter().map(|(_, y)| y.len()).max().unwrap_or(0);
        let mut features = Tensor::zeros([items.len(), t_max, f]);
        let mut batch = Batch {
            features: Tensor::zeros([0]),
            feature_lengths: Vec::with_capacity(items.len()),
            targets: Vec::with_capacity(items.len()),
            target_lengths: Vec::with_capacity(items.len()),
        };
        for (i, (x, y)) in items.iter().enumerate() {
            if x.rank() != 2 || x.shape()[1] != f {
                return Err(Error::dim(
                    "batch",
                    format!("utterance {i} has shape {:?}, expected [T, {f}]", x.shape()),
                ));
            }
            let start = i * t_max * f;
            features.data_mut()[start..start + x.numel()].copy_from_slice(x.data());
            batch.feature_lengths.push(x.shape()[0]);
            let mut row = y.to_vec();
            row.resize(u_max, crate::text::PAD);
            batch.targets.push(row);
            batch.target_lengths.push(y.len());
        }
        batch.features = features;
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.feature_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_lengths.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.features.shape();
        let b = self.len();
        if s.len() != 3 || s[0] != b || self.targets.len() != b || self.target_lengths.len() != b {
            return Err(Error::dim(
                "batch",
                format!(
                    "features {s:?}, {} feature lengths, {} target rows, {} target lengths",
                    b,
                    self.targets.len(),
                    self.target_lengths.len()
                ),
            ));
        }
        for i in 0..b {
            if self.feature_lengths[i] > s[1] {
                return Err(Error::Input(format!(
                    "utterance {i}: feature length exceeds padding"
                )));
            }
            let (row, n) = (&self.targets[i], self.target_lengths[i]);
            if n > row.len() {
                return Err(Error::Input(format!(
                    "utterance {i}: target length exceeds padding"
                )));
            }
            let y = &row[..n];
            if n < 2 || y[0] != BOS || y[n - 1] != EOS {
                return Err(Error::Input(format!(
                    "utterance {i}: targets must start with BOS and end with EOS"
                )));
            }
        }
        Ok(())
    }

    /// Valid features `[T_b, F]` and tokens of one utterance.
    pub fn utterance(&self, b: usize) -> Result<(Tensor, &[usize])> {
        let feats = utterance_rows(&self.features, b, self.feature_lengths[b])?;
        Ok((feats, &self.targets[b][..self.target_lengths[b]]))
    }
}

/// Mean negative log-likelihood of `targets[b][u]` under `logits[b, u]`
/// over positions `u < target_lengths[b]`.
pub fn loss(logits: &Tensor, targets: &[Vec<usize>], target_lengths: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != targets.len() || s[0] != target_lengths.len() {
        return Err(Error::dim(
            "loss",
            format!("logits {s:?} for {} target rows", targets.len()),
        ));
    }
    let (u_max, v) = (s[1], s[2]);
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, (row, &n)) in targets.iter().zip(target_lengths).enumerate() {
        if n > u_max || n > row.len() {
            return Err(Error::dim(
                "loss",
                format!("target length {n} exceeds {u_max}"),
            ));
        }
        for (u, &y) in row[..n].iter().enumerate() {
            if y >= v {
                return Err(Error::Input(format!("target id {y} >= vocab {v}")));
            }
            let z = &logits.data()[(b * u_max + u) * v..(b * u_max + u + 1) * v];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - z[y];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract(
            "loss over a batch with every position padded".into(),
        ));
    }
    Ok(total / count as f64)
}

/// Parameters bound to a tape for one forward (and backward) pass.
pub struct Session<'m> {
    model: &'m Model,
    pub tape: Tape,
    vars: BTreeMap<&'m str, Var>,
    dropout: Dropout,
    base: usize,
}

impl<'m> Session<'m> {
    fn bind(model: &'m Model, trainable: bool, dropout: Dropout) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.as_str(), v)
            })
            .collect();
        let base = tape.len();
        Session {
            model,
            tape,
            vars,
            dropout,
            base,
        }
    }

    /// No gradients, no dropout.
    pub fn inference(model: &'m Model) -> Self {
        Self::bind(model, false, Dropout::disabled())
    }

    /// Gradients on every parameter and dropout seeded by `seed`.
    pub fn training(model: &'m Model, seed: u64) -> Self {
        let rate = model.config.dropout;
        Self::bind(model, true, Dropout::new(rate, seed))
    }

    /// Gradients without dropout.
    pub fn deterministic(model: &'m Model) -> Self {
        Self::bind(model, true, Dropout::disabled())
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    /// Drops everything recorded after the parameters were bound.
    pub fn reset(&mut self) {
        self.tape.truncate(self.base);
    }

    pub fn param(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    /// Gradient of every parameter (zeros where nothing flowed).
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(&k, &v)| {
                let g = self
                    .tape
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v).to_vec()));
                (k.to_string(), g)
            })
            .collect()
    }

    fn linear(&self, p: &str) -> Linear {
        Linear {
            weight: self.param(&format!("{p}.weight")),
            bias: self.param(&format!("{p}.bias")),
        }
    }

    fn norm(&self, p: &str) -> Norm {
        Norm {
            gain: self.param(&format!("{p}.gain")),
            bias: self.param(&format!("{p}.bias")),
        }
    }

    fn attention(&self, p: &str) -> Attention {
        Attention {
            q: self.linear(&format!("{p}.q")),
            k: self.linear(&format!("{p}.k")),
            v: self.linear(&format!("{p}.v")),
            out: self.linear(&format!("{p}.out")),
        }
    }

    fn ffn(&self, p: &str) -> FeedForward {
        FeedForward {
            fc1: self.linear(&format!("{p}.fc1")),
            fc2: self.linear(&format!("{p}.fc2")),
        }
    }

    fn conv_layers(&self, p: &str, n: usize) -> Vec<ConvLayer> {
        (0..n)
            .map(|l| {
                let q = format!("{p}.layer{l}");
                ConvLayer {
                    weight: self.param(&format!("{q}.weight")),
                    bias: self.param(&format!("{q}.bias")),
                    norm: self.norm(&format!("{q}.norm")),
                }
            })
            .collect()
    }

    fn encoder_block(&self, i: usize) -> TransformerBlock {
        let p = format!("encoder.block{i}");
        TransformerBlock {
            self_attn: self.attention(&format!("{p}.self_attn")),
            norm1: self.norm(&format!("{p}.norm1")),
            ffn: self.ffn(&format!("{p}.ffn")),
            norm2: self.norm(&format!("{p}.norm2")),
        }
    }

    fn decoder_block(&self, i: usize) -> DecoderBlock {
        let p = format!("decoder.block{i}");
        let enc_attn = match self.config().enc_attention_mode {
            EncAttentionMode::PerBlock => self.attention(&format!("{p}.enc_attn")),
            EncAttentionMode::Single => self.attention("decoder.enc_attn"),
        };
        DecoderBlock {
            self_attn: self.attention(&format!("{p}.self_attn")),
            norm1: self.norm(&format!("{p}.norm1")),
            enc_attn,
            norm2: self.norm(&format!("{p}.norm2")),
            ffn: self.ffn(&format!("{p}.ffn")),
            norm3: self.norm(&format!("{p}.norm3")),
        }
    }

    /// Encoder conv stack on one utterance `[T, F]` → `[C, T', F']`.
    pub fn conv_stack(&mut self, features: &Tensor) -> Result<Var> {
        let cfg = self.config();
        let s = features.shape();
        if s.len() != 2 || s[1] != cfg.feature_dim {
            return Err(Error::dim(
                "encode",
                format!("features {s:?}, config expects [T, {}]", cfg.feature_dim),
            ));
        }
        if s[0] == 0 {
            return Err(Error::Input("empty utterance".into()));
        }
        if s[0] < cfg.min_frames() {
            return Err(Error::Input(format!(
                "utterance of {} frames is shorter than the {} the conv stack needs",
                s[0],
                cfg.min_frames()
            )));
        }
        let x = self
            .tape
            .constant(features.clone().reshape([1, s[0], s[1]])?);
        let mut h = x;
        for (b, block) in cfg.encoder_conv_blocks.iter().enumerate() {
            let layers = self.conv_layers(&format!("encoder.conv{b}"), block.num_layers());
            h = encoder_conv_block(&mut self.tape, h, block, &layers)?;
        }
        Ok(h)
    }

    /// Conv stack → flatten → projection (→ + sinusoid): `[T', d_model]`.
    pub fn front_end(&mut self, features: &Tensor) -> Result<Var> {
        let h = self.conv_stack(features)?;
        let s = self.tape.shape(h).to_vec();
        let frames = self.tape.permute(h, &[1, 0, 2])?;
        let flat = self.tape.reshape(frames, &[s[1], s[0] * s[2]])?;
        let proj = self.linear("encoder.proj").forward(&mut self.tape, flat)?;
        self.add_sinusoid(proj)
    }

    fn add_sinusoid(&mut self, x: Var) -> Result<Var> {
        let cfg = self.config();
        if !cfg.positional_mode.uses_sinusoid() {
            return Ok(x);
        }
        let t = self.tape.shape(x)[0];
        let pe = self.tape.constant(sinusoidal_embedding(t, cfg.d_model)?);
        self.tape.add(x, pe)
    }

    /// Full encoder on one utterance: `[T', d_model]` memory.
    pub fn encode(&mut self, features: &Tensor) -> Result<Var> {
        let cfg = self.config();
        let mut h = self.front_end(features)?;
        let t = self.tape.shape(h)[0];
        let mask = AttentionMask::full(t, t);
        let att = cfg.attention();
        for i in 0..cfg.enc_layers {
            let p = self.encoder_block(i);
            h = transformer_block(&mut self.tape, h, &att, &p, &mask, &mut self.dropout)?;
        }
        Ok(h)
    }

    /// Token embedding and the decoder's positional front end: `[U, d_model]`.
    pub fn decoder_input(&mut self, tokens: &[usize]) -> Result<Var> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(Error::Input("empty decoder prefix".into()));
        }
        let table = self.param("decoder.embed.weight");
        let e = self.tape.gather_rows(table, tokens)?;
        let h = if cfg.positional_mode.uses_decoder_conv() {
            let layers = self.conv_layers("decoder.conv", cfg.decoder_conv.num_layers());
            decoder_conv_block(&mut self.tape, e, &cfg.decoder_conv, &layers)?
        } else {
            self.linear("decoder.embed_proj")
                .forward(&mut self.tape, e)?
        };
        self.add_sinusoid(h)
    }

    /// Logits `[U, V]` for every position of `tokens` given `memory`.
    pub fn decode(&mut self, memory: Var, tokens: &[usize]) -> Result<Var> {
        let cfg = self.config();
        let mut h = self.decoder_input(tokens)?;
        let (u, t) = (tokens.len(), self.tape.shape(memory)[0]);
        let self_mask = AttentionMask::causal(u);
        let mem_mask = AttentionMask::full(u, t);
        let att = cfg.attention();
        for i in 0..cfg.dec_layers {
            let p = self.decoder_block(i);
            h = decoder_block(
                &mut self.tape,
                h,
                memory,
                &att,
                &p,
                &self_mask,
                &mem_mask,
                &mut self.dropout,
            )?;
        }
        self.linear("decoder.out").forward(&mut self.tape, h)
    }

    /// Teacher-forced summed NLL of `BOS … EOS` tokens, plus the logits.
    pub fn utterance_nll(&mut self, features: &Tensor, tokens: &[usize]) -> Result<(Var, Var)> {
        if tokens.len() < 2 {
            return Err(Error::Input("targets need at least BOS and EOS".into()));
        }
        let n = tokens.len();
        let memory = self.encode(features)?;
        let logits = self.decode(memory, &tokens[..n - 1])?;
        let logp = self.tape.log_softmax(logits, 1)?;
        let picked = self.tape.pick(logp, &tokens[1..])?;
        let total = self.tape.sum(picked);
        Ok((self.tape.scale(total, -1.0), logits))
    }

    /// Mean token NLL over the batch; returns the loss node and token count.
    pub fn batch_loss(&mut self, batch: &Batch) -> Result<(Var, usize)> {
        let mut total: Option<Var> = None;
        let mut count = 0;
        for i in 0..batch.len() {
            let (feats, tokens) = batch.utterance(i)?;
            let (nll, _) = self.utterance_nll(&feats, tokens)?;
            count += tokens.len() - 1;
            total = Some(match total {
                Some(t) => self.tape.add(t, nll)?,
                None => nll,
            });
        }
        let total = total
            .filter(|_| count > 0)
            .ok_or_else(|| Error::Contract("loss over an empty batch".into()))?;
        Ok((self.tape.scale(total, 1.0 / count as f64), count))
    }
}
