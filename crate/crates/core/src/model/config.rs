use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{AttentionConfig, ConvBlockConfig};
use crate::text::RESERVED;

/// Where the model gets its sense of order from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Conv front-ends only.
    Conv,
    /// Sinusoidal tables and no decoder conv block.
    Sinusoidal,
    /// Sinusoidal tables added on top of the conv outputs.
    Both,
}

impl PositionalMode {
    pub fn uses_decoder_conv(self) -> bool {
        self != PositionalMode::Sinusoidal
    }

    pub fn uses_sinusoid(self) -> bool {
        self != PositionalMode::Conv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncAttentionMode {
    /// Each decoder block owns its encoder attention.
    PerBlock,
    /// One encoder attention layer shared by every decoder block.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of one input feature frame.
    pub feature_dim: usize,
    pub encoder_conv_blocks: Vec<ConvBlockConfig>,
    pub decoder_conv: ConvBlockConfig,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub dropout: f64,
    pub positional_mode: PositionalMode,
    pub enc_attention_mode: EncAttentionMode,
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "canonical" => Ok(ModelConfig {
            feature_dim: 80,
            encoder_conv_blocks: vec![
                ConvBlockConfig::uniform(2, 3, 64, Some(2)),
                ConvBlockConfig::uniform(2, 3, 128, Some(2)),
            ],
            decoder_conv: ConvBlockConfig::uniform(3, 3, 1024, None),
            enc_layers: 10,
            dec_layers: 10,
            d_model: 1024,
            heads: 16,
            ffn_width: 2048,
            vocab_size: 5000 + RESERVED,
            emb_dim: 512,
            dropout: 0.15,
            positional_mode: PositionalMode::Conv,
            enc_attention_mode: EncAttentionMode::PerBlock,
        }),
        "best" => Ok(ModelConfig {
            ffn_width: 4096,
            enc_layers: 16,
            dec_layers: 6,
            ..preset("canonical")?
        }),
        "toy" => Ok(ModelConfig {
            feature_dim: 16,
            encoder_conv_blocks: vec![
                ConvBlockConfig::uniform(2, 3, 4, Some(2)),
                ConvBlockConfig::uniform(2, 3, 8, Some(2)),
            ],
            decoder_conv: ConvBlockConfig::uniform(3, 3, 32, None),
            enc_layers: 2,
            dec_layers: 2,
            d_model: 32,
            heads: 4,
            ffn_width: 64,
            vocab_size: 12,
            emb_dim: 16,
            dropout: 0.0,
            positional_mode: PositionalMode::Conv,
            enc_attention_mode: EncAttentionMode::PerBlock,
        }),
        other => Err(Error::config(
            "model.preset",
            format!("unknown preset `{other}` (expected canonical, best or toy)"),
        )),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |k: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{k}"), "must be >= 1"))
            } else {
                Ok(())
            }
        };
        pos("feature_dim", self.feature_dim)?;
        pos("d_model", self.d_model)?;
        pos("heads", self.heads)?;
        pos("ffn_width", self.ffn_width)?;
        pos("emb_dim", self.emb_dim)?;
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!(
                    "d_model {} is not divisible by {} heads",
                    self.d_model, self.heads
                ),
            ));
        }
        if self.vocab_size <= RESERVED {
            return Err(Error::config(
                "model.vocab_size",
                format!("must exceed the {RESERVED} reserved ids"),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        for (i, b) in self.encoder_conv_blocks.iter().enumerate() {
            b.validate_encoder(&format!("model.encoder_conv_blocks.{i}"))?;
        }
        if self.feature_dim < self.min_frames() {
            return Err(Error::config(
                "model.feature_dim",
                format!(
                    "the encoder conv stack needs at least {} bins",
                    self.min_frames()
                ),
            ));
        }
        if self.positional_mode.uses_decoder_conv() {
            self.decoder_conv.validate_decoder("model.decoder_conv")?;
            if self.decoder_conv.channels != self.d_model {
                return Err(Error::config(
                    "model.decoder_conv.channels",
                    format!(
                        "the decoder conv output feeds the transformer and must equal d_model {}",
                        self.d_model
                    ),
                ));
            }
        }
        if self.positional_mode.uses_sinusoid() && !self.d_model.is_multiple_of(2) {
            return Err(Error::config(
                "model.d_model",
                "sinusoidal positions need an even width",
            ));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::even(self.d_model, self.heads)
    }

    /// Product of the encoder pooling strides.
    pub fn total_stride(&self) -> usize {
        self.encoder_conv_blocks
            .iter()
            .map(|b| b.stride())
            .product()
    }

    /// Frames left after the encoder conv stack (ceil at every pool).
    pub fn encoded_length(&self, frames: usize) -> usize {
        self.encoder_conv_blocks
            .iter()
            .fold(frames, |t, b| t.div_ceil(b.stride()))
    }

    /// Frequency bins left after the encoder conv stack.
    pub fn encoded_bins(&self) -> usize {
        self.encoded_length(self.feature_dim)
    }

    /// Feature maps coming out of the encoder conv stack (1 with no blocks).
    pub fn conv_channels(&self) -> usize {
        self.encoder_conv_blocks.last().map_or(1, |b| b.channels)
    }

    /// Width of one flattened conv frame: channels × surviving bins.
    pub fn flatten_width(&self) -> usize {
        self.conv_channels() * self.encoded_bins()
    }

    /// Shortest extent (frames or bins) every encoder conv layer can take.
    pub fn min_frames(&self) -> usize {
        let mut need = 1;
        let mut stride = 1;
        for b in &self.encoder_conv_blocks {
            let k = b.kernels.iter().copied().max().unwrap_or(1);
            // block input has ceil(T / stride) frames and must be >= k
            need = need.max((k - 1) * stride + 1);
            stride *= b.stride();
        }
        need
    }
}
