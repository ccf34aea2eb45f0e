// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    DecoderOnly,
    EncoderDecoder,
}

/// Hyper-parameters of a toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub max_positions: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A small decoder-only configuration.
    pub fn decoder_only(vocab_size: usize) -> Self {
        Self {
            arch: Architecture::DecoderOnly,
            vocab_size,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_layers_enc: 0,
            n_layers_dec: 2,
            max_positions: 32,
            dropout_p: 0.1,
            seed: 0,
        }
    }

    /// A small encoder-decoder configuration.
    pub fn encoder_decoder(vocab_size: usize) -> Self {
        Self {
            arch: Architecture::EncoderDecoder,
            n_layers_enc: 2,
            ..Self::decoder_only(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 8 {
            return fail(format!("vocab_size {} is below the minimum of 8", self.vocab_size));
        }
        match self.arch {
            Architecture::DecoderOnly if self.n_layers_enc != 0 => {
                return fail("decoder-only models cannot have encoder layers".into())
            }
            Architecture::EncoderDecoder if self.n_layers_enc == 0 => {
                return fail("encoder-decoder models need at least one encoder layer".into())
            }
            _ => {}
        }
        if self.n_layers_dec == 0 {
            return fail("at least one decoder layer is required".into());
        }
        if self.d_ff == 0 || self.max_positions == 0 {
            return fail("d_ff and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_encoder_decoder(&self) -> bool {
        self.arch == Architecture::EncoderDecoder
    }
}

/// Ordered tensor table of a model: manifest order is initialisation order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let mut out = vec![
        ("embed.tokens".to_string(), vec![config.vocab_size, d]),
        ("embed.positions".to_string(), vec![config.max_positions, d]),
    ];
    let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.gain"), vec![d]));
        out.push((format!("{prefix}.bias"), vec![d]));
    };
    let attention = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.w{proj}"), vec![d, d]));
            out.push((format!("{prefix}.b{proj}"), vec![d]));
        }
    };
    let mlp = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.w1"), vec![d, ff]));
        out.push((format!("{prefix}.b1"), vec![ff]));
        out.push((format!("{prefix}.w2"), vec![ff, d]));
        out.push((format!("{prefix}.b2"), vec![d]));
    };
    for l in 0..config.n_layers_enc {
        let p = format!("encoder.layers.{l}");
        norm(&mut out, &format!("{p}.ln_attn"));
        attention(&mut out, &format!("{p}.self_attn"));
        norm(&mut out, &format!("{p}.ln_mlp"));
        mlp(&mut out, &format!("{p}.mlp"));
    }
    if config.n_layers_enc > 0 {
        norm(&mut out, "encoder.ln_final");
    }
    for l in 0..config.n_layers_dec {
        let p = format!("decoder.layers.{l}");
        norm(&mut out, &format!("{p}.ln_attn"));
        attention(&mut out, &format!("{p}.self_attn"));
        if config.is_encoder_decoder() {
            norm(&mut out, &format!("{p}.ln_cross"));
            attention(&mut out, &format!("{p}.cross_attn"));
        }
        norm(&mut out, &format!("{p}.ln_mlp"));
        mlp(&mut out, &format!("{p}.mlp"));
    }
    norm(&mut out, "decoder.ln_final");
    out.push(("lm_head.weight".to_string(), vec![d, config.vocab_size]));
    out.push(("lm_head.bias".to_string(), vec![config.vocab_size]));
    out
}
