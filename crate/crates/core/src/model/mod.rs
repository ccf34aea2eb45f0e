// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy transformers.
//!
//! A [`ModelBundle`] holds a configuration, named weights and a tokenizer.
//! Forward passes are recorded on a caller-owned [`Tape`], so one bundle can
//! serve many threads at once.
//!
//! ```
//! use seqattr::model::{ModelBundle, ModelConfig, BOS_ID};
//!
//! let model = ModelBundle::init(ModelConfig::decoder_only(16)).unwrap();
//! let trace = model.forward(&[BOS_ID], None, false).unwrap();
//! assert_eq!(trace.logits.shape(), &[1, 16]);
//! ```

mod config;
mod tokenizer;
mod transformer;
mod weights;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

pub use config::{parameter_layout, Architecture, ModelConfig};
pub use tokenizer::{
    is_continuation, split_word, TokenId, Tokenizer, BOS_ID, CONTINUATION_PREFIX, EOS_ID,
    MAX_PIECE_LEN, PAD_ID, SPECIAL_PIECES, SPLIT_THRESHOLD, UNK_ID,
};
pub use transformer::{EncoderInput, ForwardOptions, ForwardVars, LN_EPS, MASK_VALUE};
pub use weights::{Weights, FORMAT_VERSION, INIT_STD, MAGIC};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Plain-value result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[T × vocab]`.
    pub logits: Tensor,
    pub self_attention: Vec<Tensor>,
    pub cross_attention: Vec<Tensor>,
    pub mlp_outputs: Vec<Tensor>,
    pub encoder_output: Option<Tensor>,
}

/// Counts of forward and backward passes run through a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct PassCounts {
    pub forward: u64,
    pub backward: u64,
}

#[derive(Debug)]
pub struct ModelBundle {
    name: String,
    config: ModelConfig,
    weights: Weights,
    tokenizer: Tokenizer,
    forward_passes: AtomicU64,
    backward_passes: AtomicU64,
}

impl Clone for ModelBundle {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            config: self.config.clone(),
            weights: self.weights.clone(),
            tokenizer: self.tokenizer.clone(),
            forward_passes: AtomicU64::new(0),
            backward_passes: AtomicU64::new(0),
        }
    }
}

impl ModelBundle {
    /// Fresh model with a placeholder vocabulary `w4, w5, ...`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        pieces.extend((SPECIAL_PIECES.len()..config.vocab_size).map(|i| format!("w{i}")));
        Self::init_with_tokenizer(config, Tokenizer::new(pieces)?)
    }

    /// Fresh model over an existing vocabulary; `config.vocab_size` must
    /// match the tokenizer.
    pub fn init_with_tokenizer(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        if tokenizer.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} pieces but vocab_size is {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }
        let weights = Weights::init(&config);
        Ok(Self::assemble(format!("toy-{:?}-{}", config.arch, config.seed).to_lowercase(), config, weights, tokenizer))
    }

    fn assemble(name: String, config: ModelConfig, weights: Weights, tokenizer: Tokenizer) -> Self {
        Self {
            name,
            config,
            weights,
            tokenizer,
            forward_passes: AtomicU64::new(0),
            backward_passes: AtomicU64::new(0),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = weights::encode(&self.name, &self.config, self.tokenizer.pieces_list(), &self.weights);
        weights::write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = weights::decode(&weights::read_file(path)?)?;
        let tokenizer = Tokenizer::new(file.vocab)?;
        Ok(Self::assemble(file.name, file.config, file.weights, tokenizer))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Overwrites one named parameter (shape must match).
    pub fn set_weight(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.weights.set(name, value)
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn is_encoder_decoder(&self) -> bool {
        self.config.is_encoder_decoder()
    }

    pub fn pass_counts(&self) -> PassCounts {
        PassCounts {
            forward: self.forward_passes.load(Ordering::Relaxed),
            backward: self.backward_passes.load(Ordering::Relaxed),
        }
    }

    pub fn reset_pass_counts(&self) {
        self.forward_passes.store(0, Ordering::Relaxed);
        self.backward_passes.store(0, Ordering::Relaxed);
    }

    /// Checks ids against the vocabulary and the length against the
    /// positional table.
    pub fn validate_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if ids.len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embedding rows `[n × d_model]`, without positions.
    pub fn token_embeddings(&self, ids: &[TokenId]) -> Result<Tensor> {
        self.validate_ids(ids)?;
        let table = self.weights.get("embed.tokens");
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(table.row(id as usize));
        }
        Ok(Tensor::from_parts(vec![ids.len(), d], data))
    }

    /// Differentiable forward pass from token embeddings.
    pub fn forward_embeddings(
        &self,
        tape: &mut Tape,
        decoder_embeds: Var,
        encoder: Option<&EncoderInput>,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        self.check_embeds(tape, decoder_embeds)?;
        match (encoder, self.is_encoder_decoder()) {
            (Some(enc), true) => {
                self.check_embeds(tape, enc.embeds)?;
                if let Some(mask) = &enc.key_mask {
                    if mask.len() != tape.shape(enc.embeds)[0] || !mask.iter().any(|&m| m) {
                        return Err(Error::Input("encoder key mask must match the source and keep one token".into()));
                    }
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::Input("decoder-only model given encoder input".into())),
            (None, true) => return Err(Error::Input("encoder-decoder model needs encoder input".into())),
        }
        if let Some(l) = opts.hook_layer {
            if l >= self.config.n_layers_dec {
                return Err(Error::Method(format!(
                    "layer {l} out of range for {} decoder layers",
                    self.config.n_layers_dec
                )));
            }
        }
        if let Some(p) = opts.dropout_p {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::domain("dropout", format!("p = {p} outside [0, 1)")));
            }
        }
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        transformer::forward(&self.config, &self.weights, tape, decoder_embeds, encoder, opts)
    }

    fn check_embeds(&self, tape: &Tape, v: Var) -> Result<()> {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != self.config.d_model || s[0] == 0 {
            return Err(Error::shape(
                "forward",
                format!("embeddings must be [n x {}], got {s:?}", self.config.d_model),
            ));
        }
        if s[0] > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_positions {}",
                s[0], self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Reverse pass through the tape, counted by [`pass_counts`](Self::pass_counts).
    pub fn backward(&self, tape: &mut Tape, root: Var) -> Result<()> {
        tape.backward(root)?;
        self.backward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Convenience non-differentiable pass over token ids.
    pub fn forward(
        &self,
        decoder_ids: &[TokenId],
        encoder_ids: Option<&[TokenId]>,
        train_mode: bool,
    ) -> Result<ForwardTrace> {
        let opts = ForwardOptions {
            train_mode,
            ..ForwardOptions::default()
        };
        self.forward_with(decoder_ids, encoder_ids.map(|ids| (ids, None)), &opts)
    }

    /// Non-differentiable pass with explicit options and an optional
    /// encoder key mask.
    pub fn forward_with(
        &self,
        decoder_ids: &[TokenId],
        encoder: Option<(&[TokenId], Option<Vec<bool>>)>,
        opts: &ForwardOptions,
    ) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let dec = tape.constant(self.token_embeddings(decoder_ids)?);
        let enc = match encoder {
            Some((ids, key_mask)) => Some(EncoderInput {
                embeds: tape.constant(self.token_embeddings(ids)?),
                key_mask,
            }),
            None => None,
        };
        let vars = self.forward_embeddings(&mut tape, dec, enc.as_ref(), opts)?;
        Ok(ForwardTrace {
            logits: tape.value(vars.logits).clone(),
            self_attention: vars.self_attention,
            cross_attention: vars.cross_attention,
            mlp_outputs: vars.mlp_outputs,
            encoder_output: vars.encoder_output,
        })
    }
}
