// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-step scalar functions of the next-token distribution.
//!
//! Every function is recorded on a [`Tape`], so the same definition serves
//! as a diagnostic score and as a differentiable attribution target.
//! Logarithms are natural throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::generation::StepContext;
use crate::model::{EncoderInput, ForwardOptions, ForwardVars, ModelBundle, TokenId, BOS_ID};
use crate::rng::derive_seed;

pub const BUILTIN_NAMES: [&str; 8] = [
    "probability",
    "log_probability",
    "entropy",
    "crossentropy",
    "perplexity",
    "logit",
    "contrast_prob_diff",
    "mc_dropout_prob",
];

/// Identifier plus parameters of a step function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScoreSpec {
    pub id: String,
    /// Stochastic passes for `mc_dropout_prob`.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Dropout probability for `mc_dropout_prob`.
    #[serde(default = "default_mc_p")]
    pub mc_p: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mc_samples() -> usize {
    10
}

fn default_mc_p() -> f64 {
    0.1
}

impl StepScoreSpec {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            mc_samples: default_mc_samples(),
            mc_p: default_mc_p(),
            seed: 0,
        }
    }

    pub fn mc_dropout(samples: usize, p: f64, seed: u64) -> Self {
        Self {
            id: "mc_dropout_prob".into(),
            mc_samples: samples,
            mc_p: p,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.id == "mc_dropout_prob" {
            if self.mc_samples == 0 {
                return Err(Error::StepFunction("mc_dropout_prob needs at least one sample".into()));
            }
            if !(0.0..1.0).contains(&self.mc_p) {
                return Err(Error::StepFunction(format!("dropout p = {} outside [0, 1)", self.mc_p)));
            }
        }
        Ok(())
    }
}

/// Token arguments of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepArgs {
    pub target: TokenId,
    pub contrast: Option<TokenId>,
}

/// Something that can record a forward pass and hand back next-token logits.
pub trait LogitSource {
    /// Records one pass. `dropout` is `(p, seed)` for a stochastic pass.
    /// Returns logits of shape `[vocab]`.
    fn logits(&mut self, tape: &mut Tape, dropout: Option<(f64, u64)>) -> Result<Var>;
}

/// A custom step function over the logits `[vocab]` of a single pass.
pub type CustomStepFn = Arc<dyn Fn(&mut Tape, Var, &StepArgs) -> Result<Var> + Send + Sync>;

#[derive(Clone, Default)]
pub struct StepRegistry {
    custom: BTreeMap<String, CustomStepFn>,
}

impl fmt::Debug for StepRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StepRegistry")
            .field("custom", &self.custom.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl StepRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, f: CustomStepFn) -> Result<()> {
        if BUILTIN_NAMES.contains(&name) || self.custom.contains_key(name) {
            return Err(Error::StepFunction(format!("step function {name:?} is already registered")));
        }
        self.custom.insert(name.to_string(), f);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        BUILTIN_NAMES.contains(&name) || self.custom.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        BUILTIN_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(self.custom.keys().cloned())
            .collect()
    }

    /// Fails for unknown names or bad parameters.
    pub fn check(&self, spec: &StepScoreSpec) -> Result<()> {
        if !self.contains(&spec.id) {
            return Err(Error::StepFunction(format!("unknown step function {:?}", spec.id)));
        }
        spec.validate()
    }

    /// True when the function consumes a contrast token.
    pub fn needs_contrast(spec: &StepScoreSpec) -> bool {
        spec.id == "contrast_prob_diff"
    }

    /// Number of forward passes one evaluation records.
    pub fn passes(spec: &StepScoreSpec) -> usize {
        if spec.id == "mc_dropout_prob" && spec.mc_p > 0.0 {
            spec.mc_samples
        } else {
            1
        }
    }

    /// Records `spec` on `tape` and returns the scalar result.
    pub fn record(&self, tape: &mut Tape, source: &mut dyn LogitSource, spec: &StepScoreSpec, args: &StepArgs) -> Result<Var> {
        self.check(spec)?;
        if let Some(f) = self.custom.get(&spec.id) {
            let logits = source.logits(tape, None)?;
            let out = f(tape, logits, args)?;
            if tape.value(out).numel() != 1 {
                return Err(Error::StepFunction(format!("custom step function {:?} returned a non-scalar", spec.id)));
            }
            return Ok(out);
        }
        if spec.id == "mc_dropout_prob" {
            if spec.mc_p == 0.0 {
                let logits = source.logits(tape, None)?;
                return probability(tape, logits, args.target);
            }
            let mut terms = Vec::with_capacity(spec.mc_samples);
            for i in 0..spec.mc_samples {
                let logits = source.logits(tape, Some((spec.mc_p, derive_seed(spec.seed, i as u64))))?;
                let p = probability(tape, logits, args.target)?;
                terms.push(tape.reshape(p, &[1])?);
            }
            let stacked = tape.concat(&terms, 0)?;
            return tape.mean(stacked, 0);
        }
        let logits = source.logits(tape, None)?;
        match spec.id.as_str() {
            "probability" => probability(tape, logits, args.target),
            "log_probability" => log_probability(tape, logits, args.target),
            "crossentropy" => {
                let lp = log_probability(tape, logits, args.target)?;
                tape.scale(lp, -1.0)
            }
            "perplexity" => {
                let lp = log_probability(tape, logits, args.target)?;
                let ce = tape.scale(lp, -1.0)?;
                tape.exp(ce)
            }
            "entropy" => entropy(tape, logits),
            "logit" => pick(tape, logits, args.target),
            "contrast_prob_diff" => {
                let contrast = args.contrast.ok_or_else(|| {
                    Error::StepFunction("contrast_prob_diff needs a contrast target".into())
                })?;
                let p = probability(tape, logits, args.target)?;
                let q = probability(tape, logits, contrast)?;
                tape.sub(p, q)
            }
            other => unreachable!("unhandled builtin {other}"),
        }
    }

    /// Evaluates a step function for a decoded step without gradients.
    pub fn evaluate(&self, model: &ModelBundle, ctx: &StepContext, spec: &StepScoreSpec, contrast: Option<TokenId>) -> Result<f64> {
        let mut tape = Tape::new();
        let args = StepArgs {
            target: ctx.target,
            contrast,
        };
        let value = if spec.id != "mc_dropout_prob" || spec.mc_p == 0.0 {
            // Single deterministic pass: reuse the decoded logits.
            let mut cached = CachedLogits(ctx.trace.logits());
            self.record(&mut tape, &mut cached, spec, &args)?
        } else {
            let mut src = EmbeddedStep::constant(&mut tape, model, &ctx.source, &ctx.prefix)?;
            self.record(&mut tape, &mut src, spec, &args)?
        };
        tape.value(value).item()
    }
}

/// Logits already computed by the decoder.
struct CachedLogits<'a>(&'a [f64]);

impl LogitSource for CachedLogits<'_> {
    fn logits(&mut self, tape: &mut Tape, dropout: Option<(f64, u64)>) -> Result<Var> {
        debug_assert!(dropout.is_none());
        Ok(tape.constant(Tensor::from_parts(vec![self.0.len()], self.0.to_vec())))
    }
}

fn pick(tape: &mut Tape, logits: Var, id: TokenId) -> Result<Var> {
    let n = tape.shape(logits)[0];
    let i = id as usize;
    if i >= n {
        return Err(Error::Input(format!("token id {id} outside vocabulary of {n}")));
    }
    let s = tape.slice(logits, 0, i, i + 1)?;
    tape.sum_all(s)
}

fn probability(tape: &mut Tape, logits: Var, id: TokenId) -> Result<Var> {
    let p = tape.softmax(logits, 0)?;
    pick(tape, p, id)
}

/// Logits shifted by their (constant) maximum and the log-partition of the
/// shifted values.
fn shifted_log_partition(tape: &mut Tape, logits: Var) -> Result<(Var, Var)> {
    let max = tape.value(logits).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = tape.constant(Tensor::scalar(max));
    let shifted = tape.sub(logits, c)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum_all(e)?;
    let lse = tape.ln(z)?;
    Ok((shifted, lse))
}

fn log_probability(tape: &mut Tape, logits: Var, id: TokenId) -> Result<Var> {
    let (shifted, lse) = shifted_log_partition(tape, logits)?;
    let s = pick(tape, shifted, id)?;
    tape.sub(s, lse)
}

/// `H = lse - Σ p·shifted`, which equals `-Σ p ln p` without evaluating
/// `ln 0`.
fn entropy(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (shifted, lse) = shifted_log_partition(tape, logits)?;
    let p = tape.softmax(logits, 0)?;
    let ps = tape.mul(p, shifted)?;
    let expectation = tape.sum_all(ps)?;
    tape.sub(lse, expectation)
}

/// `exp(mean step cross-entropy)`.
pub fn sequence_perplexity(step_crossentropy: &[f64]) -> Option<f64> {
    if step_crossentropy.is_empty() {
        return None;
    }
    Some((step_crossentropy.iter().sum::<f64>() / step_crossentropy.len() as f64).exp())
}

/// Runs the model from (possibly differentiable) embedding variables.
///
/// For encoder-decoder models `source` feeds the encoder and the decoder
/// reads `<s>` followed by `prefix`. For decoder-only models the decoder
/// reads `source` followed by `prefix`.
pub struct EmbeddedStep<'m> {
    pub model: &'m ModelBundle,
    pub source: Var,
    pub prefix: Option<Var>,
    pub hook_layer: Option<usize>,
    /// Variable substituted for the hooked activation.
    pub hook_override: Option<Var>,
    /// Vars of the most recent pass.
    pub last: Option<ForwardVars>,
    bos: Option<Var>,
    position: usize,
}

impl<'m> EmbeddedStep<'m> {
    pub fn new(tape: &mut Tape, model: &'m ModelBundle, source: Var, prefix: Option<Var>) -> Result<Self> {
        let source_len = tape.shape(source)[0];
        let prefix_len = prefix.map_or(0, |p| tape.shape(p)[0]);
        let bos = if model.is_encoder_decoder() {
            Some(tape.constant(model.token_embeddings(&[BOS_ID])?))
        } else {
            None
        };
        let position = crate::generation::current_position(model, source_len, prefix_len);
        Ok(Self {
            model,
            source,
            prefix,
            hook_layer: None,
            hook_override: None,
            last: None,
            bos,
            position,
        })
    }

    /// Non-differentiable embeddings of the given ids.
    pub fn constant(tape: &mut Tape, model: &'m ModelBundle, source: &[TokenId], prefix: &[TokenId]) -> Result<Self> {
        let s = tape.constant(model.token_embeddings(source)?);
        let p = if prefix.is_empty() {
            None
        } else {
            Some(tape.constant(model.token_embeddings(prefix)?))
        };
        Self::new(tape, model, s, p)
    }
}

impl LogitSource for EmbeddedStep<'_> {
    fn logits(&mut self, tape: &mut Tape, dropout: Option<(f64, u64)>) -> Result<Var> {
        let opts = ForwardOptions {
            train_mode: dropout.is_some(),
            dropout_p: dropout.map(|d| d.0),
            dropout_seed: dropout.map_or(0, |d| d.1),
            hook_layer: self.hook_layer,
            hook_override: self.hook_override,
        };
        let vars = match self.bos {
            Some(bos) => {
                let dec = match self.prefix {
                    Some(p) => tape.concat(&[bos, p], 0)?,
                    None => bos,
                };
                let enc = EncoderInput {
                    embeds: self.source,
                    key_mask: None,
                };
                self.model.forward_embeddings(tape, dec, Some(&enc), &opts)?
            }
            None => {
                let dec = match self.prefix {
                    Some(p) => tape.concat(&[self.source, p], 0)?,
                    None => self.source,
                };
                self.model.forward_embeddings(tape, dec, None, &opts)?
            }
        };
        let row = tape.slice(vars.logits, 0, self.position, self.position + 1)?;
        let vocab = self.model.config().vocab_size;
        let out = tape.reshape(row, &[vocab])?;
        self.last = Some(vars);
        Ok(out)
    }
}
