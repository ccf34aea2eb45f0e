// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adapters that expose one generation step of a model to the generic
//! gradient and perturbation methods.

use serde::{Deserialize, Serialize};

use super::gradient::DifferentiableTarget;
use super::perturbation::MaskedScorer;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::generation::{model_inputs, StepContext};
use crate::model::{ModelBundle, TokenId};
use crate::step_scores::{EmbeddedStep, StepArgs, StepRegistry, StepScoreSpec};

/// Where a layer-aware method reads activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLayer {
    /// Token embeddings, before positions are added.
    Embedding,
    /// Output of the MLP of decoder block `l`.
    Block(usize),
}

/// The scalar attributed at one step, as a function of the step's inputs.
#[derive(Clone, Copy)]
pub struct StepProblem<'a> {
    pub model: &'a ModelBundle,
    pub registry: &'a StepRegistry,
    pub spec: &'a StepScoreSpec,
    pub args: StepArgs,
    pub source: &'a [TokenId],
    pub prefix: &'a [TokenId],
    /// Include the generated prefix among the attributed inputs.
    pub attribute_target: bool,
}

impl<'a> StepProblem<'a> {
    pub fn from_context(
        model: &'a ModelBundle,
        registry: &'a StepRegistry,
        spec: &'a StepScoreSpec,
        ctx: &'a StepContext,
        contrast: Option<TokenId>,
        attribute_target: bool,
    ) -> Self {
        Self {
            model,
            registry,
            spec,
            args: StepArgs {
                target: ctx.target,
                contrast,
            },
            source: &ctx.source,
            prefix: &ctx.prefix,
            attribute_target,
        }
    }

    fn prefix_attributed(&self) -> bool {
        self.attribute_target && !self.prefix.is_empty()
    }

    /// Input embedding tensors: source, then the prefix when attributed.
    pub fn embeddings(&self) -> Result<Vec<Tensor>> {
        let mut out = vec![self.model.token_embeddings(self.source)?];
        if self.prefix_attributed() {
            out.push(self.model.token_embeddings(self.prefix)?);
        }
        Ok(out)
    }

    /// Embeddings with every attributed token replaced by `baseline`.
    pub fn baseline_embeddings(&self, baseline: TokenId) -> Result<Vec<Tensor>> {
        let mut out = vec![self.model.token_embeddings(&vec![baseline; self.source.len()])?];
        if self.prefix_attributed() {
            out.push(self.model.token_embeddings(&vec![baseline; self.prefix.len()])?);
        }
        Ok(out)
    }

    fn record_from_embeddings(&self, tape: &mut Tape, inputs: &[Tensor], grad: bool) -> Result<(Var, Vec<Var>)> {
        let source = tape.leaf(inputs[0].clone(), grad);
        let mut leaves = vec![source];
        let prefix = if self.prefix_attributed() {
            let p = tape.leaf(inputs[1].clone(), grad);
            leaves.push(p);
            Some(p)
        } else if self.prefix.is_empty() {
            None
        } else {
            Some(tape.constant(self.model.token_embeddings(self.prefix)?))
        };
        let mut step = EmbeddedStep::new(tape, self.model, source, prefix)?;
        let root = self.registry.record(tape, &mut step, self.spec, &self.args)?;
        Ok((root, leaves))
    }

    /// Scores the step with the given token ids in place of the originals.
    pub fn score_ids(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut step = EmbeddedStep::constant(&mut tape, self.model, source, prefix)?;
        let root = self.registry.record(&mut tape, &mut step, self.spec, &self.args)?;
        tape.value(root).item()
    }

    /// Decoder rows of the model input: `(source rows, prefix rows)` as
    /// ranges of decoder positions, for decoder-only models.
    fn decoder_split(&self) -> Result<(usize, usize)> {
        if self.model.is_encoder_decoder() {
            return Err(Error::Method(
                "decoder block activations cannot be mapped to source tokens of an encoder-decoder model".into(),
            ));
        }
        Ok((self.source.len(), self.prefix.len()))
    }
}

fn grads_or_zeros(tape: &Tape, leaves: &[Var]) -> Vec<Tensor> {
    leaves
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect()
}

/// The step function as a function of input token embeddings.
pub struct EmbeddingTarget<'a>(pub StepProblem<'a>);

impl DifferentiableTarget for EmbeddingTarget<'_> {
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let (root, _) = self.0.record_from_embeddings(&mut tape, inputs, false)?;
        tape.value(root).item()
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (root, leaves) = self.0.record_from_embeddings(&mut tape, inputs, true)?;
        let value = tape.value(root).item()?;
        self.0.model.backward(&mut tape, root)?;
        Ok((value, grads_or_zeros(&tape, &leaves)))
    }
}

/// The step function as a function of one decoder block's MLP output.
pub struct LayerTarget<'a> {
    pub problem: StepProblem<'a>,
    pub layer: usize,
}

impl LayerTarget<'_> {
    /// The block's actual MLP output `[T × d_model]` for this step.
    pub fn activation(&self) -> Result<Tensor> {
        let p = &self.problem;
        p.decoder_split()?;
        let (dec, _) = model_inputs(p.model, p.source, p.prefix);
        let trace = p.model.forward(&dec, None, false)?;
        trace
            .mlp_outputs
            .into_iter()
            .nth(self.layer)
            .ok_or_else(|| Error::Method(format!("layer {} out of range", self.layer)))
    }

    fn record(&self, tape: &mut Tape, activation: &Tensor, grad: bool) -> Result<(Var, Var)> {
        let p = &self.problem;
        let leaf = tape.leaf(activation.clone(), grad);
        let mut step = EmbeddedStep::constant(tape, p.model, p.source, p.prefix)?;
        step.hook_layer = Some(self.layer);
        step.hook_override = Some(leaf);
        let root = p.registry.record(tape, &mut step, p.spec, &p.args)?;
        Ok((root, leaf))
    }
}

impl DifferentiableTarget for LayerTarget<'_> {
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let (root, _) = self.record(&mut tape, &inputs[0], false)?;
        tape.value(root).item()
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (root, leaf) = self.record(&mut tape, &inputs[0], true)?;
        let value = tape.value(root).item()?;
        self.problem.model.backward(&mut tape, root)?;
        Ok((value, grads_or_zeros(&tape, &[leaf])))
    }
}

/// Splits decoder-row scores of a decoder-only model into source rows and
/// prefix rows.
pub(crate) fn split_decoder_rows(problem: &StepProblem<'_>, rows: Tensor) -> Result<(Tensor, Option<Tensor>)> {
    let (src, pre) = problem.decoder_split()?;
    let shape = rows.shape().to_vec();
    let width: usize = shape[1..].iter().product();
    let data = rows.into_data();
    let mut s_shape = shape.clone();
    s_shape[0] = src;
    let source = Tensor::new(s_shape, data[..src * width].to_vec())?;
    let prefix = if problem.attribute_target && pre > 0 {
        let mut p_shape = shape;
        p_shape[0] = pre;
        Some(Tensor::new(p_shape, data[src * width..(src + pre) * width].to_vec())?)
    } else {
        None
    };
    Ok((source, prefix))
}

/// Sums a `[rows × d]` tensor over its last axis.
pub(crate) fn row_sums(t: &Tensor) -> Vec<f64> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().sum()).collect()
}

/// `Σ_dim a ⊙ ∂f/∂a` per position at `layer`, from exactly one forward and
/// one backward pass. Returns `(source scores, prefix scores)`; prefix
/// scores are present only when the prefix is attributed.
pub fn layer_gradient_x_activation(problem: &StepProblem<'_>, layer: TargetLayer) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    if StepRegistry::passes(problem.spec) != 1 {
        return Err(Error::Method(
            "layer_gradient_x_activation needs a single-pass attributed function".into(),
        ));
    }
    match layer {
        TargetLayer::Embedding => {
            let inputs = problem.embeddings()?;
            let (_, grads) = EmbeddingTarget(*problem).value_and_grad(&inputs)?;
            let mut scores = inputs.iter().zip(&grads).map(|(x, g)| x.mul(g).map(|p| row_sums(&p)));
            let source = scores.next().expect("source input")?;
            let prefix = scores.next().transpose()?;
            Ok((source, prefix))
        }
        TargetLayer::Block(l) => {
            let model = problem.model;
            if l >= model.config().n_layers_dec {
                return Err(Error::Method(format!(
                    "layer {l} out of range for {} decoder layers",
                    model.config().n_layers_dec
                )));
            }
            problem.decoder_split()?;
            let mut tape = Tape::new();
            let mut step = EmbeddedStep::constant(&mut tape, model, problem.source, problem.prefix)?;
            step.hook_layer = Some(l);
            let root = problem.registry.record(&mut tape, &mut step, problem.spec, &problem.args)?;
            let hooked = step.last.as_ref().and_then(|v| v.hooked).expect("hook requested");
            model.backward(&mut tape, root)?;
            let grad = grads_or_zeros(&tape, &[hooked]).remove(0);
            let product = tape.value(hooked).mul(&grad)?;
            let (source, prefix) = split_decoder_rows(problem, product)?;
            Ok((row_sums(&source), prefix.as_ref().map(row_sums)))
        }
    }
}

/// Replaces attributed token positions with a baseline token.
pub struct TokenScorer<'a> {
    pub problem: StepProblem<'a>,
    pub baseline: TokenId,
}

impl TokenScorer<'_> {
    fn n_source(&self) -> usize {
        self.problem.source.len()
    }

    fn token(&self, i: usize) -> TokenId {
        let n = self.n_source();
        if i < n {
            self.problem.source[i]
        } else {
            self.problem.prefix[i - n]
        }
    }
}

impl MaskedScorer for TokenScorer<'_> {
    fn n_positions(&self) -> usize {
        self.n_source() + if self.problem.attribute_target { self.problem.prefix.len() } else { 0 }
    }

    fn score(&self, keep: &[bool]) -> Result<f64> {
        let n = self.n_source();
        let source: Vec<TokenId> = (0..n).map(|i| if keep[i] { self.token(i) } else { self.baseline }).collect();
        let prefix: Vec<TokenId> = (0..self.problem.prefix.len())
            .map(|t| match keep.get(n + t) {
                Some(false) => self.baseline,
                _ => self.problem.prefix[t],
            })
            .collect();
        self.problem.score_ids(&source, &prefix)
    }

    fn is_baseline(&self, i: usize) -> bool {
        self.token(i) == self.baseline
    }
}

/// How attention heads are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
    Single(usize),
}

/// Attention of the current step over source and prefix tokens, averaged
/// over `layers` after combining heads.
pub fn attention_scores(
    model: &ModelBundle,
    ctx: &StepContext,
    layers: &[usize],
    heads: HeadAggregation,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = model.config();
    if layers.is_empty() {
        return Err(Error::Method("attention needs at least one layer".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.n_layers_dec) {
        return Err(Error::Method(format!("attention layer {l} out of range for {} layers", cfg.n_layers_dec)));
    }
    if let HeadAggregation::Single(h) = heads {
        if h >= cfg.n_heads {
            return Err(Error::Method(format!("head {h} out of range for {} heads", cfg.n_heads)));
        }
    }
    let q = ctx.trace.position;
    let combine = |att: &Tensor, keys: std::ops::Range<usize>| -> Vec<f64> {
        keys.map(|k| match heads {
            HeadAggregation::Mean => (0..cfg.n_heads).map(|h| att.at(&[h, q, k])).sum::<f64>() / cfg.n_heads as f64,
            HeadAggregation::Max => (0..cfg.n_heads).map(|h| att.at(&[h, q, k])).fold(f64::NEG_INFINITY, f64::max),
            HeadAggregation::Single(h) => att.at(&[h, q, k]),
        })
        .collect()
    };
    let (src_len, pre_len) = (ctx.source.len(), ctx.prefix.len());
    let mut source = vec![0.0; src_len];
    let mut prefix = vec![0.0; pre_len];
    for &l in layers {
        let (s, p) = if model.is_encoder_decoder() {
            let cross = &ctx.trace.trace.cross_attention[l];
            let own = &ctx.trace.trace.self_attention[l];
            (combine(cross, 0..src_len), combine(own, 1..1 + pre_len))
        } else {
            let own = &ctx.trace.trace.self_attention[l];
            (combine(own, 0..src_len), combine(own, src_len..src_len + pre_len))
        };
        source.iter_mut().zip(s).for_each(|(a, v)| *a += v);
        prefix.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    let n = layers.len() as f64;
    source.iter_mut().for_each(|v| *v /= n);
    prefix.iter_mut().for_each(|v| *v /= n);
    Ok((source, prefix))
}
