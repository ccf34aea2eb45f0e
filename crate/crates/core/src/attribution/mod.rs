// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribution methods and the sequential attribution loop.
//!
//! Every attributed generation step contributes one column. Source rows are
//! the source tokens; target rows are generated tokens, and a target cell
//! `(t, column)` is filled only when token `t` precedes the column's step.
//! Gradient methods keep one value per embedding dimension; the others give
//! one value per token.

mod gradient;
mod model_target;
mod perturbation;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradient::{
    gradient, gradient_shap, input_x_gradient, integrated_gradients, DifferentiableTarget, IgConfig, IgResult,
    IG_TOLERANCE,
};
pub use model_target::{
    attention_scores, layer_gradient_x_activation, EmbeddingTarget, HeadAggregation, LayerTarget, StepProblem,
    TargetLayer, TokenScorer,
};
pub use perturbation::{
    fit_weighted_ridge, kernel_weight, lime, mask_distance, occlusion, sample_masks, LimeConfig, LimeResult,
    MaskedScorer, LIME_CONDITION_WARNING,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::generation::{decode_request, encode_target, DecodedSequence, GenerationRequest, StepContext};
use crate::model::{ModelBundle, TokenId, PAD_ID};
use crate::rng::derive_seed;
use crate::step_scores::{sequence_perplexity, StepRegistry, StepScoreSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Gradient,
    InputXGradient,
    IntegratedGradients,
    GradientShap,
    Occlusion,
    Lime,
    Attention,
    LayerGradientXActivation,
}

impl MethodId {
    pub const ALL: [MethodId; 8] = [
        MethodId::Gradient,
        MethodId::InputXGradient,
        MethodId::IntegratedGradients,
        MethodId::GradientShap,
        MethodId::Occlusion,
        MethodId::Lime,
        MethodId::Attention,
        MethodId::LayerGradientXActivation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Gradient => "gradient",
            MethodId::InputXGradient => "input_x_gradient",
            MethodId::IntegratedGradients => "integrated_gradients",
            MethodId::GradientShap => "gradient_shap",
            MethodId::Occlusion => "occlusion",
            MethodId::Lime => "lime",
            MethodId::Attention => "attention",
            MethodId::LayerGradientXActivation => "layer_gradient_x_activation",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == name)
            .ok_or_else(|| Error::Method(format!("unknown attribution method {name:?}")))
    }

    /// True for methods that emit one score per embedding dimension.
    pub fn is_per_dim(self) -> bool {
        matches!(
            self,
            MethodId::Gradient | MethodId::InputXGradient | MethodId::IntegratedGradients | MethodId::GradientShap
        )
    }

    /// True for methods that accept an intermediate target layer.
    pub fn supports_layer(self) -> bool {
        matches!(
            self,
            MethodId::Gradient
                | MethodId::InputXGradient
                | MethodId::IntegratedGradients
                | MethodId::Attention
                | MethodId::LayerGradientXActivation
        )
    }
}

/// A method and all of its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub id: MethodId,
    pub attributed_fn: StepScoreSpec,
    pub attribute_target: bool,
    pub n_steps: usize,
    pub internal_batch_size: usize,
    /// Cap for integrated-gradients step doubling.
    pub ig_max_steps: usize,
    pub n_samples: usize,
    pub noise_std: f64,
    pub kernel_width: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
    pub baseline_token: TokenId,
    pub target_layer: Option<TargetLayer>,
    /// Layers averaged by the attention method; all layers when absent.
    pub attention_layers: Option<Vec<usize>>,
    pub head_aggregation: HeadAggregation,
}

impl MethodSpec {
    pub fn new(id: MethodId) -> Self {
        Self {
            id,
            attributed_fn: StepScoreSpec::new("probability"),
            attribute_target: false,
            n_steps: 50,
            internal_batch_size: 50,
            ig_max_steps: 1600,
            n_samples: if id == MethodId::Lime { 1000 } else { 50 },
            noise_std: 0.0,
            kernel_width: 1.0,
            ridge_lambda: 1e-3,
            seed: 0,
            baseline_token: PAD_ID,
            target_layer: None,
            attention_layers: None,
            head_aggregation: HeadAggregation::Mean,
        }
    }

    pub fn validate(&self, model: &ModelBundle, registry: &StepRegistry) -> Result<()> {
        let cfg = model.config();
        registry.check(&self.attributed_fn)?;
        if self.n_steps == 0 || self.internal_batch_size == 0 || self.n_samples == 0 {
            return Err(Error::Method("n_steps, internal_batch_size and n_samples must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Method(format!("noise_std {} must be non-negative", self.noise_std)));
        }
        if !(self.ridge_lambda > 0.0) || !(self.kernel_width > 0.0) {
            return Err(Error::Method("ridge_lambda and kernel_width must be positive".into()));
        }
        if self.baseline_token as usize >= cfg.vocab_size {
            return Err(Error::Method(format!("baseline token {} outside vocabulary", self.baseline_token)));
        }
        match (self.target_layer, self.id.supports_layer()) {
            (Some(_), false) => {
                return Err(Error::Method(format!(
                    "{} does not support a target layer",
                    self.id.as_str()
                )))
            }
            (Some(TargetLayer::Block(l)), true) if l >= cfg.n_layers_dec => {
                return Err(Error::Method(format!(
                    "target layer {l} out of range for {} decoder layers",
                    cfg.n_layers_dec
                )))
            }
            (None, _) if self.id == MethodId::LayerGradientXActivation => {
                return Err(Error::Method("layer_gradient_x_activation needs a target layer".into()))
            }
            (Some(TargetLayer::Block(_)), _) if model.is_encoder_decoder() && self.id != MethodId::Attention => {
                return Err(Error::Method(
                    "decoder block attribution is only available for decoder-only models".into(),
                ))
            }
            _ => {}
        }
        if self.id == MethodId::Attention {
            for &l in self.attention_layers.iter().flatten() {
                if l >= cfg.n_layers_dec {
                    return Err(Error::Method(format!("attention layer {l} out of range")));
                }
            }
            if let HeadAggregation::Single(h) = self.head_aggregation {
                if h >= cfg.n_heads {
                    return Err(Error::Method(format!("head {h} out of range for {} heads", cfg.n_heads)));
                }
            }
        }
        Ok(())
    }

    fn ig_config(&self) -> IgConfig {
        IgConfig {
            n_steps: self.n_steps,
            internal_batch_size: self.internal_batch_size,
            max_steps: self.ig_max_steps,
        }
    }
}

/// Attribution of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAttribution {
    pub source_tokens: Vec<String>,
    pub source_ids: Vec<TokenId>,
    /// Generated tokens; rows of `target_attr`.
    pub target_tokens: Vec<String>,
    pub target_ids: Vec<TokenId>,
    /// Generated-token index of the first piece of each target row.
    pub target_offsets: Vec<usize>,
    /// Generated-token index attributed by each column.
    pub step_indices: Vec<usize>,
    /// Token predicted at each column.
    pub step_tokens: Vec<String>,
    /// `[source rows × columns]` or `[source rows × columns × d_model]`.
    pub source_attr: Tensor,
    pub target_attr: Option<Tensor>,
    pub step_scores: BTreeMap<String, Vec<f64>>,
    pub ig_convergence_delta: Option<Vec<f64>>,
    pub ig_n_steps: Option<Vec<usize>>,
    pub forced: bool,
    pub diverged: bool,
    /// `exp` of the mean cross-entropy over every generated token.
    pub sequence_perplexity: Option<f64>,
}

impl SequenceAttribution {
    pub fn is_per_dim(&self) -> bool {
        self.source_attr.rank() == 3
    }

    pub fn n_columns(&self) -> usize {
        self.step_indices.len()
    }

    /// Whether target cell `(row, column)` holds an attribution.
    pub fn target_cell_populated(&self, row: usize, column: usize) -> bool {
        self.target_offsets[row] < self.step_indices[column]
    }

    /// Number of populated `(row, column)` target cells.
    pub fn populated_target_cells(&self) -> usize {
        if self.target_attr.is_none() {
            return 0;
        }
        (0..self.target_offsets.len())
            .flat_map(|r| (0..self.n_columns()).map(move |c| (r, c)))
            .filter(|&(r, c)| self.target_cell_populated(r, c))
            .count()
    }
}

/// Request-level inputs of [`attribute`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRequest {
    pub inputs: Vec<String>,
    pub forced_targets: Option<Vec<String>>,
    /// Contrast continuations for `contrast_prob_diff`, aligned with inputs.
    pub contrast_targets: Option<Vec<String>>,
    pub max_new_tokens: usize,
    pub span: Option<(usize, usize)>,
    pub step_scores: Vec<StepScoreSpec>,
    /// Rows decoded together; all rows at once when absent.
    pub batch_size: Option<usize>,
}

impl AttributionRequest {
    pub fn new(inputs: Vec<String>) -> Self {
        Self {
            inputs,
            forced_targets: None,
            contrast_targets: None,
            max_new_tokens: 16,
            span: None,
            step_scores: Vec::new(),
            batch_size: None,
        }
    }

    fn generation(&self, range: std::ops::Range<usize>) -> GenerationRequest {
        GenerationRequest {
            inputs: self.inputs[range.clone()].to_vec(),
            forced_targets: self.forced_targets.as_ref().map(|t| t[range].to_vec()),
            max_new_tokens: self.max_new_tokens,
            span: self.span,
        }
    }
}

/// Provenance of an attribution run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMetadata {
    pub model_name: String,
    pub model_sha256: String,
    pub method: MethodSpec,
    pub request: AttributionRequest,
    pub seed: u64,
    pub engine_version: String,
    pub batch_size: usize,
    pub forced_decoding: bool,
    /// Aggregators applied after attribution, in order.
    pub aggregation: Vec<String>,
    /// Largest integrated-gradients completeness gap over all steps.
    pub ig_max_delta: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttributionOutput {
    pub metadata: AttributionMetadata,
    pub sequences: Vec<SequenceAttribution>,
}

/// Scores of one step before assembly.
struct StepResult {
    /// `[src_len (× d)]` flattened.
    source: Vec<f64>,
    /// `[prefix_len (× d)]` flattened.
    prefix: Option<Vec<f64>>,
    ig_delta: Option<f64>,
    ig_steps: Option<usize>,
}

fn flat(t: Tensor) -> Vec<f64> {
    t.into_data()
}

fn attribute_step(
    model: &ModelBundle,
    registry: &StepRegistry,
    method: &MethodSpec,
    ctx: &StepContext,
    contrast: Option<TokenId>,
) -> Result<StepResult> {
    let problem = StepProblem::from_context(model, registry, &method.attributed_fn, ctx, contrast, method.attribute_target);
    let layer = match method.target_layer {
        Some(TargetLayer::Block(l)) => Some(l),
        _ => None,
    };
    let seed = derive_seed(method.seed, ctx.step as u64);
    let split_inputs = |mut v: Vec<Tensor>| -> StepResult {
        let prefix = (v.len() > 1).then(|| flat(v.pop().unwrap()));
        StepResult {
            source: flat(v.pop().unwrap()),
            prefix,
            ig_delta: None,
            ig_steps: None,
        }
    };
    let split_layer = |t: Tensor| -> Result<StepResult> {
        let (s, p) = model_target::split_decoder_rows(&problem, t)?;
        Ok(StepResult {
            source: flat(s),
            prefix: p.map(flat),
            ig_delta: None,
            ig_steps: None,
        })
    };
    match method.id {
        MethodId::Gradient | MethodId::InputXGradient => {
            let times_input = method.id == MethodId::InputXGradient;
            match layer {
                None => {
                    let target = EmbeddingTarget(problem);
                    let x = problem.embeddings()?;
                    let g = if times_input { input_x_gradient(&target, &x)? } else { gradient(&target, &x)? };
                    Ok(split_inputs(g))
                }
                Some(l) => {
                    let target = LayerTarget { problem, layer: l };
                    let x = vec![target.activation()?];
                    let mut g = if times_input { input_x_gradient(&target, &x)? } else { gradient(&target, &x)? };
                    split_layer(g.remove(0))
                }
            }
        }
        MethodId::IntegratedGradients => {
            let result = match layer {
                None => {
                    let target = EmbeddingTarget(problem);
                    let x = problem.embeddings()?;
                    let b = problem.baseline_embeddings(method.baseline_token)?;
                    let r = integrated_gradients(&target, &x, &b, method.ig_config())?;
                    (split_inputs(r.attributions), r.delta, r.n_steps)
                }
                Some(l) => {
                    let target = LayerTarget { problem, layer: l };
                    let x = vec![target.activation()?];
                    let b = vec![Tensor::zeros(x[0].shape())];
                    let mut r = integrated_gradients(&target, &x, &b, method.ig_config())?;
                    (split_layer(r.attributions.remove(0))?, r.delta, r.n_steps)
                }
            };
            let (mut step, delta, n) = result;
            step.ig_delta = Some(delta);
            step.ig_steps = Some(n);
            Ok(step)
        }
        MethodId::GradientShap => {
            let target = EmbeddingTarget(problem);
            let x = problem.embeddings()?;
            let b = problem.baseline_embeddings(method.baseline_token)?;
            Ok(split_inputs(gradient_shap(&target, &x, &b, method.n_samples, method.noise_std, seed)?))
        }
        MethodId::Occlusion | MethodId::Lime => {
            let scorer = TokenScorer {
                problem,
                baseline: method.baseline_token,
            };
            let scores = if method.id == MethodId::Occlusion {
                occlusion(&scorer)?
            } else {
                let cfg = LimeConfig {
                    n_samples: method.n_samples,
                    kernel_width: method.kernel_width,
                    ridge_lambda: method.ridge_lambda,
                    seed,
                };
                lime(&scorer, cfg)?.coefficients
            };
            let n = ctx.source.len();
            Ok(StepResult {
                source: scores[..n].to_vec(),
                prefix: (scores.len() > n).then(|| scores[n..].to_vec()),
                ig_delta: None,
                ig_steps: None,
            })
        }
        MethodId::Attention => {
            let layers: Vec<usize> = match (&method.attention_layers, method.target_layer) {
                (Some(ls), _) => ls.clone(),
                (None, Some(TargetLayer::Block(l))) => vec![l],
                _ => (0..model.config().n_layers_dec).collect(),
            };
            let (source, prefix) = attention_scores(model, ctx, &layers, method.head_aggregation)?;
            Ok(StepResult {
                source,
                prefix: (method.attribute_target && !prefix.is_empty()).then_some(prefix),
                ig_delta: None,
                ig_steps: None,
            })
        }
        MethodId::LayerGradientXActivation => {
            let layer = method.target_layer.expect("validated");
            let (source, prefix) = layer_gradient_x_activation(&problem, layer)?;
            Ok(StepResult {
                source,
                prefix,
                ig_delta: None,
                ig_steps: None,
            })
        }
    }
}

/// Contrast ids aligned with the generated tokens of a sequence.
fn contrast_ids(model: &ModelBundle, text: Option<&String>, generated: usize) -> Result<Option<Vec<TokenId>>> {
    let Some(text) = text else { return Ok(None) };
    let ids = encode_target(model, text)?;
    if ids.len() != generated {
        return Err(Error::Alignment(format!(
            "contrast target {text:?} has {} tokens, target has {generated}",
            ids.len()
        )));
    }
    Ok(Some(ids))
}

fn attribute_sequence(
    model: &ModelBundle,
    registry: &StepRegistry,
    method: &MethodSpec,
    request: &AttributionRequest,
    decoded: &DecodedSequence,
    contrast_text: Option<&String>,
) -> Result<SequenceAttribution> {
    let contrast = contrast_ids(model, contrast_text, decoded.generated.len())?;
    let needs_contrast = StepRegistry::needs_contrast(&method.attributed_fn)
        || request.step_scores.iter().any(StepRegistry::needs_contrast);
    if needs_contrast && contrast.is_none() {
        return Err(Error::Alignment("contrast_prob_diff requires contrast targets".into()));
    }
    let contexts = decoded.step_contexts(request.span)?;
    let d = model.config().d_model;
    let per_dim = method.id.is_per_dim();
    let width = if per_dim { d } else { 1 };
    let (src_len, tgt_len, cols) = (decoded.source.len(), decoded.generated.len(), contexts.len());

    let mut source = vec![0.0; src_len * cols * width];
    let mut target = method.attribute_target.then(|| vec![0.0; tgt_len * cols * width]);
    let mut deltas = Vec::new();
    let mut ig_steps = Vec::new();
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for (col, ctx) in contexts.iter().enumerate() {
        let c = contrast.as_ref().map(|ids| ids[ctx.step]);
        let step = attribute_step(model, registry, method, ctx, c).map_err(|e| Error::at_step(ctx.step, e))?;
        for i in 0..src_len {
            let dst = (i * cols + col) * width;
            source[dst..dst + width].copy_from_slice(&step.source[i * width..(i + 1) * width]);
        }
        if let (Some(t), Some(p)) = (target.as_mut(), step.prefix.as_ref()) {
            for row in 0..ctx.prefix.len() {
                let dst = (row * cols + col) * width;
                t[dst..dst + width].copy_from_slice(&p[row * width..(row + 1) * width]);
            }
        }
        deltas.extend(step.ig_delta);
        ig_steps.extend(step.ig_steps);
        for spec in &request.step_scores {
            let v = registry.evaluate(model, ctx, spec, c).map_err(|e| Error::at_step(ctx.step, e))?;
            scores.entry(spec.id.clone()).or_default().push(v);
        }
    }

    let shape = |rows: usize| if per_dim { vec![rows, cols, d] } else { vec![rows, cols] };
    let ce_spec = StepScoreSpec::new("crossentropy");
    let ce = decoded
        .step_contexts(None)?
        .iter()
        .map(|ctx| registry.evaluate(model, ctx, &ce_spec, None))
        .collect::<Result<Vec<_>>>()?;
    let tok = model.tokenizer();
    Ok(SequenceAttribution {
        source_tokens: tok.id_pieces(&decoded.source),
        source_ids: decoded.source.clone(),
        target_tokens: tok.id_pieces(&decoded.generated),
        target_ids: decoded.generated.clone(),
        target_offsets: (0..tgt_len).collect(),
        step_indices: contexts.iter().map(|c| c.step).collect(),
        step_tokens: contexts.iter().map(|c| tok.piece(c.target).to_string()).collect(),
        source_attr: Tensor::new(shape(src_len), source)?,
        target_attr: target.map(|t| Tensor::new(shape(tgt_len), t)).transpose()?,
        step_scores: scores,
        ig_convergence_delta: (method.id == MethodId::IntegratedGradients).then_some(deltas),
        ig_n_steps: (method.id == MethodId::IntegratedGradients).then_some(ig_steps),
        forced: decoded.forced,
        diverged: decoded.diverged,
        sequence_perplexity: sequence_perplexity(&ce),
    })
}

/// Decodes (freely or forced) and attributes every requested step of every
/// input. Sequences are processed in parallel; output order follows input
/// order.
pub fn attribute(
    model: &ModelBundle,
    request: &AttributionRequest,
    method: &MethodSpec,
    registry: &StepRegistry,
) -> Result<FeatureAttributionOutput> {
    method.validate(model, registry)?;
    for spec in &request.step_scores {
        registry.check(spec)?;
    }
    if request.inputs.is_empty() {
        return Err(Error::Input("no inputs to attribute".into()));
    }
    for (name, list) in [("forced", &request.forced_targets), ("contrast", &request.contrast_targets)] {
        if let Some(list) = list {
            if list.len() != request.inputs.len() {
                return Err(Error::Alignment(format!(
                    "{} {name} targets for {} inputs",
                    list.len(),
                    request.inputs.len()
                )));
            }
        }
    }
    let n = request.inputs.len();
    let batch_size = request.batch_size.unwrap_or(n).max(1);
    let mut decoded = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        decoded.extend(decode_request(model, &request.generation(start..end))?);
    }
    let sequences = decoded
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let contrast = request.contrast_targets.as_ref().map(|c| &c[i]);
            attribute_sequence(model, registry, method, request, d, contrast)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        if s.diverged {
            warnings.push(format!("sequence {i}: forced target differs from the greedy continuation"));
        }
    }
    let ig_max_delta = sequences
        .iter()
        .flat_map(|s| s.ig_convergence_delta.iter().flatten())
        .copied()
        .reduce(f64::max);
    if let Some(delta) = ig_max_delta.filter(|&d| d >= IG_TOLERANCE) {
        warnings.push(format!("integrated gradients did not converge: max delta {delta:.4}"));
    }
    Ok(FeatureAttributionOutput {
        metadata: AttributionMetadata {
            model_name: model.name().to_string(),
            model_sha256: model.weights().payload_sha256(),
            method: method.clone(),
            request: request.clone(),
            seed: method.seed,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
            batch_size,
            forced_decoding: request.forced_targets.is_some(),
            aggregation: Vec::new(),
            ig_max_delta,
            warnings,
        },
        sequences,
    })
}

#[cfg(test)]
mod tests;
