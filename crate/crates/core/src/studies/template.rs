// SPDX-License-Identifier: MIT OR Apache-2.0

//! Template-based contrastive bias probing.
//!
//! Each term fills the slot of a template. For every term the study
//! collects the probability of the generated pronoun and the token-level
//! attribution of the pronoun (`x_pron`) and term (`x_occ`) source tokens:
//!
//! * base case: the model's own greedy continuation, ranked against
//!   `|stat − 0.5|`;
//! * swap case: the difference between forced decodings of two contrast
//!   targets (first minus second), ranked against `stat`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kendall::kendall_tau;
use crate::aggregation::{run_pipeline, AggregatorPipeline, AggregatorSpec, NormOrder};
use crate::attribution::{attribute, AttributionRequest, MethodId, MethodSpec, SequenceAttribution};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::generation::{decode_request, GenerationRequest};
use crate::model::{ModelBundle, ModelConfig, Tokenizer, UNK_ID};
use crate::step_scores::{StepRegistry, StepScoreSpec};

pub const SLOT: &str = "{}";
pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStat {
    pub term: String,
    /// Fraction in `[0, 1]`.
    pub statistic: f64,
}

/// Reads `term<TAB>statistic` lines. Blank lines and `#` comments are
/// skipped.
pub fn parse_terms(text: &str) -> Result<Vec<TermStat>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (term, stat) = line
            .split_once('\t')
            .ok_or_else(|| Error::Dataset(format!("line {}: expected term<TAB>statistic", n + 1)))?;
        let statistic: f64 = stat
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("line {}: bad statistic {stat:?}", n + 1)))?;
        if !(0.0..=1.0).contains(&statistic) {
            return Err(Error::Dataset(format!("line {}: statistic {statistic} outside [0, 1]", n + 1)));
        }
        out.push(TermStat {
            term: term.trim().to_string(),
            statistic,
        });
    }
    if out.is_empty() {
        return Err(Error::Dataset("no terms".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateStudySpec {
    /// Text with exactly one `{}` slot.
    pub template: String,
    /// Template word whose first token is `x_pron`.
    pub pronoun: String,
    pub terms: Vec<TermStat>,
    /// Forced targets of the swap case; metrics are `first − second`.
    pub contrast: (String, String),
    pub methods: Vec<MethodId>,
    /// Generated index of the pronoun.
    pub target_step: usize,
    pub seed: u64,
}

impl TemplateStudySpec {
    pub fn new(template: &str, pronoun: &str, terms: Vec<TermStat>, contrast: (&str, &str)) -> Self {
        Self {
            template: template.to_string(),
            pronoun: pronoun.to_string(),
            terms,
            contrast: (contrast.0.to_string(), contrast.1.to_string()),
            methods: vec![MethodId::Gradient, MethodId::IntegratedGradients, MethodId::InputXGradient],
            target_step: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.template.matches(SLOT).count() != 1 {
            return Err(Error::Dataset(format!("template {:?} needs exactly one {SLOT} slot", self.template)));
        }
        if !self.template.split_whitespace().any(|w| w == self.pronoun) {
            return Err(Error::Dataset(format!("pronoun {:?} not in template", self.pronoun)));
        }
        for t in &self.terms {
            if !(0.0..=1.0).contains(&t.statistic) {
                return Err(Error::Dataset(format!("statistic of {:?} outside [0, 1]", t.term)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    Base,
    Swap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Pron,
    Occ,
}

/// Metric values of one term in one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub probability: f64,
    /// Method name → (`x_pron`, `x_occ`) scores.
    pub attributions: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermMetrics {
    pub term: String,
    pub statistic: f64,
    pub base: CaseMetrics,
    pub swap: CaseMetrics,
}

/// One cell of the correlation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    /// `"p"` or a method name.
    pub metric: String,
    pub case: Case,
    pub position: Position,
    /// τ of the raw metric; `None` when undefined (e.g. constant input).
    pub tau: Option<f64>,
    pub p_value: Option<f64>,
    /// τ of `|metric|`.
    pub tau_abs: Option<f64>,
    pub p_value_abs: Option<f64>,
}

impl CorrelationCell {
    pub fn significant(&self) -> bool {
        self.p_value.is_some_and(|p| p < SIGNIFICANCE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateStudyResult {
    pub terms: Vec<TermMetrics>,
    /// Skipped terms and why.
    pub skipped: Vec<(String, String)>,
    /// Rows `p` then each method; per row base/swap × pron/occ.
    pub grid: Vec<CorrelationCell>,
    pub ig_max_delta: Option<f64>,
}

impl TemplateStudyResult {
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for c in &self.grid {
            if !names.contains(&c.metric) {
                names.push(c.metric.clone());
            }
        }
        names
    }

    pub fn cell(&self, metric: &str, case: Case, position: Position) -> Option<&CorrelationCell> {
        self.grid
            .iter()
            .find(|c| c.metric == metric && c.case == case && c.position == position)
    }
}

/// Token index of the first piece of each template word.
fn word_positions(model: &ModelBundle, text: &str) -> Vec<usize> {
    let offset = usize::from(!model.is_encoder_decoder());
    let mut pos = offset;
    text.split_whitespace()
        .map(|w| {
            let here = pos;
            pos += model.tokenizer().pieces(w).len();
            here
        })
        .collect()
}

struct Prepared {
    text: String,
    pron: usize,
    occ: usize,
}

fn prepare(model: &ModelBundle, spec: &TemplateStudySpec, term: &str) -> std::result::Result<Prepared, String> {
    if term.split_whitespace().next().is_none() {
        return Err("empty term".into());
    }
    if model.tokenizer().tokenize(term).contains(&UNK_ID) {
        return Err("term not in vocabulary".into());
    }
    let text = spec.template.replace(SLOT, term);
    let words: Vec<&str> = spec.template.split_whitespace().collect();
    let slot_word = words.iter().position(|w| w.contains(SLOT)).ok_or("slot inside a word")?;
    if words[slot_word] != SLOT {
        return Err("slot must be a whole word".into());
    }
    let pron_word = words.iter().position(|w| *w == spec.pronoun).ok_or("pronoun missing")?;
    // Words after the slot shift by the term's extra words.
    let extra = term.split_whitespace().count() - 1;
    let positions = word_positions(model, &text);
    let pron = positions[if pron_word > slot_word { pron_word + extra } else { pron_word }];
    Ok(Prepared {
        text,
        pron,
        occ: positions[slot_word],
    })
}

fn token_level(method: MethodId) -> AggregatorPipeline {
    if method.is_per_dim() {
        AggregatorPipeline(vec![AggregatorSpec::DimNorm { order: NormOrder::L2 }])
    } else {
        AggregatorPipeline::default()
    }
}

fn scores_at(s: &SequenceAttribution, prep: &Prepared) -> (f64, f64) {
    (s.source_attr.at(&[prep.pron, 0]), s.source_attr.at(&[prep.occ, 0]))
}

fn method_spec(spec: &TemplateStudySpec, method: MethodId) -> MethodSpec {
    MethodSpec {
        seed: spec.seed,
        ..MethodSpec::new(method)
    }
}

fn term_metrics(
    model: &ModelBundle,
    registry: &StepRegistry,
    spec: &TemplateStudySpec,
    prep: &Prepared,
    ig_deltas: &mut Vec<f64>,
) -> Result<(CaseMetrics, CaseMetrics)> {
    let k = spec.target_step;
    let span = Some((k, k + 1));
    let probability = StepScoreSpec::new("probability");

    let base_gen = GenerationRequest {
        max_new_tokens: k + 1,
        span,
        ..GenerationRequest::new(vec![prep.text.clone()])
    };
    let decoded = decode_request(model, &base_gen)?;
    if decoded[0].generated.len() <= k {
        return Err(Error::Span(format!("generation stopped before step {k}")));
    }
    let base_ctx = &decoded[0].step_contexts(span)?[0];
    let base_p = registry.evaluate(model, base_ctx, &probability, None)?;

    let forced_gen = GenerationRequest {
        forced_targets: Some(vec![spec.contrast.0.clone(), spec.contrast.1.clone()]),
        span,
        ..GenerationRequest::new(vec![prep.text.clone(), prep.text.clone()])
    };
    let forced = decode_request(model, &forced_gen)?;
    let mut swap_p = [0.0; 2];
    for (i, d) in forced.iter().enumerate() {
        swap_p[i] = registry.evaluate(model, &d.step_contexts(span)?[0], &probability, None)?;
    }

    let mut base = CaseMetrics {
        probability: base_p,
        attributions: BTreeMap::new(),
    };
    let mut swap = CaseMetrics {
        probability: swap_p[0] - swap_p[1],
        attributions: BTreeMap::new(),
    };
    for &method in &spec.methods {
        let mspec = method_spec(spec, method);
        let pipeline = token_level(method);
        let base_req = AttributionRequest {
            max_new_tokens: k + 1,
            span,
            ..AttributionRequest::new(vec![prep.text.clone()])
        };
        let out = attribute(model, &base_req, &mspec, registry)?;
        let b = run_pipeline(&out.sequences[0], &pipeline, None)?;
        base.attributions.insert(method.as_str().to_string(), scores_at(&b, prep));

        let swap_req = AttributionRequest {
            forced_targets: forced_gen.forced_targets.clone(),
            span,
            ..AttributionRequest::new(forced_gen.inputs.clone())
        };
        let out2 = attribute(model, &swap_req, &mspec, registry)?;
        let mut diff_pipeline = pipeline.clone();
        let n_target = out2.sequences[0].target_tokens.len();
        diff_pipeline.0.push(AggregatorSpec::PairDiff { max_label_swaps: n_target });
        let d = run_pipeline(&out2.sequences[0], &diff_pipeline, Some(&out2.sequences[1]))?;
        swap.attributions.insert(method.as_str().to_string(), scores_at(&d, prep));

        for o in [&out, &out2] {
            ig_deltas.extend(o.metadata.ig_max_delta);
        }
    }
    Ok((base, swap))
}

fn correlate(metric: &[f64], against: &[f64]) -> (Option<f64>, Option<f64>) {
    match kendall_tau(metric, against) {
        Ok(t) => (Some(t.tau), Some(t.p_value)),
        Err(_) => (None, None),
    }
}

fn grid(spec: &TemplateStudySpec, terms: &[TermMetrics]) -> Vec<CorrelationCell> {
    let stats: Vec<f64> = terms.iter().map(|t| t.statistic).collect();
    let deviation: Vec<f64> = stats.iter().map(|s| (s - 0.5).abs()).collect();
    let mut metrics: Vec<String> = vec!["p".to_string()];
    metrics.extend(spec.methods.iter().map(|m| m.as_str().to_string()));
    let mut cells = Vec::new();
    for metric in &metrics {
        for case in [Case::Base, Case::Swap] {
            for position in [Position::Pron, Position::Occ] {
                let values: Vec<f64> = terms
                    .iter()
                    .map(|t| {
                        let m = if case == Case::Base { &t.base } else { &t.swap };
                        if metric == "p" {
                            m.probability
                        } else {
                            let (pron, occ) = m.attributions[metric];
                            if position == Position::Pron {
                                pron
                            } else {
                                occ
                            }
                        }
                    })
                    .collect();
                let against = if case == Case::Base { &deviation } else { &stats };
                let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
                let (tau, p_value) = correlate(&values, against);
                let (tau_abs, p_value_abs) = correlate(&abs, against);
                cells.push(CorrelationCell {
                    metric: metric.clone(),
                    case,
                    position,
                    tau,
                    p_value,
                    tau_abs,
                    p_value_abs,
                });
            }
        }
    }
    cells
}

pub fn run_template_study(model: &ModelBundle, spec: &TemplateStudySpec) -> Result<TemplateStudyResult> {
    spec.validate()?;
    let registry = StepRegistry::new();
    let (a, b) = (
        model.tokenizer().tokenize(&spec.contrast.0),
        model.tokenizer().tokenize(&spec.contrast.1),
    );
    if a.len() != b.len() || a.len() <= spec.target_step {
        return Err(Error::Alignment(format!(
            "contrast targets need equal length above the target step, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut terms = Vec::new();
    let mut skipped = Vec::new();
    let mut deltas = Vec::new();
    for t in &spec.terms {
        let prep = match prepare(model, spec, &t.term) {
            Ok(p) => p,
            Err(reason) => {
                log::warn!("skipping term {:?}: {reason}", t.term);
                skipped.push((t.term.clone(), reason));
                continue;
            }
        };
        let (base, swap) = term_metrics(model, &registry, spec, &prep, &mut deltas)?;
        terms.push(TermMetrics {
            term: t.term.clone(),
            statistic: t.statistic,
            base,
            swap,
        });
    }
    Ok(TemplateStudyResult {
        grid: grid(spec, &terms),
        terms,
        skipped,
        ig_max_delta: deltas.into_iter().reduce(f64::max),
    })
}

/// A decoder-only toy model in which `terms.0` at the end of `template`
/// pushes the next token towards `targets.0` and `terms.1` towards
/// `targets.1`. Attention and MLP outputs are zeroed so the last input
/// embedding alone decides the next token.
pub fn planted_bias_model(template: &str, terms: (&str, &str), targets: (&str, &str), seed: u64) -> Result<ModelBundle> {
    let corpus = [template.replace(SLOT, ""), terms.0.into(), terms.1.into(), targets.0.into(), targets.1.into()];
    let tokenizer = Tokenizer::from_corpus(corpus.iter().map(String::as_str));
    let cfg = ModelConfig {
        seed,
        dropout_p: 0.0,
        ..ModelConfig::decoder_only(tokenizer.len())
    };
    let d = cfg.d_model;
    let mut model = ModelBundle::init_with_tokenizer(cfg.clone(), tokenizer)?;
    for l in 0..cfg.n_layers_dec {
        for name in ["self_attn.wo", "self_attn.bo", "mlp.w2", "mlp.b2"] {
            let full = format!("decoder.layers.{l}.{name}");
            let shape = model.weights().get(&full).shape().to_vec();
            model.set_weight(&full, Tensor::zeros(&shape))?;
        }
    }
    let direction: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let id = |w: &str| -> Result<usize> {
        let ids = model.tokenizer().tokenize(w);
        match ids.as_slice() {
            [id] if *id != UNK_ID => Ok(*id as usize),
            _ => Err(Error::Dataset(format!("{w:?} must be a single known token"))),
        }
    };
    let (term_a, term_b, tgt_a, tgt_b) = (id(terms.0)?, id(terms.1)?, id(targets.0)?, id(targets.1)?);
    let v = cfg.vocab_size;
    let mut embed = model.weights().get("embed.tokens").data().to_vec();
    for k in 0..d {
        embed[term_a * d + k] = direction[k];
        embed[term_b * d + k] = -direction[k];
    }
    model.set_weight("embed.tokens", Tensor::new(vec![v, d], embed)?)?;
    model.set_weight("embed.positions", Tensor::zeros(&[cfg.max_positions, d]))?;
    let mut head = vec![0.0; d * v];
    for k in 0..d {
        head[k * v + tgt_a] = 2.0 * direction[k];
        head[k * v + tgt_b] = -2.0 * direction[k];
    }
    model.set_weight("lm_head.weight", Tensor::new(vec![d, v], head)?)?;
    model.set_weight("lm_head.bias", Tensor::zeros(&[v]))?;
    model.set_name("planted-bias");
    Ok(model)
}
