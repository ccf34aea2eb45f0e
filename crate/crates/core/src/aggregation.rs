// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-processing of [`SequenceAttribution`]s: merging subwords and spans,
//! reducing embedding dimensions to a norm, and differencing two
//! attributions.
//!
//! Merges act on token rows (source or target). Step columns are never
//! merged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{FeatureAttributionOutput, SequenceAttribution};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{is_continuation, CONTINUATION_PREFIX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
    Max,
}

impl Reduction {
    fn apply(self, values: impl Iterator<Item = f64>) -> f64 {
        let mut n = 0usize;
        let mut acc = match self {
            Reduction::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        for v in values {
            n += 1;
            acc = match self {
                Reduction::Max => acc.max(v),
                _ => acc + v,
            };
        }
        match (self, n) {
            (_, 0) => 0.0,
            (Reduction::Mean, n) => acc / n as f64,
            _ => acc,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
            Reduction::Max => "max",
        }
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            "max" => Ok(Reduction::Max),
            _ => Err(Error::Aggregation(format!("unknown reduction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    L1,
    #[default]
    L2,
    Linf,
}

impl NormOrder {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormOrder::L1 => v.iter().map(|x| x.abs()).sum(),
            NormOrder::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NormOrder::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            NormOrder::L1 => "l1",
            NormOrder::L2 => "l2",
            NormOrder::Linf => "linf",
        }
    }
}

impl FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(NormOrder::L1),
            "l2" => Ok(NormOrder::L2),
            "linf" => Ok(NormOrder::Linf),
            _ => Err(Error::Aggregation(format!("unknown norm order {s:?}"))),
        }
    }
}

/// Which token rows a merge applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[default]
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorSpec {
    SubwordMerge {
        #[serde(default)]
        reduction: Reduction,
    },
    DimNorm {
        #[serde(default)]
        order: NormOrder,
    },
    SpanMerge {
        #[serde(default)]
        axis: Axis,
        /// Half-open `[start, end)` row ranges.
        spans: Vec<(usize, usize)>,
        #[serde(default)]
        reduction: Reduction,
    },
    PairDiff {
        #[serde(default)]
        max_label_swaps: usize,
    },
}

impl fmt::Display for AggregatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregatorSpec::SubwordMerge { reduction } => write!(f, "subword_merge:{}", reduction.as_str()),
            AggregatorSpec::DimNorm { order } => write!(f, "dim_norm:{}", order.as_str()),
            AggregatorSpec::SpanMerge { axis, spans, reduction } => {
                let axis = if *axis == Axis::Source { "source" } else { "target" };
                let spans: Vec<String> = spans.iter().map(|(s, e)| format!("{s}-{e}")).collect();
                write!(f, "span_merge:{axis}:{}:{}", spans.join(";"), reduction.as_str())
            }
            AggregatorSpec::PairDiff { max_label_swaps } => write!(f, "pair_diff:{max_label_swaps}"),
        }
    }
}

impl FromStr for AggregatorSpec {
    type Err = Error;

    /// Parses `kind[:param...]`, e.g. `subword_merge:mean`, `dim_norm`,
    /// `span_merge:target:0-2;3-5:sum`, `pair_diff:1`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default();
        let params: Vec<&str> = parts.collect();
        let too_many = |n: usize| {
            if params.len() > n {
                Err(Error::Aggregation(format!("too many parameters in {s:?}")))
            } else {
                Ok(())
            }
        };
        match kind {
            "subword_merge" => {
                too_many(1)?;
                Ok(AggregatorSpec::SubwordMerge {
                    reduction: params.first().map_or(Ok(Reduction::Sum), |p| p.parse())?,
                })
            }
            "dim_norm" => {
                too_many(1)?;
                Ok(AggregatorSpec::DimNorm {
                    order: params.first().map_or(Ok(NormOrder::L2), |p| p.parse())?,
                })
            }
            "span_merge" => {
                too_many(3)?;
                let [axis, spans, rest @ ..] = params.as_slice() else {
                    return Err(Error::Aggregation(format!("span_merge needs an axis and spans: {s:?}")));
                };
                let axis = match *axis {
                    "source" => Axis::Source,
                    "target" => Axis::Target,
                    other => return Err(Error::Aggregation(format!("unknown axis {other:?}"))),
                };
                let spans = spans
                    .split(';')
                    .map(|span| {
                        let (a, b) = span
                            .split_once('-')
                            .ok_or_else(|| Error::Aggregation(format!("span {span:?} is not start-end")))?;
                        let num = |x: &str| {
                            x.parse::<usize>()
                                .map_err(|_| Error::Aggregation(format!("bad span bound {x:?}")))
                        };
                        Ok((num(a)?, num(b)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let reduction = rest.first().map_or(Ok(Reduction::Sum), |p| p.parse())?;
                Ok(AggregatorSpec::SpanMerge { axis, spans, reduction })
            }
            "pair_diff" => {
                too_many(1)?;
                let max_label_swaps = match params.first() {
                    Some(p) => p
                        .parse()
                        .map_err(|_| Error::Aggregation(format!("bad swap count {p:?}")))?,
                    None => 0,
                };
                Ok(AggregatorSpec::PairDiff { max_label_swaps })
            }
            _ => Err(Error::Aggregation(format!("unknown aggregator {kind:?}"))),
        }
    }
}

/// Ordered aggregators.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggregatorPipeline(pub Vec<AggregatorSpec>);

impl AggregatorPipeline {
    /// `[subword_merge(sum), dim_norm(l2)]`.
    pub fn default_token_level() -> Self {
        Self(vec![
            AggregatorSpec::SubwordMerge { reduction: Reduction::Sum },
            AggregatorSpec::DimNorm { order: NormOrder::L2 },
        ])
    }

    /// Parses a comma-separated list of aggregators.
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(Self::default());
        }
        s.split(',').map(str::parse).collect::<Result<Vec<_>>>().map(Self)
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(ToString::to_string).collect()
    }

    pub fn needs_partner(&self) -> bool {
        self.0.iter().any(|a| matches!(a, AggregatorSpec::PairDiff { .. }))
    }
}

/// Contiguous row groups, each a non-empty ordered list of row indices.
type Groups = Vec<Vec<usize>>;

/// Groups continuation pieces with the piece before them.
fn subword_groups(tokens: &[String]) -> Result<Groups> {
    let mut groups: Groups = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if is_continuation(t) {
            match groups.last_mut() {
                Some(g) => g.push(i),
                None => return Err(Error::Aggregation(format!("orphan continuation piece {t:?} at position 0"))),
            }
        } else {
            groups.push(vec![i]);
        }
    }
    Ok(groups)
}

fn span_groups(n: usize, spans: &[(usize, usize)]) -> Result<Groups> {
    let mut groups = Vec::new();
    let mut next = 0;
    for &(start, end) in spans {
        if start >= end || end > n {
            return Err(Error::Aggregation(format!("span ({start}, {end}) invalid for {n} rows")));
        }
        if start < next {
            return Err(Error::Aggregation(format!("span ({start}, {end}) overlaps or is out of order")));
        }
        groups.extend((next..start).map(|i| vec![i]));
        groups.push((start..end).collect());
        next = end;
    }
    groups.extend((next..n).map(|i| vec![i]));
    Ok(groups)
}

/// Collapses row groups of a `[rows × cols (× d)]` tensor. `include(row,
/// col)` selects the rows that take part in each column.
fn reduce_rows(t: &Tensor, groups: &Groups, reduction: Reduction, include: &dyn Fn(usize, usize) -> bool) -> Result<Tensor> {
    let shape = t.shape();
    let cols = shape[1];
    let width = if shape.len() == 3 { shape[2] } else { 1 };
    let data = t.data();
    let mut out = Vec::with_capacity(groups.len() * cols * width);
    for g in groups {
        for c in 0..cols {
            for k in 0..width {
                let members = g.iter().filter(|&&r| include(r, c));
                out.push(reduction.apply(members.map(|&r| data[(r * cols + c) * width + k])));
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = groups.len();
    Tensor::new(new_shape, out)
}

fn pick<T: Clone>(items: &[T], groups: &Groups) -> Vec<T> {
    groups.iter().map(|g| items[g[0]].clone()).collect()
}

fn merge_rows(
    attr: &SequenceAttribution,
    axis: Axis,
    groups: &Groups,
    reduction: Reduction,
    label: impl Fn(&[String]) -> String,
) -> Result<SequenceAttribution> {
    let mut out = attr.clone();
    let labels = |tokens: &[String]| -> Vec<String> {
        groups
            .iter()
            .map(|g| {
                let pieces: Vec<String> = g.iter().map(|&i| tokens[i].clone()).collect();
                label(&pieces)
            })
            .collect()
    };
    match axis {
        Axis::Source => {
            out.source_attr = reduce_rows(&attr.source_attr, groups, reduction, &|_, _| true)?;
            out.source_tokens = labels(&attr.source_tokens);
            out.source_ids = pick(&attr.source_ids, groups);
        }
        Axis::Target => {
            if let Some(t) = &attr.target_attr {
                let populated = |r: usize, c: usize| attr.target_cell_populated(r, c);
                out.target_attr = Some(reduce_rows(t, groups, reduction, &populated)?);
            }
            out.target_tokens = labels(&attr.target_tokens);
            out.target_ids = pick(&attr.target_ids, groups);
            out.target_offsets = pick(&attr.target_offsets, groups);
        }
    }
    Ok(out)
}

fn join_subwords(pieces: &[String]) -> String {
    pieces
        .iter()
        .map(|p| p.strip_prefix(CONTINUATION_PREFIX).unwrap_or(p))
        .collect()
}

/// Merges `##` continuation pieces into words on both token axes.
pub fn subword_merge(attr: &SequenceAttribution, reduction: Reduction) -> Result<SequenceAttribution> {
    let source_groups = subword_groups(&attr.source_tokens)?;
    let target_groups = subword_groups(&attr.target_tokens)?;
    let merged = merge_rows(attr, Axis::Source, &source_groups, reduction, join_subwords)?;
    merge_rows(&merged, Axis::Target, &target_groups, reduction, join_subwords)
}

/// Replaces each embedding-dimension vector by its norm.
pub fn dim_norm(attr: &SequenceAttribution, order: NormOrder) -> Result<SequenceAttribution> {
    if !attr.is_per_dim() {
        return Err(Error::Aggregation("dim_norm needs per-dimension scores".into()));
    }
    let reduce = |t: &Tensor| -> Result<Tensor> {
        let (rows, cols, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let out = t.data().chunks(d.max(1)).map(|v| order.norm(v)).collect();
        Tensor::new(vec![rows, cols], if d == 0 { vec![0.0; rows * cols] } else { out })
    };
    let mut out = attr.clone();
    out.source_attr = reduce(&attr.source_attr)?;
    out.target_attr = attr.target_attr.as_ref().map(reduce).transpose()?;
    Ok(out)
}

/// Collapses each span of rows on `axis` into one row.
pub fn span_merge(
    attr: &SequenceAttribution,
    axis: Axis,
    spans: &[(usize, usize)],
    reduction: Reduction,
) -> Result<SequenceAttribution> {
    let n = match axis {
        Axis::Source => attr.source_tokens.len(),
        Axis::Target => attr.target_tokens.len(),
    };
    let groups = span_groups(n, spans)?;
    merge_rows(attr, axis, &groups, reduction, |pieces| pieces.join(" "))
}

fn swap_labels(a: &[String], b: &[String], swaps: &mut usize) -> Vec<String> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x == y {
                x.clone()
            } else {
                *swaps += 1;
                format!("{x} → {y}")
            }
        })
        .collect()
}

fn diff(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Aggregation(format!(
            "{what} shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.sub(b)
}

/// Elementwise `a − b`. Tokens that differ are labelled `x → y`; at most
/// `max_label_swaps` positions may differ.
pub fn pair_diff(a: &SequenceAttribution, b: &SequenceAttribution, max_label_swaps: usize) -> Result<SequenceAttribution> {
    if a.source_tokens.len() != b.source_tokens.len()
        || a.target_tokens.len() != b.target_tokens.len()
        || a.step_indices != b.step_indices
    {
        return Err(Error::Aggregation("pair_diff operands have different token or step axes".into()));
    }
    let mut swaps = 0;
    let source_tokens = swap_labels(&a.source_tokens, &b.source_tokens, &mut swaps);
    let target_tokens = swap_labels(&a.target_tokens, &b.target_tokens, &mut swaps);
    if swaps > max_label_swaps {
        return Err(Error::Aggregation(format!(
            "{swaps} tokens differ, at most {max_label_swaps} swaps allowed"
        )));
    }
    let step_tokens = swap_labels(&a.step_tokens, &b.step_tokens, &mut 0);
    let target_attr = match (&a.target_attr, &b.target_attr) {
        (Some(x), Some(y)) => Some(diff(x, y, "target")?),
        (None, None) => None,
        _ => return Err(Error::Aggregation("only one operand has target attributions".into())),
    };
    let mut step_scores = std::collections::BTreeMap::new();
    for (name, xs) in &a.step_scores {
        let ys = b
            .step_scores
            .get(name)
            .ok_or_else(|| Error::Aggregation(format!("step score {name:?} missing from second operand")))?;
        step_scores.insert(name.clone(), xs.iter().zip(ys).map(|(x, y)| x - y).collect());
    }
    if b.step_scores.keys().any(|k| !a.step_scores.contains_key(k)) {
        return Err(Error::Aggregation("step score sets differ".into()));
    }
    Ok(SequenceAttribution {
        source_tokens,
        source_ids: a.source_ids.clone(),
        target_tokens,
        target_ids: a.target_ids.clone(),
        target_offsets: a.target_offsets.clone(),
        step_indices: a.step_indices.clone(),
        step_tokens,
        source_attr: diff(&a.source_attr, &b.source_attr, "source")?,
        target_attr,
        step_scores,
        ig_convergence_delta: None,
        ig_n_steps: None,
        forced: a.forced && b.forced,
        diverged: a.diverged || b.diverged,
        sequence_perplexity: None,
    })
}

fn apply(stage: &AggregatorSpec, attr: &SequenceAttribution, partner: Option<&SequenceAttribution>) -> Result<SequenceAttribution> {
    match stage {
        AggregatorSpec::SubwordMerge { reduction } => subword_merge(attr, *reduction),
        AggregatorSpec::DimNorm { order } => dim_norm(attr, *order),
        AggregatorSpec::SpanMerge { axis, spans, reduction } => span_merge(attr, *axis, spans, *reduction),
        AggregatorSpec::PairDiff { max_label_swaps } => {
            let partner = partner.ok_or_else(|| Error::Aggregation("pair_diff needs a second attribution".into()))?;
            pair_diff(attr, partner, *max_label_swaps)
        }
    }
}

/// Runs the stages left to right. The partner of a `pair_diff` stage goes
/// through the same preceding stages first.
pub fn run_pipeline(
    attr: &SequenceAttribution,
    pipeline: &AggregatorPipeline,
    partner: Option<&SequenceAttribution>,
) -> Result<SequenceAttribution> {
    let mut current = attr.clone();
    let mut other = partner.cloned();
    for (i, stage) in pipeline.0.iter().enumerate() {
        let wrap = |e| Error::Stage {
            stage: i,
            source: Box::new(e),
        };
        let next = apply(stage, &current, other.as_ref()).map_err(wrap)?;
        other = match (stage, other) {
            (AggregatorSpec::PairDiff { .. }, _) => None,
            (_, Some(o)) => Some(apply(stage, &o, None).map_err(wrap)?),
            (_, None) => None,
        };
        current = next;
    }
    Ok(current)
}

/// Applies a pipeline to every sequence of an output and records it in
/// the metadata. `partners` pairs sequences for `pair_diff`.
pub fn aggregate_output(
    output: &FeatureAttributionOutput,
    pipeline: &AggregatorPipeline,
    partners: Option<&FeatureAttributionOutput>,
) -> Result<FeatureAttributionOutput> {
    if let Some(p) = partners {
        if p.sequences.len() != output.sequences.len() {
            return Err(Error::Aggregation(format!(
                "{} sequences paired with {}",
                output.sequences.len(),
                p.sequences.len()
            )));
        }
    }
    let sequences = output
        .sequences
        .iter()
        .enumerate()
        .map(|(i, s)| run_pipeline(s, pipeline, partners.map(|p| &p.sequences[i])))
        .collect::<Result<Vec<_>>>()?;
    let mut metadata = output.metadata.clone();
    metadata.aggregation.extend(pipeline.names());
    Ok(FeatureAttributionOutput { metadata, sequences })
}
