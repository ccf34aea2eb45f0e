// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy and forced decoding, batching, and the step bookkeeping that
//! drives sequential attribution.
//!
//! Input conventions: an encoder-decoder model reads `prompt + </s>` on the
//! encoder side and `<s> + prefix` on the decoder side. A decoder-only model
//! reads `<s> + prompt + prefix`, and `<s> + prompt` is its source. Generated
//! sequences include the terminating `</s>` when one was produced.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ForwardTrace, ModelBundle, TokenId, BOS_ID, EOS_ID, PAD_ID};

/// Right-padded id matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<TokenId>>,
    /// `1` for real tokens, `0` for padding.
    pub mask: Vec<Vec<u8>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<TokenId>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut row = s.clone();
            row.resize(width, PAD_ID);
            ids.push(row);
            let mut m = vec![1u8; s.len()];
            m.resize(width, 0);
            mask.push(m);
        }
        Ok(Self {
            ids,
            mask,
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    /// Tokenizes prompts into model source rows.
    pub fn from_texts(model: &ModelBundle, texts: &[String]) -> Result<Self> {
        let rows: Vec<_> = texts.iter().map(|t| encode_source(model, t)).collect();
        Self::from_sequences(&rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row `i` without padding.
    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.ids[i][..self.lengths[i]]
    }
}

/// Source ids of a prompt.
pub fn encode_source(model: &ModelBundle, text: &str) -> Vec<TokenId> {
    let ids = model.tokenizer().tokenize(text);
    if model.is_encoder_decoder() {
        let mut out = ids;
        out.push(EOS_ID);
        out
    } else {
        let mut out = vec![BOS_ID];
        out.extend(ids);
        out
    }
}

/// Ids of a forced continuation; no `</s>` is appended.
pub fn encode_target(model: &ModelBundle, text: &str) -> Result<Vec<TokenId>> {
    let ids = model.tokenizer().tokenize(text);
    if ids.is_empty() {
        return Err(Error::Input(format!("target {text:?} has no tokens")));
    }
    Ok(ids)
}

/// Decoder ids and optional encoder ids for a source and generated prefix.
pub fn model_inputs(model: &ModelBundle, source: &[TokenId], prefix: &[TokenId]) -> (Vec<TokenId>, Option<Vec<TokenId>>) {
    if model.is_encoder_decoder() {
        let mut dec = vec![BOS_ID];
        dec.extend_from_slice(prefix);
        (dec, Some(source.to_vec()))
    } else {
        let mut dec = source.to_vec();
        dec.extend_from_slice(prefix);
        (dec, None)
    }
}

/// Position of the decoder row whose logits predict the next token.
pub fn current_position(model: &ModelBundle, source_len: usize, prefix_len: usize) -> usize {
    if model.is_encoder_decoder() {
        prefix_len
    } else {
        source_len + prefix_len - 1
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward trace of one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub trace: ForwardTrace,
    /// Row of `trace.logits` for the predicted position.
    pub position: usize,
    pub greedy: TokenId,
}

impl StepTrace {
    pub fn logits(&self) -> &[f64] {
        self.trace.logits.row(self.position)
    }
}

/// Decoding result of one batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSequence {
    pub source: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    /// One trace per generated token.
    pub steps: Vec<StepTrace>,
    pub forced: bool,
    /// Some forced token differed from the greedy choice at its step.
    pub diverged: bool,
}

struct RowInput<'a> {
    padded: &'a [TokenId],
    mask: &'a [u8],
    len: usize,
}

fn step_trace(model: &ModelBundle, row: &RowInput<'_>, prefix: &[TokenId]) -> Result<StepTrace> {
    let opts = ForwardOptions::default();
    let trace = if model.is_encoder_decoder() {
        let mut dec = vec![BOS_ID];
        dec.extend_from_slice(prefix);
        let key_mask = row.mask.iter().map(|&m| m == 1).collect();
        model.forward_with(&dec, Some((row.padded, Some(key_mask))), &opts)?
    } else {
        let (dec, _) = model_inputs(model, &row.padded[..row.len], prefix);
        model.forward_with(&dec, None, &opts)?
    };
    let position = current_position(model, row.len, prefix.len());
    let greedy = argmax(trace.logits.row(position)) as TokenId;
    Ok(StepTrace { trace, position, greedy })
}

/// Longest decoder prefix the positional table admits.
fn max_prefix(model: &ModelBundle, source_len: usize) -> usize {
    let max = model.config().max_positions;
    if model.is_encoder_decoder() {
        max - 1
    } else {
        max.saturating_sub(source_len)
    }
}

fn greedy_row(model: &ModelBundle, row: RowInput<'_>, max_new_tokens: usize) -> Result<DecodedSequence> {
    model.validate_ids(&row.padded[..row.len])?;
    let mut generated = Vec::new();
    let mut steps = Vec::new();
    let budget = max_new_tokens.min(max_prefix(model, row.len) + 1);
    while generated.len() < budget {
        let step = step_trace(model, &row, &generated)?;
        let next = step.greedy;
        steps.push(step);
        generated.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(DecodedSequence {
        source: row.padded[..row.len].to_vec(),
        generated,
        steps,
        forced: false,
        diverged: false,
    })
}

fn forced_row(model: &ModelBundle, row: RowInput<'_>, target: &[TokenId]) -> Result<DecodedSequence> {
    model.validate_ids(&row.padded[..row.len])?;
    if target.is_empty() {
        return Err(Error::Input("forced target has no tokens".into()));
    }
    if target.len() > max_prefix(model, row.len) + 1 {
        return Err(Error::Input(format!(
            "forced target of {} tokens exceeds max_positions {}",
            target.len(),
            model.config().max_positions
        )));
    }
    model.validate_ids(target)?;
    let mut steps = Vec::with_capacity(target.len());
    for s in 0..target.len() {
        steps.push(step_trace(model, &row, &target[..s])?);
    }
    let diverged = steps.iter().zip(target).any(|(st, &t)| st.greedy != t);
    Ok(DecodedSequence {
        source: row.padded[..row.len].to_vec(),
        generated: target.to_vec(),
        steps,
        forced: true,
        diverged,
    })
}

fn rows(batch: &Batch) -> impl IndexedParallelIterator<Item = RowInput<'_>> {
    (0..batch.len()).into_par_iter().map(move |i| RowInput {
        padded: &batch.ids[i],
        mask: &batch.mask[i],
        len: batch.lengths[i],
    })
}

/// Free greedy decoding with per-step traces. Rows are independent and
/// processed in parallel.
pub fn greedy_decode_traced(model: &ModelBundle, batch: &Batch, max_new_tokens: usize) -> Result<Vec<DecodedSequence>> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    rows(batch).map(|r| greedy_row(model, r, max_new_tokens)).collect()
}

/// Greedy continuation ids per row.
pub fn greedy_decode(model: &ModelBundle, batch: &Batch, max_new_tokens: usize) -> Result<Vec<Vec<TokenId>>> {
    Ok(greedy_decode_traced(model, batch, max_new_tokens)?
        .into_iter()
        .map(|d| d.generated)
        .collect())
}

/// Teacher-forced decoding along caller-given targets.
pub fn forced_decode(model: &ModelBundle, batch: &Batch, targets: &[Vec<TokenId>]) -> Result<Vec<DecodedSequence>> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if targets.len() != batch.len() {
        return Err(Error::Alignment(format!(
            "{} forced targets for {} inputs",
            targets.len(),
            batch.len()
        )));
    }
    rows(batch)
        .zip(targets.par_iter())
        .map(|(r, t)| forced_row(model, r, t))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub inputs: Vec<String>,
    pub forced_targets: Option<Vec<String>>,
    pub max_new_tokens: usize,
    /// Half-open range of generated-token indices to attribute.
    pub span: Option<(usize, usize)>,
}

impl GenerationRequest {
    pub fn new(inputs: Vec<String>) -> Self {
        Self {
            inputs,
            forced_targets: None,
            max_new_tokens: 16,
            span: None,
        }
    }
}

/// Runs free or forced decoding for a request.
pub fn decode_request(model: &ModelBundle, request: &GenerationRequest) -> Result<Vec<DecodedSequence>> {
    let batch = Batch::from_texts(model, &request.inputs)?;
    match &request.forced_targets {
        Some(texts) => {
            if texts.len() != request.inputs.len() {
                return Err(Error::Alignment(format!(
                    "{} forced targets for {} inputs",
                    texts.len(),
                    request.inputs.len()
                )));
            }
            let targets = texts
                .iter()
                .map(|t| encode_target(model, t))
                .collect::<Result<Vec<_>>>()?;
            forced_decode(model, &batch, &targets)
        }
        None => greedy_decode_traced(model, &batch, request.max_new_tokens),
    }
}

/// Everything needed to attribute one generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContext {
    /// Index of the token in the generated sequence.
    pub step: usize,
    pub source: Vec<TokenId>,
    /// Generated tokens before this step.
    pub prefix: Vec<TokenId>,
    pub target: TokenId,
    pub trace: StepTrace,
}

/// Validates a span against a generated length, defaulting to the whole
/// sequence.
pub fn resolve_span(span: Option<(usize, usize)>, generated: usize) -> Result<(usize, usize)> {
    let (start, end) = span.unwrap_or((0, generated));
    if start >= end || end > generated {
        return Err(Error::Span(format!(
            "span ({start}, {end}) invalid for {generated} generated tokens"
        )));
    }
    Ok((start, end))
}

impl DecodedSequence {
    /// Step contexts for `span`, in order.
    pub fn step_contexts(&self, span: Option<(usize, usize)>) -> Result<Vec<StepContext>> {
        let (start, end) = resolve_span(span, self.generated.len())?;
        Ok((start..end)
            .map(|s| StepContext {
                step: s,
                source: self.source.clone(),
                prefix: self.generated[..s].to_vec(),
                target: self.generated[s],
                trace: self.steps[s].clone(),
            })
            .collect())
    }
}

/// Decodes a request and returns the step contexts of every row.
pub fn iterate_attribution_steps(model: &ModelBundle, request: &GenerationRequest) -> Result<Vec<Vec<StepContext>>> {
    decode_request(model, request)?
        .iter()
        .map(|d| d.step_contexts(request.span))
        .collect()
}
