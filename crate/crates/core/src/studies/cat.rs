// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive attribution tracing over decoder layers.
//!
//! For each statement and decoder block, the MLP output of the block is
//! re-entered as a leaf, the model is run once teacher-forced on the true
//! continuation and `Σ_t p(true_t) − p(false_t)` is back-propagated once.
//! Per-token scores are `Σ_d activation · gradient`. Prompt tokens are
//! grouped into role buckets and averaged over statements.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ModelBundle, PassCounts, TokenId, BOS_ID, UNK_ID};

pub const SUBJECT_SLOT: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Prompt pattern with one `{}` slot for the subject.
    pub relation: String,
    pub subject: String,
    pub target_true: String,
    pub target_false: String,
}

impl TraceRecord {
    pub fn prompt(&self) -> String {
        self.relation.replacen(SUBJECT_SLOT, &self.subject, 1)
    }
}

/// Reads `relation<TAB>subject<TAB>true<TAB>false` lines.
pub fn parse_records(text: &str) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let [relation, subject, target_true, target_false] = cols.as_slice() else {
            return Err(Error::Dataset(format!("line {}: expected 4 tab-separated columns", n + 1)));
        };
        if relation.matches(SUBJECT_SLOT).count() != 1 {
            return Err(Error::Dataset(format!("line {}: relation needs one {SUBJECT_SLOT} slot", n + 1)));
        }
        out.push(TraceRecord {
            relation: relation.to_string(),
            subject: subject.to_string(),
            target_true: target_true.to_string(),
            target_false: target_false.to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::Dataset("no trace records".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStudySpec {
    pub records: Vec<TraceRecord>,
    /// Decoder blocks to trace; all when `None`.
    pub layers: Option<Vec<usize>>,
    pub max_examples: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleBucket {
    FirstSubject,
    LastSubject,
    /// Tokens after the subject, except the last one.
    Further,
    Last,
}

impl RoleBucket {
    pub const ALL: [RoleBucket; 4] = [RoleBucket::FirstSubject, RoleBucket::LastSubject, RoleBucket::Further, RoleBucket::Last];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleBucket::FirstSubject => "first_subject",
            RoleBucket::LastSubject => "last_subject",
            RoleBucket::Further => "further",
            RoleBucket::Last => "last",
        }
    }
}

/// Scores of one statement, `[layer][prompt token]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordTrace {
    pub index: usize,
    /// Prompt pieces, including the leading `<s>`.
    pub tokens: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    /// Token positions of each bucket.
    pub buckets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatResult {
    pub layers: Vec<usize>,
    pub buckets: Vec<RoleBucket>,
    /// `[layer][bucket]` averages; `None` when no statement has the bucket.
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Statements contributing to each bucket.
    pub bucket_counts: Vec<usize>,
    pub records: Vec<RecordTrace>,
    /// Statement index and reason.
    pub skipped: Vec<(usize, String)>,
    pub passes: PassCounts,
}

struct Prepared {
    source: Vec<TokenId>,
    truth: Vec<TokenId>,
    foil: Vec<TokenId>,
    buckets: Vec<Vec<usize>>,
}

fn prepare(model: &ModelBundle, r: &TraceRecord) -> std::result::Result<Prepared, String> {
    let tok = model.tokenizer();
    let (before, _) = r.relation.split_once(SUBJECT_SLOT).ok_or("relation has no subject slot")?;
    let prompt = tok.tokenize(&r.prompt());
    let truth = tok.tokenize(&r.target_true);
    let foil = tok.tokenize(&r.target_false);
    if [&prompt, &truth, &foil].iter().any(|ids| ids.contains(&UNK_ID)) {
        return Err("unknown token".into());
    }
    if truth.is_empty() || truth.len() != foil.len() {
        return Err(format!("targets have {} and {} tokens", truth.len(), foil.len()));
    }
    if truth == foil {
        return Err("true and false targets are identical".into());
    }
    let subject_len = tok.pieces(&r.subject).len();
    if subject_len == 0 {
        return Err("empty subject".into());
    }
    let mut source = vec![BOS_ID];
    source.extend(&prompt);
    if source.len() + truth.len() - 1 > model.config().max_positions {
        return Err("statement too long for the model".into());
    }
    let first = 1 + tok.pieces(before).len();
    let last_subject = first + subject_len - 1;
    let last = source.len() - 1;
    let buckets = vec![
        vec![first],
        vec![last_subject],
        (last_subject + 1..last).collect(),
        vec![last],
    ];
    Ok(Prepared {
        source,
        truth,
        foil,
        buckets,
    })
}

/// One forward and one backward with the block-`layer` hook; returns
/// per-position gradient × activation.
fn trace_layer(model: &ModelBundle, p: &Prepared, layer: usize) -> Result<Vec<f64>> {
    let mut ids = p.source.clone();
    ids.extend(&p.truth[..p.truth.len() - 1]);
    let mut tape = Tape::new();
    let embeds = tape.constant(model.token_embeddings(&ids)?);
    let opts = ForwardOptions {
        hook_layer: Some(layer),
        ..ForwardOptions::default()
    };
    let vars = model.forward_embeddings(&mut tape, embeds, None, &opts)?;
    let mut total: Option<Var> = None;
    for (s, (&t, &f)) in p.truth.iter().zip(&p.foil).enumerate() {
        let row = p.source.len() - 1 + s;
        let logits = tape.slice(vars.logits, 0, row, row + 1)?;
        let probs = tape.softmax(logits, 1)?;
        let pt = tape.slice(probs, 1, t as usize, t as usize + 1)?;
        let pf = tape.slice(probs, 1, f as usize, f as usize + 1)?;
        let diff = tape.sub(pt, pf)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, diff)?,
            None => diff,
        });
    }
    let root = tape.sum_all(total.expect("targets are non-empty"))?;
    model.backward(&mut tape, root)?;
    let hooked = vars.hooked.expect("hook layer was set");
    let act = tape.value(hooked).clone();
    let grad = tape
        .grad(hooked)
        .cloned()
        .unwrap_or_else(|| crate::autodiff::Tensor::zeros(act.shape()));
    Ok((0..p.source.len())
        .map(|i| {
            act.row(i)
                .iter()
                .zip(grad.row(i))
                .map(|(a, g)| a * g)
                .sum::<f64>()
        })
        .collect())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn run_cat_study(model: &ModelBundle, spec: &TraceStudySpec) -> Result<CatResult> {
    if model.is_encoder_decoder() {
        return Err(Error::Method("layer tracing needs a decoder-only model".into()));
    }
    let n_layers = model.config().n_layers_dec;
    let layers = spec.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(Error::Method(format!("layer {l} out of range for {n_layers} decoder layers")));
    }
    let cap = spec.max_examples.unwrap_or(usize::MAX);
    let records: Vec<(usize, &TraceRecord)> = spec.records.iter().enumerate().take(cap).collect();
    let before = model.pass_counts();

    let results: Vec<(usize, std::result::Result<RecordTrace, String>)> = records
        .par_iter()
        .map(|&(index, r)| {
            let outcome = match prepare(model, r) {
                Err(reason) => Err(reason),
                Ok(p) => {
                    let scores = layers
                        .iter()
                        .map(|&l| trace_layer(model, &p, l))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| e.to_string());
                    scores.map(|scores| RecordTrace {
                        index,
                        tokens: model.tokenizer().id_pieces(&p.source),
                        scores,
                        buckets: p.buckets,
                    })
                }
            };
            (index, outcome)
        })
        .collect();

    let mut traces = Vec::new();
    let mut skipped = Vec::new();
    for (index, outcome) in results {
        match outcome {
            Ok(t) => traces.push(t),
            Err(reason) => {
                log::warn!("skipping statement {index}: {reason}");
                skipped.push((index, reason));
            }
        }
    }

    let bucket_counts: Vec<usize> = (0..RoleBucket::ALL.len())
        .map(|b| traces.iter().filter(|t| !t.buckets[b].is_empty()).count())
        .collect();
    let matrix = (0..layers.len())
        .map(|li| {
            (0..RoleBucket::ALL.len())
                .map(|b| {
                    let per_record = traces.iter().filter(|t| !t.buckets[b].is_empty()).map(|t| {
                        let pos = &t.buckets[b];
                        compensated_sum(pos.iter().map(|&i| t.scores[li][i])) / pos.len() as f64
                    });
                    let n = bucket_counts[b];
                    (n > 0).then(|| compensated_sum(per_record) / n as f64)
                })
                .collect()
        })
        .collect();
    let after = model.pass_counts();
    Ok(CatResult {
        layers,
        buckets: RoleBucket::ALL.to_vec(),
        matrix,
        bucket_counts,
        records: traces,
        skipped,
        passes: PassCounts {
            forward: after.forward - before.forward,
            backward: after.backward - before.backward,
        },
    })
}
