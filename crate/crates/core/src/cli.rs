// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::aggregation::{aggregate_output, AggregatorPipeline};
use crate::attribution::{attribute, AttributionRequest, FeatureAttributionOutput, MethodId, MethodSpec, TargetLayer};
use crate::error::{Error, Result};
use crate::html::{write_html, Colormap};
use crate::io::{ingest_dataset, load_document, to_canonical_json, AttributionDocument, DatasetSource};
use crate::model::{Architecture, ModelBundle, ModelConfig, Tokenizer};
use crate::step_scores::{StepRegistry, StepScoreSpec};
use crate::studies::{
    export_study, parse_records, parse_terms, run_cat_study, run_template_study, StudyResult, TemplateStudySpec,
    TraceStudySpec,
};

#[derive(Debug, Parser)]
#[command(name = "seqattr", version, about = "Feature attribution for sequence generation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attribute generations of a model and write a JSON document.
    Attribute(AttributeArgs),
    /// Apply an aggregation pipeline to a saved document.
    Aggregate(AggregateArgs),
    /// Print a saved document and optionally render it to HTML.
    Show(ShowArgs),
    /// Contrastive gradient × activation tracing across decoder layers.
    TraceLayers(TraceArgs),
    /// Template-based contrastive bias study with rank correlations.
    BiasStudy(BiasArgs),
    /// Write a seeded toy model with a vocabulary built from a corpus.
    InitModel(InitArgs),
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "integrated_gradients")]
    pub method: String,
    /// Input text; repeat for a batch.
    #[arg(long, required_unless_present = "dataset")]
    pub input: Vec<String>,
    /// One input per line, or `source<TAB>target` with --paired.
    #[arg(long, conflicts_with = "input")]
    pub dataset: Option<PathBuf>,
    /// Read the dataset as two tab-separated columns and force the second.
    #[arg(long, requires = "dataset")]
    pub paired: bool,
    /// Forced target text, aligned with --input.
    #[arg(long)]
    pub forced_target: Vec<String>,
    /// Contrast continuation for contrast_prob_diff, aligned with the inputs.
    #[arg(long)]
    pub contrast_target: Vec<String>,
    #[arg(long)]
    pub attribute_target: bool,
    /// Comma-separated step functions recorded at every step.
    #[arg(long, value_delimiter = ',')]
    pub step_scores: Vec<String>,
    #[arg(long, default_value = "probability")]
    pub attributed_fn: String,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub internal_batch_size: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// `embedding` or a decoder block index.
    #[arg(long)]
    pub target_layer: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub max_new_tokens: usize,
    /// Half-open step range `start:end`.
    #[arg(long)]
    pub span: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, env = "SEQATTR_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Document path; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub html: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    pub document: PathBuf,
    /// Comma-separated aggregators, e.g. `subword_merge:sum,dim_norm:l2`.
    #[arg(long, default_value = "subword_merge:sum,dim_norm:l2")]
    pub aggregate: String,
    /// Second document for pair_diff.
    #[arg(long)]
    pub partner: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShowArgs {
    pub document: PathBuf,
    #[arg(long)]
    pub html: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// `relation<TAB>subject<TAB>true<TAB>false` records.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// `a..b` (exclusive) or a comma-separated list; all blocks when absent.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub max_examples: Option<usize>,
    /// Writes `<output>.json`, `<output>.tsv` and `<output>.html`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// `term<TAB>statistic` rows.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Sentence with one `{}` slot for the term.
    #[arg(long)]
    pub template: String,
    /// Template word whose attribution is reported as `x_pron`.
    #[arg(long)]
    pub pronoun: String,
    /// Two contrast continuations, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub contrast: Vec<String>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "gradient,integrated_gradients,input_x_gradient"
    )]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub target_step: usize,
    #[arg(long, env = "SEQATTR_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Writes `<output>.json`, `<output>.tsv` and `<output>.html`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchArg {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Text whose whitespace-separated words form the vocabulary.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "decoder-only")]
    pub arch: ArchArg,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 32)]
    pub max_positions: usize,
    #[arg(long, env = "SEQATTR_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attribute(a) => cmd_attribute(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Show(a) => cmd_show(a),
        Command::TraceLayers(a) => cmd_trace(a),
        Command::BiasStudy(a) => cmd_bias(a),
        Command::InitModel(a) => cmd_init(a),
    }
}

fn parse_target_layer(s: &str) -> Result<TargetLayer> {
    match s {
        "embedding" | "embed" => Ok(TargetLayer::Embedding),
        _ => s
            .parse()
            .map(TargetLayer::Block)
            .map_err(|_| Error::Input(format!("target layer {s:?} is neither `embedding` nor an index"))),
    }
}

fn parse_span(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Input(format!("span {s:?} is not `start:end`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_layers(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Input(format!("layers {s:?} is not `a..b` or a comma-separated list"));
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn write_or_print(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn method_spec(a: &AttributeArgs) -> Result<MethodSpec> {
    let id = MethodId::parse(&a.method)?;
    let mut spec = MethodSpec {
        attributed_fn: StepScoreSpec::new(&a.attributed_fn),
        attribute_target: a.attribute_target,
        seed: a.seed,
        target_layer: a.target_layer.as_deref().map(parse_target_layer).transpose()?,
        ..MethodSpec::new(id)
    };
    if let Some(n) = a.n_steps {
        spec.n_steps = n;
        spec.ig_max_steps = spec.ig_max_steps.max(n);
    }
    if let Some(n) = a.internal_batch_size {
        spec.internal_batch_size = n;
    }
    if let Some(n) = a.n_samples {
        spec.n_samples = n;
    }
    Ok(spec)
}

fn cmd_attribute(a: AttributeArgs) -> Result<()> {
    let model = ModelBundle::load(&a.model)?;
    let registry = StepRegistry::new();
    let spec = method_spec(&a)?;
    let mut request = match &a.dataset {
        Some(path) => {
            let source = if a.paired {
                DatasetSource::pairs(path)
            } else {
                DatasetSource::lines(path)
            };
            let mut r = ingest_dataset(&source)?.into_request(a.max_new_tokens, 1);
            r.batch_size = a.batch_size;
            r
        }
        None => AttributionRequest {
            max_new_tokens: a.max_new_tokens,
            batch_size: a.batch_size,
            forced_targets: (!a.forced_target.is_empty()).then(|| a.forced_target.clone()),
            ..AttributionRequest::new(a.input.clone())
        },
    };
    request.contrast_targets = (!a.contrast_target.is_empty()).then(|| a.contrast_target.clone());
    request.span = a.span.as_deref().map(parse_span).transpose()?;
    request.step_scores = a.step_scores.iter().map(StepScoreSpec::new).collect();
    let output = attribute(&model, &request, &spec, &registry)?;
    for w in &output.metadata.warnings {
        log::warn!("{w}");
    }
    let doc = AttributionDocument::from(output);
    write_or_print(&to_canonical_json(&doc)?, a.output.as_deref())?;
    if let Some(html) = &a.html {
        write_html(&doc, html, &Colormap::default())?;
    }
    Ok(())
}

fn cmd_aggregate(a: AggregateArgs) -> Result<()> {
    let pipeline = AggregatorPipeline::parse(&a.aggregate)?;
    let doc = load_document(&a.document)?.document;
    let partner = match (&a.partner, pipeline.needs_partner()) {
        (Some(p), true) => Some(FeatureAttributionOutput::from(load_document(p)?.document)),
        (None, true) => return Err(Error::Aggregation("pair_diff needs --partner".into())),
        (Some(_), false) => return Err(Error::Aggregation("--partner is only used by pair_diff".into())),
        (None, false) => None,
    };
    let out = aggregate_output(&FeatureAttributionOutput::from(doc), &pipeline, partner.as_ref())?;
    write_or_print(&to_canonical_json(&out.into())?, a.output.as_deref())
}

/// Plain-text rendering used by `show`.
pub fn summarize(doc: &AttributionDocument) -> String {
    let mut out = String::new();
    let m = &doc.metadata;
    let _ = writeln!(out, "model {} method {} seed {}", m.model_name, m.method.id.as_str(), m.seed);
    if !m.aggregation.is_empty() {
        let _ = writeln!(out, "aggregation {}", m.aggregation.join(", "));
    }
    for (i, s) in doc.sequences.iter().enumerate() {
        let _ = writeln!(
            out,
            "sequence {i}: {} -> {}",
            s.source_tokens.join(" "),
            s.target_tokens.join(" ")
        );
        let shape: Vec<String> = s.source_attr.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "  source_attr [{}]", shape.join(" x "));
        if let Some(t) = &s.target_attr {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "  target_attr [{}], {} populated cells", shape.join(" x "), s.populated_target_cells());
        }
        for (name, values) in &s.step_scores {
            let v: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "  {name}: {}", v.join(" "));
        }
        if let Some(d) = &s.ig_convergence_delta {
            let v: Vec<String> = d.iter().map(|v| format!("{v:.2e}")).collect();
            let _ = writeln!(out, "  ig delta: {}", v.join(" "));
        }
    }
    out
}

fn cmd_show(a: ShowArgs) -> Result<()> {
    let doc = load_document(&a.document)?.document;
    print!("{}", summarize(&doc));
    if let Some(html) = &a.html {
        write_html(&doc, html, &Colormap::default())?;
    }
    Ok(())
}

fn write_study(result: StudyResult, json: String, stem: &Path) -> Result<()> {
    let path = stem.with_extension("json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    export_study(&result, stem)?;
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Input(format!("serializing study result: {e}")))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let model = ModelBundle::load(&a.model)?;
    let spec = TraceStudySpec {
        records: parse_records(&read_text(&a.spec)?)?,
        layers: a.layers.as_deref().map(parse_layers).transpose()?,
        max_examples: a.max_examples,
    };
    let result = run_cat_study(&model, &spec)?;
    for (i, why) in &result.skipped {
        log::warn!("record {i} skipped: {why}");
    }
    let json = to_json(&result)?;
    write_study(result.into(), json, &a.output)
}

fn cmd_bias(a: BiasArgs) -> Result<()> {
    let [first, second] = a.contrast.as_slice() else {
        return Err(Error::Input(format!("--contrast needs two values, got {}", a.contrast.len())));
    };
    let model = ModelBundle::load(&a.model)?;
    let methods = a.methods.iter().map(|m| MethodId::parse(m)).collect::<Result<Vec<_>>>()?;
    let spec = TemplateStudySpec {
        methods,
        target_step: a.target_step,
        seed: a.seed,
        ..TemplateStudySpec::new(
            &a.template,
            &a.pronoun,
            parse_terms(&read_text(&a.spec)?)?,
            (first, second),
        )
    };
    let result = run_template_study(&model, &spec)?;
    for (term, why) in &result.skipped {
        log::warn!("term {term:?} skipped: {why}");
    }
    let json = to_json(&result)?;
    write_study(result.into(), json, &a.output)
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let text = read_text(&a.corpus)?;
    let tokenizer = Tokenizer::from_corpus(text.lines());
    let base = match a.arch {
        ArchArg::DecoderOnly => ModelConfig::decoder_only(tokenizer.len()),
        ArchArg::EncoderDecoder => ModelConfig::encoder_decoder(tokenizer.len()),
    };
    let cfg = ModelConfig {
        d_model: a.d_model,
        n_heads: a.n_heads,
        d_ff: 2 * a.d_model,
        n_layers_dec: a.n_layers,
        n_layers_enc: if base.arch == Architecture::EncoderDecoder { a.n_layers } else { 0 },
        max_positions: a.max_positions,
        seed: a.seed,
        ..base
    };
    let model = ModelBundle::init_with_tokenizer(cfg, tokenizer)?;
    model.save(&a.output)
}

/// One-line error report.
pub fn error_line(e: &Error) -> String {
    format!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "))
}
