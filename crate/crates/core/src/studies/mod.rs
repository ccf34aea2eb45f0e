// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analysis workflows built on the attribution engine: template-based
//! contrastive bias probing with rank correlation, and layer-wise
//! contrastive attribution tracing.

mod cat;
mod kendall;
mod template;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use cat::{parse_records, run_cat_study, CatResult, RecordTrace, RoleBucket, TraceRecord, TraceStudySpec};
pub use kendall::{kendall_tau, kendall_tau_naive, kendall_tau_with, KendallTau, PValueMethod, EXACT_MAX_N};
pub use template::{
    parse_terms, planted_bias_model, run_template_study, Case, CaseMetrics, CorrelationCell, Position,
    TemplateStudyResult, TemplateStudySpec, TermMetrics, TermStat, SIGNIFICANCE, SLOT,
};

use crate::error::{Error, Result};
use crate::html::{render_matrix_html, Colormap};

#[derive(Debug, Clone, PartialEq)]
pub enum StudyResult {
    Template(TemplateStudyResult),
    Cat(CatResult),
}

impl From<TemplateStudyResult> for StudyResult {
    fn from(r: TemplateStudyResult) -> Self {
        StudyResult::Template(r)
    }
}

impl From<CatResult> for StudyResult {
    fn from(r: CatResult) -> Self {
        StudyResult::Cat(r)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

const GRID_COLUMNS: [(Case, Position, &str); 4] = [
    (Case::Base, Position::Pron, "base x_pron"),
    (Case::Base, Position::Occ, "base x_occ"),
    (Case::Swap, Position::Pron, "swap x_pron"),
    (Case::Swap, Position::Occ, "swap x_occ"),
];

/// Tab-separated table of one study: one row per processed term, or one
/// row per layer.
pub fn study_table(result: &StudyResult) -> String {
    let mut out = String::new();
    match result {
        StudyResult::Template(r) => {
            let methods: Vec<String> = r.metric_names().into_iter().filter(|m| m != "p").collect();
            out.push_str("term\tstatistic\tbase_p\tswap_p");
            for m in &methods {
                let _ = write!(out, "\tbase_{m}_pron\tbase_{m}_occ\tswap_{m}_pron\tswap_{m}_occ");
            }
            out.push('\n');
            for t in &r.terms {
                let _ = write!(out, "{}\t{}\t{}\t{}", t.term, t.statistic, t.base.probability, t.swap.probability);
                for m in &methods {
                    let b = t.base.attributions.get(m).copied();
                    let s = t.swap.attributions.get(m).copied();
                    let _ = write!(
                        out,
                        "\t{}\t{}\t{}\t{}",
                        cell(b.map(|v| v.0)),
                        cell(b.map(|v| v.1)),
                        cell(s.map(|v| v.0)),
                        cell(s.map(|v| v.1))
                    );
                }
                out.push('\n');
            }
        }
        StudyResult::Cat(r) => {
            out.push_str("layer");
            for b in &r.buckets {
                let _ = write!(out, "\t{}", b.as_str());
            }
            out.push('\n');
            for (layer, row) in r.layers.iter().zip(&r.matrix) {
                let _ = write!(out, "{layer}");
                for v in row {
                    let _ = write!(out, "\t{}", cell(*v));
                }
                out.push('\n');
            }
        }
    }
    out
}

/// HTML heatmap: the τ grid of a template study, or the layer × bucket
/// matrix of a tracing study.
pub fn study_html(result: &StudyResult) -> String {
    let cmap = Colormap::default();
    match result {
        StudyResult::Template(r) => {
            let rows = r.metric_names();
            let cols: Vec<String> = GRID_COLUMNS.iter().map(|c| c.2.to_string()).collect();
            let values: Vec<Vec<Option<f64>>> = rows
                .iter()
                .map(|m| {
                    GRID_COLUMNS
                        .iter()
                        .map(|&(case, pos, _)| r.cell(m, case, pos).and_then(|c| c.tau))
                        .collect()
                })
                .collect();
            render_matrix_html("Kendall tau", &rows, &cols, &values, &cmap)
        }
        StudyResult::Cat(r) => {
            let rows: Vec<String> = r.layers.iter().map(|l| format!("layer {l}")).collect();
            let cols: Vec<String> = r.buckets.iter().map(|b| b.as_str().to_string()).collect();
            render_matrix_html("Gradient x layer activation", &rows, &cols, &r.matrix, &cmap)
        }
    }
}

/// Writes `<stem>.tsv` and `<stem>.html`.
pub fn export_study(result: &StudyResult, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let tsv = stem.with_extension("tsv");
    let html = stem.with_extension("html");
    std::fs::write(&tsv, study_table(result)).map_err(|e| Error::io(&tsv, e))?;
    std::fs::write(&html, study_html(result)).map_err(|e| Error::io(&html, e))?;
    Ok((tsv, html))
}
