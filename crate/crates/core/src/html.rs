// SPDX-License-Identifier: MIT OR Apache-2.0

//! Static HTML heatmaps of attribution documents.
//!
//! One table per sequence: a column per attributed step, rows for source
//! tokens, then generated-prefix tokens, then one row per step score.
//! Attribution cells are shaded red for positive and blue for negative
//! values, with opacity scaled by the largest magnitude in the table.

use std::fmt::Write as _;
use std::path::Path;

use crate::aggregation::{run_pipeline, AggregatorPipeline};
use crate::attribution::SequenceAttribution;
use crate::error::{Error, Result};
use crate::io::AttributionDocument;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Colormap {
    pub positive: (u8, u8, u8),
    pub negative: (u8, u8, u8),
    pub decimals: usize,
}

impl Default for Colormap {
    fn default() -> Self {
        Self {
            positive: (214, 39, 40),
            negative: (31, 119, 180),
            decimals: 2,
        }
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn shaded_cell(out: &mut String, v: f64, scale: f64, cmap: &Colormap) {
    let alpha = if scale > 0.0 { (v.abs() / scale).min(1.0) } else { 0.0 };
    let (r, g, b) = if v >= 0.0 { cmap.positive } else { cmap.negative };
    let _ = write!(
        out,
        "<td class=\"attr\" style=\"background-color: rgba({r}, {g}, {b}, {alpha:.3})\">{v:.prec$}</td>",
        prec = cmap.decimals
    );
}

fn table(out: &mut String, index: usize, s: &SequenceAttribution, cmap: &Colormap) {
    let cols = s.n_columns();
    let src = &s.source_attr;
    let tgt = s.target_attr.as_ref();
    let mut scale = src.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(t) = tgt {
        scale = t.data().iter().fold(scale, |m, v| m.max(v.abs()));
    }

    let _ = writeln!(out, "<table class=\"attribution\" id=\"sequence-{index}\">");
    out.push_str("<tr><th></th>");
    for token in &s.step_tokens {
        let _ = write!(out, "<th>{}</th>", escape(token));
    }
    out.push_str("</tr>\n");

    for (row, token) in s.source_tokens.iter().enumerate() {
        let _ = write!(out, "<tr class=\"source\"><th>{}</th>", escape(token));
        for col in 0..cols {
            shaded_cell(out, src.at(&[row, col]), scale, cmap);
        }
        out.push_str("</tr>\n");
    }
    if let Some(t) = tgt {
        for (row, token) in s.target_tokens.iter().enumerate() {
            let _ = write!(out, "<tr class=\"target\"><th>{}</th>", escape(token));
            for col in 0..cols {
                if s.target_cell_populated(row, col) {
                    shaded_cell(out, t.at(&[row, col]), scale, cmap);
                } else {
                    out.push_str("<td class=\"empty\" style=\"background-color: #e0e0e0\"></td>");
                }
            }
            out.push_str("</tr>\n");
        }
    }
    for (name, values) in &s.step_scores {
        let _ = write!(out, "<tr class=\"score\"><th>{}</th>", escape(name));
        for v in values {
            let _ = write!(out, "<td class=\"score\">{v:.prec$}</td>", prec = cmap.decimals);
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n");
}

/// Renders a standalone page. Per-dimension attributions are first reduced
/// with the default token-level pipeline.
pub fn render_html(doc: &AttributionDocument, cmap: &Colormap) -> Result<String> {
    let pipeline = AggregatorPipeline::default_token_level();
    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Attributions</title>\n<style>\n\
         table.attribution { border-collapse: collapse; margin: 1em 0; font-family: monospace; }\n\
         table.attribution td, table.attribution th { border: 1px solid #ccc; padding: 2px 6px; text-align: right; }\n\
         </style>\n</head>\n<body>\n",
    );
    let _ = writeln!(
        out,
        "<p>model {} · method {}</p>",
        escape(&doc.metadata.model_name),
        doc.metadata.method.id.as_str()
    );
    for (i, s) in doc.sequences.iter().enumerate() {
        if s.is_per_dim() {
            table(&mut out, i, &run_pipeline(s, &pipeline, None)?, cmap);
        } else {
            table(&mut out, i, s, cmap);
        }
    }
    out.push_str("</body>\n</html>\n");
    Ok(out)
}

pub fn write_html(doc: &AttributionDocument, path: &Path, cmap: &Colormap) -> Result<()> {
    let html = render_html(doc, cmap)?;
    std::fs::write(path, html).map_err(|e| Error::io(path, e))
}

/// Standalone page with one shaded matrix. `None` cells render grey.
pub fn render_matrix_html(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<Option<f64>>],
    cmap: &Colormap,
) -> String {
    let scale = values.iter().flatten().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{0}</title>\n</head>\n<body>\n<h1>{0}</h1>\n",
        escape(title)
    );
    out.push_str("<table class=\"matrix\">\n<tr><th></th>");
    for c in col_labels {
        let _ = write!(out, "<th>{}</th>", escape(c));
    }
    out.push_str("</tr>\n");
    for (label, row) in row_labels.iter().zip(values) {
        let _ = write!(out, "<tr><th>{}</th>", escape(label));
        for v in row {
            match v {
                Some(v) => shaded_cell(&mut out, *v, scale, cmap),
                None => out.push_str("<td class=\"empty\" style=\"background-color: #e0e0e0\"></td>"),
            }
        }
        out.push_str("</tr>\n");
    }
    out.push_str("</table>\n</body>\n</html>\n");
    out
}
