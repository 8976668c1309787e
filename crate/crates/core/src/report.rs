//! Report emitters. Every function here is a pure function of its inputs,
//! so identical inputs always produce identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::fsio;
use crate::model::{CcasRanking, SimilarityMatrix};

/// CSV body for a similarity matrix: a `target` corner cell, one column per
/// confounder prompt labelled `<confounder class>:<prompt>`, and cells at six
/// decimals.
pub fn similarity_csv(matrix: &SimilarityMatrix, confounder_names: &[String]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = Vec::with_capacity(matrix.cols() + 1);
    header.push("target".to_string());
    for (label, &m) in matrix.col_labels.iter().zip(&matrix.col_class_index) {
        let class = confounder_names
            .get(m.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidInput(format!("no name for confounder class {m}")))?;
        header.push(format!("{class}:{label}"));
    }
    let to_err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(&header).map_err(to_err)?;
    for (label, row) in matrix.row_labels.iter().zip(&matrix.cells) {
        let mut record = Vec::with_capacity(row.len() + 1);
        record.push(label.clone());
        record.extend(row.iter().map(|&v| fixed(v, 6)));
        w.write_record(&record).map_err(to_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields is utf-8"))
}

pub fn export_similarity_csv(
    matrix: &SimilarityMatrix,
    confounder_names: &[String],
    path: &Path,
) -> Result<()> {
    fsio::write_atomic(path, similarity_csv(matrix, confounder_names)?.as_bytes())
}

/// Two-column table of prompts and scores (4 decimals) in ranked order.
pub fn render_ranking_table(ranking: &CcasRanking) -> String {
    let rows: Vec<(&str, String)> = ranking
        .entries
        .iter()
        .map(|e| (e.text.as_str(), fixed(e.score(ranking.variant), 4)))
        .collect();
    render_two_columns(("Prompt", ranking.variant.label()), &rows)
}

/// Configuration labels with their AP (4 decimals), in input order.
pub fn render_ap_table(results: &[EvalResult]) -> String {
    let rows: Vec<(&str, String)> = results
        .iter()
        .map(|r| (r.config_label.as_str(), fixed(r.ap, 4)))
        .collect();
    render_two_columns(("Prompt Configuration", "AP"), &rows)
}

/// Fixed-point text that never shows a negative zero.
fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

/// Header then one `label  value` line per row, two spaces apart.
fn render_two_columns(header: (&str, &str), rows: &[(&str, String)]) -> String {
    let mut out = format!("{}  {}\n", header.0, header.1);
    for (l, r) in rows {
        out.push_str(&format!("{l}  {r}\n"));
    }
    out
}
