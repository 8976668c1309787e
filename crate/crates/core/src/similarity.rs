//! Cosine similarity and target-by-confounder similarity matrices.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{EmbeddingVector, SimilarityMatrix};

/// Cosine similarity of two raw vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (norm_a.sqrt() * norm_b.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine(a.values(), b.values())
}

pub type LabeledEmbedding = (String, EmbeddingVector);

pub fn build_similarity_matrix(
    targets: &[LabeledEmbedding],
    confounders: &[Vec<LabeledEmbedding>],
) -> Result<SimilarityMatrix> {
    build_similarity_matrix_with(Execution::default(), targets, confounders)
}

/// Like [`build_similarity_matrix`] with an explicit execution mode. Rows are
/// computed independently; the result is identical in either mode.
pub fn build_similarity_matrix_with(
    exec: Execution,
    targets: &[LabeledEmbedding],
    confounders: &[Vec<LabeledEmbedding>],
) -> Result<SimilarityMatrix> {
    let columns: Vec<(usize, &LabeledEmbedding)> = confounders
        .iter()
        .enumerate()
        .flat_map(|(m, list)| list.iter().map(move |c| (m + 1, c)))
        .collect();
    if targets.is_empty() || columns.is_empty() {
        return Err(Error::InvalidInput(
            "similarity matrix needs at least one target and one confounder candidate".into(),
        ));
    }

    let rows: Vec<Result<Vec<f64>>> = exec.map_range(targets.len(), |row| {
        let target = &targets[row].1;
        columns
            .iter()
            .enumerate()
            .map(|(col, (_, (_, conf)))| {
                cosine_similarity(target, conf).map_err(|e| Error::AtCell {
                    row,
                    col,
                    source: Box::new(e),
                })
            })
            .collect()
    });

    Ok(SimilarityMatrix {
        row_labels: targets.iter().map(|(t, _)| t.clone()).collect(),
        col_labels: columns.iter().map(|(_, (t, _))| t.clone()).collect(),
        col_class_index: columns.iter().map(|(m, _)| *m).collect(),
        cells: rows.into_iter().collect::<Result<_>>()?,
    })
}
