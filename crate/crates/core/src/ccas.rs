//! Contrastive Class Alignment Score.
//!
//! A candidate prompt for the target class is scored by how closely its
//! embedding aligns with the embedding of the bare target class name, minus a
//! penalty for resembling prompts of the confounding classes:
//!
//! ```text
//! avg(t) = cos(t, T) - mean_{m,k} cos(t, c_{m,k})
//! max(t) = cos(t, T) - max_{m,k}  cos(t, c_{m,k})
//! ```
//!
//! The mean runs over every confounder prompt of every class, so pools of
//! unequal size are weighted per prompt rather than per class.

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{CcasRanking, EmbeddingVector, RankedPrompt, ScoreVariant};
use crate::similarity::{cosine_similarity, LabeledEmbedding};

/// Embeddings needed to score one target class.
#[derive(Debug, Clone)]
pub struct CcasInputs {
    base_class: EmbeddingVector,
    targets: Vec<LabeledEmbedding>,
    confounders: Vec<Vec<LabeledEmbedding>>,
}

impl CcasInputs {
    pub fn new(
        base_class: EmbeddingVector,
        targets: Vec<LabeledEmbedding>,
        confounders: Vec<Vec<LabeledEmbedding>>,
    ) -> Result<Self> {
        if confounders.is_empty() {
            return Err(Error::InvalidInput(
                "at least one confounding class is required".into(),
            ));
        }
        if let Some(m) = confounders.iter().position(Vec::is_empty) {
            return Err(Error::InvalidInput(format!(
                "confounder pool {} is empty",
                m + 1
            )));
        }
        let dim = base_class.dim();
        let model = base_class.model_id();
        for (text, e) in targets.iter().chain(confounders.iter().flatten()) {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: e.dim(),
                });
            }
            if e.model_id() != model {
                return Err(Error::InvalidInput(format!(
                    "embedding for {text:?} comes from model {:?}, expected {model:?}",
                    e.model_id()
                )));
            }
        }
        Ok(CcasInputs {
            base_class,
            targets,
            confounders,
        })
    }

    pub fn base_class(&self) -> &EmbeddingVector {
        &self.base_class
    }

    pub fn targets(&self) -> &[LabeledEmbedding] {
        &self.targets
    }

    pub fn confounders(&self) -> &[Vec<LabeledEmbedding>] {
        &self.confounders
    }

    fn confounder_vectors(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.confounders.iter().flatten().map(|(_, e)| e)
    }

    /// Total confounder prompt count, Σ_m N_m.
    pub fn confounder_prompt_count(&self) -> usize {
        self.confounders.iter().map(Vec::len).sum()
    }
}

pub fn ccas_avg(candidate: &EmbeddingVector, inputs: &CcasInputs) -> Result<f64> {
    let alignment = cosine_similarity(candidate, inputs.base_class())?;
    let (mut total, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for c in inputs.confounder_vectors() {
        let s = cosine_similarity(candidate, c)?;
        total += s;
        lo = lo.min(s);
        hi = hi.max(s);
    }
    // summation rounding can leave the mean a few ulps outside [min, max]
    let mean = (total / inputs.confounder_prompt_count() as f64).clamp(lo, hi);
    Ok(alignment - mean)
}

pub fn ccas_max(candidate: &EmbeddingVector, inputs: &CcasInputs) -> Result<f64> {
    let alignment = cosine_similarity(candidate, inputs.base_class())?;
    let mut worst = f64::NEG_INFINITY;
    for c in inputs.confounder_vectors() {
        worst = worst.max(cosine_similarity(candidate, c)?);
    }
    Ok(alignment - worst)
}

pub fn rank_prompts(inputs: &CcasInputs, variant: ScoreVariant) -> Result<CcasRanking> {
    rank_prompts_with(Execution::default(), inputs, variant)
}

/// Score every target candidate under both variants and sort by `variant`.
pub fn rank_prompts_with(
    exec: Execution,
    inputs: &CcasInputs,
    variant: ScoreVariant,
) -> Result<CcasRanking> {
    let scored: Vec<Result<RankedPrompt>> = exec.map(inputs.targets(), |(text, e)| {
        Ok(RankedPrompt {
            text: text.clone(),
            ccas_avg: ccas_avg(e, inputs)?,
            ccas_max: ccas_max(e, inputs)?,
        })
    });
    let entries = scored.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CcasRanking::from_entries(entries, variant))
}

/// The first `n` texts of a ranking (all of them when `n` exceeds its length).
pub fn select_top_n(ranking: &CcasRanking, n: usize) -> Result<Vec<String>> {
    if n == 0 {
        return Err(Error::InvalidArgument("top-n must be at least 1".into()));
    }
    Ok(ranking.texts().take(n).map(str::to_string).collect())
}
