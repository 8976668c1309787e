//! Contrastive class alignment scoring for open-vocabulary detection prompts.
//!
//! A pool of candidate prompts is generated for a target class and its
//! confounder classes, embedded, and ranked by how much closer each target
//! prompt sits to the target class than to the confounders. Detector output
//! for the selected prompts can then be scored by AP@0.5.

pub mod ccas;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fsio;
pub mod generation;
pub mod http;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod similarity;

pub use ccas::{ccas_avg, ccas_max, rank_prompts, rank_prompts_with, select_top_n, CcasInputs};
pub use error::{Error, ErrorCategory, Result};
pub use exec::Execution;
pub use model::{
    validate_pool, CandidateSource, CcasRanking, ClassRole, ClassSpec, EmbeddingVector,
    PromptCandidate, PromptPool, RankedPrompt, ScoreVariant, SimilarityMatrix, ValidationReport,
    Violation,
};
pub use similarity::{build_similarity_matrix, cosine, cosine_similarity};
