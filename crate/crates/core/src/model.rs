//! Shared domain vocabulary: class specs, candidate prompts, pools,
//! embeddings, similarity matrices and rankings.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trim and collapse internal whitespace runs to a single space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Key used for uniqueness checks: normalized and lowercased.
pub fn comparison_key(text: &str) -> String {
    normalize_text(text).to_lowercase()
}

/// A target class and the classes it is commonly confused with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub target: String,
    pub confounders: Vec<String>,
    #[serde(rename = "n")]
    pub prompts_per_class: usize,
}

impl ClassSpec {
    pub fn new(
        target: impl Into<String>,
        confounders: impl IntoIterator<Item = impl Into<String>>,
        prompts_per_class: usize,
    ) -> Result<Self> {
        let spec = ClassSpec {
            target: normalize_text(&target.into()),
            confounders: confounders
                .into_iter()
                .map(|c| normalize_text(&c.into()))
                .collect(),
            prompts_per_class,
        };
        match spec.violations().into_iter().next() {
            None => Ok(spec),
            Some(v) => Err(Error::InvalidInput(v.to_string())),
        }
    }

    /// Number of confounding classes.
    pub fn confounder_count(&self) -> usize {
        self.confounders.len()
    }

    /// Target name followed by confounder names, in order.
    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.target.as_str()).chain(self.confounders.iter().map(String::as_str))
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.target.trim().is_empty() {
            out.push(Violation::InvalidSpec("target name is empty".into()));
        }
        if self.confounders.is_empty() {
            out.push(Violation::InvalidSpec(
                "at least one confounding class is required".into(),
            ));
        }
        let target_key = comparison_key(&self.target);
        let mut seen = HashSet::new();
        for name in &self.confounders {
            let key = comparison_key(name);
            if key.is_empty() {
                out.push(Violation::InvalidSpec("confounder name is empty".into()));
                continue;
            }
            if key == target_key {
                out.push(Violation::InvalidSpec(format!(
                    "target {:?} also listed as a confounder",
                    self.target
                )));
            }
            if !seen.insert(key) {
                out.push(Violation::InvalidSpec(format!(
                    "confounder {name:?} listed twice"
                )));
            }
        }
        if self.prompts_per_class == 0 {
            out.push(Violation::InvalidSpec(
                "prompts per class must be at least 1".into(),
            ));
        }
        out
    }
}

/// Which class pool a candidate belongs to. Confounder indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassRole {
    Target,
    Confounder(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    LlmGenerated,
    BaseClassName,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCandidate {
    pub text: String,
    pub role: ClassRole,
    pub source: CandidateSource,
}

impl PromptCandidate {
    pub fn new(text: &str, role: ClassRole, source: CandidateSource) -> Self {
        PromptCandidate {
            text: normalize_text(text),
            role,
            source,
        }
    }
}

/// Candidate prompts for the target class and for each confounding class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPool {
    pub spec: ClassSpec,
    pub targets: Vec<PromptCandidate>,
    /// Indexed by confounder position (`confounders[0]` is class m = 1).
    pub confounders: Vec<Vec<PromptCandidate>>,
}

impl PromptPool {
    /// Build a pool from raw per-class phrase lists (target first, then each
    /// confounder in spec order). Phrases are normalized, empty ones dropped,
    /// and case-insensitive duplicates removed keeping the first occurrence.
    /// With `include_base_name` the class name leads its own pool; without it
    /// any phrase equal to the class name is dropped.
    pub fn from_class_lists(
        spec: ClassSpec,
        lists: &[Vec<String>],
        source: CandidateSource,
        include_base_name: bool,
    ) -> Result<Self> {
        if lists.len() != spec.confounder_count() + 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} class lists, got {}",
                spec.confounder_count() + 1,
                lists.len()
            )));
        }
        let build = |name: &str, role: ClassRole, phrases: &[String]| {
            let base_key = comparison_key(name);
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            if include_base_name {
                seen.insert(base_key.clone());
                out.push(PromptCandidate::new(
                    name,
                    role,
                    CandidateSource::BaseClassName,
                ));
            }
            for phrase in phrases {
                let key = comparison_key(phrase);
                if key.is_empty() || key == base_key && !include_base_name {
                    continue;
                }
                if seen.insert(key) {
                    out.push(PromptCandidate::new(phrase, role, source));
                }
            }
            out
        };
        let targets = build(&spec.target, ClassRole::Target, &lists[0]);
        let confounders = spec
            .confounders
            .iter()
            .enumerate()
            .map(|(i, name)| build(name, ClassRole::Confounder(i + 1), &lists[i + 1]))
            .collect();
        Ok(PromptPool {
            spec,
            targets,
            confounders,
        })
    }

    /// Candidates of class `index` where 0 is the target and m ≥ 1 a confounder.
    pub fn class_candidates(&self, index: usize) -> &[PromptCandidate] {
        if index == 0 {
            &self.targets
        } else {
            &self.confounders[index - 1]
        }
    }

    /// Every candidate text, target pool first, deduplicated across pools.
    pub fn all_texts(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.targets
            .iter()
            .chain(self.confounders.iter().flatten())
            .filter(|c| seen.insert(c.text.clone()))
            .map(|c| c.text.clone())
            .collect()
    }
}

/// One problem found by [`validate_pool`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    InvalidSpec(String),
    EmptyText {
        class: String,
        position: usize,
    },
    UnnormalizedText {
        class: String,
        text: String,
    },
    DuplicateText {
        class: String,
        text: String,
    },
    RoleMismatch {
        class: String,
        text: String,
        role: ClassRole,
    },
    ConfounderIndexOutOfRange {
        text: String,
        index: usize,
    },
    EmptyTargetList,
    EmptyConfounderList {
        index: usize,
    },
    ConfounderCountMismatch {
        expected: usize,
        found: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidSpec(msg) => write!(f, "invalid class spec: {msg}"),
            Violation::EmptyText { class, position } => {
                write!(f, "class {class:?}: empty prompt at position {position}")
            }
            Violation::UnnormalizedText { class, text } => {
                write!(f, "class {class:?}: prompt {text:?} has stray whitespace")
            }
            Violation::DuplicateText { class, text } => {
                write!(f, "class {class:?}: duplicate prompt {text:?}")
            }
            Violation::RoleMismatch { class, text, role } => {
                write!(f, "class {class:?}: prompt {text:?} carries role {role:?}")
            }
            Violation::ConfounderIndexOutOfRange { text, index } => {
                write!(f, "prompt {text:?}: confounder index {index} out of range")
            }
            Violation::EmptyTargetList => write!(f, "target pool is empty"),
            Violation::EmptyConfounderList { index } => {
                write!(f, "confounder pool {index} is empty")
            }
            Violation::ConfounderCountMismatch { expected, found } => {
                write!(f, "expected {expected} confounder pools, found {found}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&lines.join("; "))
    }
}

/// Collect every invariant violation in `pool`. Never fails; an empty
/// report means the pool is usable.
pub fn validate_pool(pool: &PromptPool) -> ValidationReport {
    let mut violations = pool.spec.violations();
    let m = pool.spec.confounder_count();

    if pool.targets.is_empty() {
        violations.push(Violation::EmptyTargetList);
    }
    if pool.confounders.len() != m {
        violations.push(Violation::ConfounderCountMismatch {
            expected: m,
            found: pool.confounders.len(),
        });
    }
    check_class(
        &pool.spec.target,
        ClassRole::Target,
        &pool.targets,
        m,
        &mut violations,
    );
    for (i, list) in pool.confounders.iter().enumerate() {
        let index = i + 1;
        if list.is_empty() {
            violations.push(Violation::EmptyConfounderList { index });
        }
        let name = pool
            .spec
            .confounders
            .get(i)
            .map(String::as_str)
            .unwrap_or("<unknown>");
        check_class(name, ClassRole::Confounder(index), list, m, &mut violations);
    }
    ValidationReport { violations }
}

fn check_class(
    class: &str,
    expected: ClassRole,
    candidates: &[PromptCandidate],
    m: usize,
    out: &mut Vec<Violation>,
) {
    let mut seen = HashSet::new();
    for (position, c) in candidates.iter().enumerate() {
        if c.text.trim().is_empty() {
            out.push(Violation::EmptyText {
                class: class.to_string(),
                position,
            });
            continue;
        }
        if normalize_text(&c.text) != c.text {
            out.push(Violation::UnnormalizedText {
                class: class.to_string(),
                text: c.text.clone(),
            });
        }
        if let ClassRole::Confounder(index) = c.role {
            if index == 0 || index > m {
                out.push(Violation::ConfounderIndexOutOfRange {
                    text: c.text.clone(),
                    index,
                });
            }
        }
        if c.role != expected {
            out.push(Violation::RoleMismatch {
                class: class.to_string(),
                text: c.text.clone(),
                role: c.role,
            });
        }
        if !seen.insert(comparison_key(&c.text)) {
            out.push(Violation::DuplicateText {
                class: class.to_string(),
                text: c.text.clone(),
            });
        }
    }
}

/// A dense prompt embedding tagged with the model that produced it.
///
/// Construction rejects vectors with fewer than two components, non-finite
/// values, or all-zero values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    model_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model_id: impl Into<String>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "embedding dimension must be at least 2, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "embedding component {i} is not finite"
            )));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(EmbeddingVector {
            values,
            model_id: model_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        EmbeddingVector::new(
            self.values.iter().map(|v| v * k).collect(),
            self.model_id.clone(),
        )
    }
}

/// Target-candidate rows by confounder-candidate columns of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub row_labels: Vec<String>,
    /// Confounder candidates flattened, grouped by class in spec order.
    pub col_labels: Vec<String>,
    /// 1-based confounder class index of each column.
    pub col_class_index: Vec<usize>,
    pub cells: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row][col]
    }

    /// Mean similarity of each row, i.e. the averaging term of CCAS_avg.
    pub fn row_means(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreVariant {
    Avg,
    Max,
}

impl ScoreVariant {
    pub fn label(self) -> &'static str {
        match self {
            ScoreVariant::Avg => "CCAS_avg",
            ScoreVariant::Max => "CCAS_max",
        }
    }
}

impl fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreVariant::Avg => "avg",
            ScoreVariant::Max => "max",
        })
    }
}

impl FromStr for ScoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "avg" | "mean" => Ok(ScoreVariant::Avg),
            "max" => Ok(ScoreVariant::Max),
            other => Err(Error::InvalidArgument(format!(
                "unknown score variant {other:?} (expected avg or max)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrompt {
    pub text: String,
    pub ccas_avg: f64,
    pub ccas_max: f64,
}

impl RankedPrompt {
    pub fn score(&self, variant: ScoreVariant) -> f64 {
        match variant {
            ScoreVariant::Avg => self.ccas_avg,
            ScoreVariant::Max => self.ccas_max,
        }
    }
}

/// Candidates with both scores, ordered by one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcasRanking {
    pub variant: ScoreVariant,
    pub entries: Vec<RankedPrompt>,
}

impl CcasRanking {
    /// Sort `entries` descending by `variant`, ties by ascending text.
    pub fn from_entries(mut entries: Vec<RankedPrompt>, variant: ScoreVariant) -> Self {
        entries.sort_by(|a, b| ranking_order(a, b, variant));
        CcasRanking { variant, entries }
    }

    /// The same candidates ordered by the other (or same) variant.
    pub fn reordered(&self, variant: ScoreVariant) -> Self {
        CcasRanking::from_entries(self.entries.clone(), variant)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    pub fn is_sorted(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| ranking_order(&w[0], &w[1], self.variant) != Ordering::Greater)
    }
}

fn ranking_order(a: &RankedPrompt, b: &RankedPrompt, variant: ScoreVariant) -> Ordering {
    b.score(variant)
        .total_cmp(&a.score(variant))
        .then_with(|| a.text.cmp(&b.text))
}
