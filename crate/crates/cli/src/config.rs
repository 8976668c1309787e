//! Effective configuration: flags, then `CCAS_*` environment variables (both
//! handled by clap), then an optional TOML file, then built-in defaults.

use std::path::{Path, PathBuf};

use ccas_core::http::Credential;
use ccas_core::pipeline::PipelineConfig;
use ccas_core::{Error, Result, ScoreVariant};
use clap::Args;
use serde::Deserialize;

pub const LLM_KEY_VAR: &str = "CCAS_LLM_API_KEY";
pub const EMBED_KEY_VAR: &str = "CCAS_EMBED_API_KEY";

fn parse_variant(s: &str) -> Result<ScoreVariant> {
    s.parse()
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// TOML file with defaults for any of the options below.
    #[arg(long, env = "CCAS_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    /// Target class name.
    #[arg(long, env = "CCAS_TARGET", global = true)]
    pub target: Option<String>,
    /// Confounder class names, comma separated.
    #[arg(long, env = "CCAS_CONFOUNDERS", value_delimiter = ',', global = true)]
    pub confounders: Vec<String>,
    /// Prompts to request per class.
    #[arg(long, env = "CCAS_N", global = true)]
    pub n: Option<usize>,
    /// Use this pool JSON instead of generating one.
    #[arg(long, env = "CCAS_POOL_FILE", global = true)]
    pub pool_file: Option<PathBuf>,
    /// Embedding JSONL to read vectors from instead of (or before) the service.
    #[arg(long, env = "CCAS_EMBEDDINGS_FILE", global = true)]
    pub embeddings_file: Option<PathBuf>,
    /// Directory for the persistent embedding cache.
    #[arg(long, env = "CCAS_CACHE_DIR", global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible chat completions service.
    #[arg(long, env = "CCAS_LLM_BASE_URL", global = true)]
    pub llm_base_url: Option<String>,
    #[arg(long, env = "CCAS_LLM_MODEL", global = true)]
    pub llm_model: Option<String>,
    #[arg(long, env = "CCAS_TEMPERATURE", global = true)]
    pub temperature: Option<f64>,
    /// Retries after the first failed generation attempt.
    #[arg(long, env = "CCAS_MAX_RETRIES", global = true)]
    pub max_retries: Option<u32>,
    /// Base URL of an OpenAI-compatible embeddings service.
    #[arg(long, env = "CCAS_EMBED_BASE_URL", global = true)]
    pub embed_base_url: Option<String>,
    #[arg(long, env = "CCAS_EMBED_MODEL", global = true)]
    pub embed_model: Option<String>,
    /// Score used for ranking and selection: avg or max.
    #[arg(long, env = "CCAS_VARIANT", value_parser = parse_variant, global = true)]
    pub variant: Option<ScoreVariant>,
    /// Number of top prompts to select.
    #[arg(long, env = "CCAS_TOP", global = true)]
    pub top: Option<usize>,
    /// Keep each class name in its own pool.
    #[arg(
        long,
        env = "CCAS_INCLUDE_BASE_NAME",
        value_name = "BOOL",
        global = true
    )]
    pub include_base_name: Option<bool>,
    /// IoU above which same-image detections are suppressed when merging prompts.
    #[arg(long, env = "CCAS_NMS_IOU", global = true)]
    pub nms_iou: Option<f64>,
    /// Minimum IoU for a detection to match a ground-truth box.
    #[arg(long, env = "CCAS_IOU_THRESHOLD", global = true)]
    pub iou_threshold: Option<f64>,
    /// Ground-truth JSON for evaluation.
    #[arg(long, env = "CCAS_GT", global = true)]
    pub gt: Option<PathBuf>,
    /// Detection JSON files; files with the same config label are combined.
    #[arg(long, env = "CCAS_DETECTIONS", value_delimiter = ',', global = true)]
    pub detections: Vec<PathBuf>,
    /// Directory that receives every artifact.
    #[arg(long, env = "CCAS_OUT_DIR", global = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub target: Option<String>,
    pub confounders: Option<Vec<String>>,
    pub n: Option<usize>,
    pub pool_file: Option<PathBuf>,
    pub embeddings_file: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub llm_base_url: Option<String>,
    pub llm_model: Option<String>,
    pub temperature: Option<f64>,
    pub max_retries: Option<u32>,
    pub embed_base_url: Option<String>,
    pub embed_model: Option<String>,
    pub variant: Option<ScoreVariant>,
    pub top: Option<usize>,
    pub include_base_name: Option<bool>,
    pub nms_iou: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub gt: Option<PathBuf>,
    pub detections: Option<Vec<PathBuf>>,
    pub out_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn non_empty<T>(v: Vec<T>) -> Option<Vec<T>> {
    (!v.is_empty()).then_some(v)
}

/// Merge options with the config file and defaults. Credentials come only
/// from the environment.
pub fn resolve(opts: &Options) -> Result<PipelineConfig> {
    let file = match &opts.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let o = opts.clone();
    let d = PipelineConfig::default();
    let mut cfg = PipelineConfig {
        target: o.target.or(file.target),
        confounders: non_empty(o.confounders)
            .or(file.confounders)
            .unwrap_or_default()
            .into_iter()
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect(),
        n: o.n.or(file.n),
        pool_file: o.pool_file.or(file.pool_file),
        embeddings_file: o.embeddings_file.or(file.embeddings_file),
        cache_dir: o.cache_dir.or(file.cache_dir),
        temperature: o.temperature.or(file.temperature).unwrap_or(d.temperature),
        max_retries: o.max_retries.or(file.max_retries).unwrap_or(d.max_retries),
        variant: o.variant.or(file.variant).unwrap_or(d.variant),
        top: o.top.or(file.top).unwrap_or(d.top),
        include_base_name: o
            .include_base_name
            .or(file.include_base_name)
            .unwrap_or(d.include_base_name),
        nms_iou: o.nms_iou.or(file.nms_iou).unwrap_or(d.nms_iou),
        iou_threshold: o
            .iou_threshold
            .or(file.iou_threshold)
            .unwrap_or(d.iou_threshold),
        ground_truth_file: o.gt.or(file.gt),
        detection_files: non_empty(o.detections)
            .or(file.detections)
            .unwrap_or_default(),
        out_dir: o.out_dir.or(file.out_dir).unwrap_or(d.out_dir),
        ..d
    };
    cfg.llm.base_url = o.llm_base_url.or(file.llm_base_url);
    cfg.llm.model = o.llm_model.or(file.llm_model);
    cfg.llm.credential = Credential::from_env(LLM_KEY_VAR);
    cfg.embed.base_url = o.embed_base_url.or(file.embed_base_url);
    cfg.embed.model = o.embed_model.or(file.embed_model);
    cfg.embed.credential = Credential::from_env(EMBED_KEY_VAR);
    Ok(cfg)
}
