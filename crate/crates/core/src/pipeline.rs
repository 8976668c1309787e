//! Staged pipeline: generate (or load) a pool, embed it, build the
//! similarity matrix, score and rank, select top prompts, and optionally
//! evaluate detector output. Each stage reads and writes documented files in
//! the output directory so stages can be re-run independently.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ccas::{rank_prompts, select_top_n, CcasInputs};
use crate::embedding::{
    load_embedding_file, save_embedding_file, Embedder, EmbeddingBackend, EmbeddingCache,
    EmbeddingTable, HttpEmbeddingBackend, DEFAULT_EMBEDDING_MODEL,
};
use crate::error::{Error, Result};
use crate::eval::{
    compare_configurations, load_detections, load_ground_truth, DetectionSet, EvalOptions,
    EvalResult, DEFAULT_IOU_THRESHOLD, DEFAULT_NMS_IOU,
};
use crate::fsio::{self, write_atomic};
use crate::generation::{
    apply_base_name_policy, generate_pool, load_pool_file, save_pool_file, ChatClient,
    GenerationRequest, DEFAULT_CHAT_MODEL,
};
use crate::http::Credential;
use crate::model::{
    validate_pool, CcasRanking, ClassSpec, EmbeddingVector, PromptPool, ScoreVariant,
    SimilarityMatrix,
};
use crate::report::{export_similarity_csv, render_ap_table, render_ranking_table};
use crate::similarity::{build_similarity_matrix, LabeledEmbedding};

pub const POOL_FILE: &str = "pool.json";
pub const RAW_REPLY_FILE: &str = "pool.raw.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const SIMILARITY_FILE: &str = "similarity.csv";
pub const RANKING_FILE: &str = "ranking.json";
pub const RANKING_AVG_TABLE: &str = "ranking_avg.txt";
pub const RANKING_MAX_TABLE: &str = "ranking_max.txt";
pub const SELECTED_FILE: &str = "selected.json";
pub const EVAL_FILE: &str = "eval.json";
pub const AP_TABLE: &str = "ap_table.txt";
pub const CONFIG_ECHO_FILE: &str = "config.json";

/// Top-n sizes written as ready-made detector configurations, besides the
/// baseline and the full ranked pool.
const CONFIGURATION_SIZES: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub base_url: Option<String>,
    pub model: Option<String>,
    #[serde(skip)]
    pub credential: Option<Credential>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub target: Option<String>,
    pub confounders: Vec<String>,
    pub n: Option<usize>,
    pub pool_file: Option<PathBuf>,
    pub embeddings_file: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub llm: ServiceConfig,
    pub temperature: f64,
    pub max_retries: u32,
    pub embed: ServiceConfig,
    pub variant: ScoreVariant,
    pub top: usize,
    pub include_base_name: bool,
    pub nms_iou: f64,
    pub iou_threshold: f64,
    pub ground_truth_file: Option<PathBuf>,
    pub detection_files: Vec<PathBuf>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target: None,
            confounders: Vec::new(),
            n: None,
            pool_file: None,
            embeddings_file: None,
            cache_dir: None,
            llm: ServiceConfig::default(),
            temperature: 1.0,
            max_retries: 2,
            embed: ServiceConfig::default(),
            variant: ScoreVariant::Max,
            top: 1,
            include_base_name: true,
            nms_iou: DEFAULT_NMS_IOU,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            ground_truth_file: None,
            detection_files: Vec::new(),
            out_dir: PathBuf::from("ccas-out"),
        }
    }
}

impl PipelineConfig {
    fn class_spec(&self) -> Result<ClassSpec> {
        let target = self
            .target
            .as_deref()
            .ok_or_else(|| Error::Config("--target is required without --pool-file".into()))?;
        if self.confounders.is_empty() {
            return Err(Error::Config(
                "--confounders is required without --pool-file".into(),
            ));
        }
        let n = self
            .n
            .ok_or_else(|| Error::Config("--n is required without --pool-file".into()))?;
        ClassSpec::new(target, self.confounders.clone(), n)
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks for the generate stage, run before any network traffic.
    pub fn check_generate(&self) -> Result<()> {
        self.class_spec()?;
        if self.llm.base_url.is_none() {
            return Err(Error::Config(
                "--llm-base-url is required to generate a pool (or pass --pool-file)".into(),
            ));
        }
        if self.llm.credential.is_none() {
            return Err(Error::Config(
                "no chat service credential set (CCAS_LLM_API_KEY)".into(),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(
                "temperature must be a finite value ≥ 0".into(),
            ));
        }
        Ok(())
    }

    pub fn check_embed(&self) -> Result<()> {
        if self.embeddings_file.is_none() && self.embed.base_url.is_none() {
            return Err(Error::Config(
                "pass --embeddings-file or --embed-base-url to obtain embeddings".into(),
            ));
        }
        if self.embed.base_url.is_some() && self.embed.credential.is_none() {
            return Err(Error::Config(
                "no embeddings service credential set (CCAS_EMBED_API_KEY)".into(),
            ));
        }
        Ok(())
    }

    pub fn check_select(&self) -> Result<()> {
        if self.top == 0 {
            return Err(Error::Config("--top must be at least 1".into()));
        }
        Ok(())
    }

    pub fn check_eval(&self) -> Result<()> {
        for (flag, v) in [
            ("--nms-iou", self.nms_iou),
            ("--iou-threshold", self.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{flag} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// All checks `run_pipeline` needs, so misconfiguration fails fast.
    pub fn check_pipeline(&self) -> Result<()> {
        if self.pool_file.is_none() {
            self.check_generate()?;
        }
        self.check_embed()?;
        self.check_select()?;
        self.check_eval()?;
        if self.ground_truth_file.is_some() != !self.detection_files.is_empty() {
            return Err(Error::Config(
                "evaluation needs both --gt and at least one --detections file".into(),
            ));
        }
        Ok(())
    }
}

fn out_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

pub fn ensure_out_dir(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))
}

/// Echo the effective configuration (credentials excluded) for audit.
pub fn write_effective_config(cfg: &PipelineConfig) -> Result<PathBuf> {
    let path = out_path(cfg, CONFIG_ECHO_FILE);
    let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Generate a pool from the chat service and persist it with the raw reply.
pub fn stage_generate(cfg: &PipelineConfig) -> Result<PromptPool> {
    cfg.check_generate()?;
    let spec = cfg.class_spec()?;
    let client = ChatClient::new(
        cfg.llm.base_url.as_deref().expect("checked"),
        cfg.llm.credential.clone(),
    );
    let request = GenerationRequest {
        spec,
        model_id: cfg
            .llm
            .model
            .clone()
            .unwrap_or_else(|| DEFAULT_CHAT_MODEL.into()),
        temperature: cfg.temperature,
        max_retries: cfg.max_retries,
        include_base_name: cfg.include_base_name,
    };
    let outcome = generate_pool(&client, &request)?;
    if outcome.retries > 0 {
        log::info!("pool generated after {} retries", outcome.retries);
    }
    write_atomic(&out_path(cfg, RAW_REPLY_FILE), outcome.raw_reply.as_bytes())?;
    save_pool_file(&outcome.pool, &out_path(cfg, POOL_FILE))?;
    Ok(outcome.pool)
}

/// Load `--pool-file`, apply the base-name policy and check it against any
/// class flags that were also given.
pub fn load_pool(cfg: &PipelineConfig, path: &Path) -> Result<PromptPool> {
    let pool = apply_base_name_policy(&load_pool_file(path)?, cfg.include_base_name);
    if let Some(target) = &cfg.target {
        let spec = &pool.spec;
        let same_confounders = cfg.confounders.is_empty() || cfg.confounders == spec.confounders;
        if *target != spec.target || !same_confounders {
            return Err(Error::Config(format!(
                "{} describes target {:?} with confounders {:?}, which disagrees with the flags",
                path.display(),
                spec.target,
                spec.confounders
            )));
        }
    }
    let report = validate_pool(&pool);
    if !report.is_valid() {
        return Err(Error::data_file(path, format!("invalid pool: {report}")));
    }
    Ok(pool)
}

fn load_or_generate_pool(cfg: &PipelineConfig) -> Result<PromptPool> {
    match &cfg.pool_file {
        Some(path) => {
            let pool = load_pool(cfg, path)?;
            save_pool_file(&pool, &out_path(cfg, POOL_FILE))?;
            Ok(pool)
        }
        None => stage_generate(cfg),
    }
}

/// Texts that need embeddings: the target class name, then every pool text.
fn texts_to_embed(pool: &PromptPool) -> Vec<String> {
    let mut seen = HashSet::new();
    std::iter::once(pool.spec.target.clone())
        .chain(pool.all_texts())
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// Embed every text the scoring stage needs and write `embeddings.jsonl`.
pub fn stage_embed(cfg: &PipelineConfig, pool: &PromptPool) -> Result<EmbeddingTable> {
    cfg.check_embed()?;
    let source = cfg
        .embeddings_file
        .as_deref()
        .map(load_embedding_file)
        .transpose()?;
    let model = match (
        &cfg.embed.model,
        source.as_ref().and_then(EmbeddingTable::model_id),
    ) {
        (Some(m), _) => m.clone(),
        (None, Some(m)) => m.to_string(),
        (None, None) => DEFAULT_EMBEDDING_MODEL.to_string(),
    };

    let cache = match &cfg.cache_dir {
        Some(dir) => EmbeddingCache::open(dir)?,
        None => EmbeddingCache::in_memory(),
    };
    if let Some(table) = &source {
        for (text, v) in table.iter() {
            cache.insert(text, v.clone())?;
        }
    }
    let backend: Option<Box<dyn EmbeddingBackend>> = cfg.embed.base_url.as_deref().map(|url| {
        Box::new(HttpEmbeddingBackend::new(url, cfg.embed.credential.clone()))
            as Box<dyn EmbeddingBackend>
    });
    let embedder = Embedder::new(backend, cache);

    let texts = texts_to_embed(pool);
    let vectors = embedder.embed_texts(&texts, &model)?;
    let mut table = EmbeddingTable::new();
    for (text, v) in texts.iter().zip(vectors) {
        table.insert(text, v)?;
    }
    save_embedding_file(&table, &out_path(cfg, EMBEDDINGS_FILE))?;
    Ok(table)
}

#[derive(Debug, Clone)]
pub struct ScoreArtifacts {
    pub matrix: SimilarityMatrix,
    pub ranking: CcasRanking,
}

fn lookup(table: &EmbeddingTable, text: &str) -> Result<EmbeddingVector> {
    table
        .get(text)
        .cloned()
        .ok_or_else(|| Error::InvalidInput(format!("no embedding for {text:?}")))
}

fn labeled(
    table: &EmbeddingTable,
    texts: &[crate::model::PromptCandidate],
) -> Result<Vec<LabeledEmbedding>> {
    texts
        .iter()
        .map(|c| Ok((c.text.clone(), lookup(table, &c.text)?)))
        .collect()
}

/// Build the similarity matrix and both CCAS rankings; write the CSV, the
/// ranking JSON and one text table per variant.
pub fn stage_score(
    cfg: &PipelineConfig,
    pool: &PromptPool,
    table: &EmbeddingTable,
) -> Result<ScoreArtifacts> {
    let targets = labeled(table, &pool.targets)?;
    let confounders = pool
        .confounders
        .iter()
        .map(|list| labeled(table, list))
        .collect::<Result<Vec<_>>>()?;
    let matrix = build_similarity_matrix(&targets, &confounders)?;
    let inputs = CcasInputs::new(lookup(table, &pool.spec.target)?, targets, confounders)?;
    let ranking = rank_prompts(&inputs, cfg.variant)?;

    export_similarity_csv(
        &matrix,
        &pool.spec.confounders,
        &out_path(cfg, SIMILARITY_FILE),
    )?;
    save_ranking(&ranking, &out_path(cfg, RANKING_FILE))?;
    for (variant, name) in [
        (ScoreVariant::Avg, RANKING_AVG_TABLE),
        (ScoreVariant::Max, RANKING_MAX_TABLE),
    ] {
        let text = render_ranking_table(&ranking.reordered(variant));
        write_atomic(&out_path(cfg, name), text.as_bytes())?;
    }
    Ok(ScoreArtifacts { matrix, ranking })
}

pub fn save_ranking(ranking: &CcasRanking, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(ranking).expect("ranking serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn load_ranking(path: &Path) -> Result<CcasRanking> {
    let text = fsio::read_to_string(path)?;
    let ranking: CcasRanking = serde_json::from_str(&text)
        .map_err(|e| Error::data_file(path, format!("malformed ranking: {e}")))?;
    Ok(ranking.reordered(ranking.variant))
}

/// A named prompt list to hand to the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptConfiguration {
    pub label: String,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub variant: ScoreVariant,
    pub top: usize,
    pub prompts: Vec<String>,
    /// Baseline plus top-1/3/5/N under both variants.
    pub configurations: Vec<PromptConfiguration>,
}

pub fn select(ranking: &CcasRanking, base_name: &str, top: usize) -> Result<Selection> {
    let prompts = select_top_n(ranking, top)?;
    let mut configurations = vec![PromptConfiguration {
        label: "Baseline".into(),
        prompts: vec![base_name.to_string()],
    }];
    for variant in [ScoreVariant::Avg, ScoreVariant::Max] {
        let ordered = ranking.reordered(variant);
        for n in CONFIGURATION_SIZES {
            configurations.push(PromptConfiguration {
                label: format!("CCAS_Top{n}_{variant}"),
                prompts: select_top_n(&ordered, n)?,
            });
        }
        configurations.push(PromptConfiguration {
            label: format!("CCAS_TopN_{variant}"),
            prompts: ordered.texts().map(str::to_string).collect(),
        });
    }
    Ok(Selection {
        variant: ranking.variant,
        top,
        prompts,
        configurations,
    })
}

pub fn stage_select(
    cfg: &PipelineConfig,
    ranking: &CcasRanking,
    base_name: &str,
) -> Result<Selection> {
    cfg.check_select()?;
    let selection = select(&ranking.reordered(cfg.variant), base_name, cfg.top)?;
    let text = serde_json::to_string_pretty(&selection).expect("selection serializes") + "\n";
    write_atomic(&out_path(cfg, SELECTED_FILE), text.as_bytes())?;
    Ok(selection)
}

/// Evaluate detection files against ground truth. Files sharing a config
/// label are concatenated into one configuration.
pub fn stage_eval(cfg: &PipelineConfig) -> Result<Vec<EvalResult>> {
    cfg.check_eval()?;
    let gt_path = cfg
        .ground_truth_file
        .as_deref()
        .ok_or_else(|| Error::Config("--gt is required for evaluation".into()))?;
    if cfg.detection_files.is_empty() {
        return Err(Error::Config(
            "at least one --detections file is required".into(),
        ));
    }
    let gt = load_ground_truth(gt_path)?;

    let mut configs: Vec<DetectionSet> = Vec::new();
    for path in &cfg.detection_files {
        let set = load_detections(path)?;
        match configs
            .iter_mut()
            .find(|c| c.config_label == set.config_label)
        {
            Some(existing) => {
                for (image, dets) in set.images {
                    existing.images.entry(image).or_default().extend(dets);
                }
            }
            None => configs.push(set),
        }
    }
    let options = EvalOptions {
        nms_iou: cfg.nms_iou,
        iou_threshold: cfg.iou_threshold,
    };
    let results = compare_configurations(&gt, &configs, options).map_err(|e| match e {
        Error::UndefinedMetric(msg) => {
            Error::UndefinedMetric(format!("{}: {msg}", gt_path.display()))
        }
        Error::InvalidInput(msg) => Error::data_file(gt_path, msg),
        other => other,
    })?;

    let text = serde_json::to_string_pretty(&results).expect("results serialize") + "\n";
    write_atomic(&out_path(cfg, EVAL_FILE), text.as_bytes())?;
    write_atomic(
        &out_path(cfg, AP_TABLE),
        render_ap_table(&results).as_bytes(),
    )?;
    Ok(results)
}

pub fn load_eval_results(path: &Path) -> Result<Vec<EvalResult>> {
    let text = fsio::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::data_file(path, format!("malformed results: {e}")))
}

#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub pool: PromptPool,
    pub scores: ScoreArtifacts,
    pub selection: Selection,
    pub evaluation: Option<Vec<EvalResult>>,
}

/// Run every stage end to end into `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.check_pipeline()?;
    ensure_out_dir(cfg)?;
    write_effective_config(cfg)?;

    let pool = load_or_generate_pool(cfg)?;
    let table = stage_embed(cfg, &pool)?;
    let scores = stage_score(cfg, &pool, &table)?;
    let selection = stage_select(cfg, &scores.ranking, &pool.spec.target)?;
    let evaluation = if cfg.ground_truth_file.is_some() {
        Some(stage_eval(cfg)?)
    } else {
        None
    };
    Ok(PipelineSummary {
        pool,
        scores,
        selection,
        evaluation,
    })
}
