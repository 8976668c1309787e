//! Prompt embeddings: an OpenAI-compatible `/embeddings` client, a
//! content-addressed cache, and the JSON Lines embedding file.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsio;
use crate::http::{Credential, HttpClient, RetryPolicy};
use crate::model::{normalize_text, EmbeddingVector};

pub const DEFAULT_EMBEDDING_MODEL: &str = "all-MiniLM-L6-v2";
const CACHE_FILE: &str = "embeddings-cache.jsonl";

/// Anything that turns a batch of texts into raw vectors, one per text.
pub trait EmbeddingBackend: Send + Sync {
    fn embed_batch(&self, texts: &[String], model_id: &str) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone)]
pub struct HttpEmbeddingBackend {
    http: HttpClient,
    retry: RetryPolicy,
}

impl HttpEmbeddingBackend {
    pub fn new(base_url: &str, credential: Option<Credential>) -> Self {
        HttpEmbeddingBackend {
            http: HttpClient::new(base_url, credential, Duration::from_secs(60)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, texts: &[String], model_id: &str) -> Result<Vec<Vec<f64>>> {
        let reply = self
            .http
            .post_json("embeddings", &json!({"model": model_id, "input": texts}))?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Parse {
                message: "embeddings reply has no data array".into(),
                raw: reply.to_string(),
            })?;

        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map_or(pos, |i| i as usize);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                .ok_or_else(|| Error::Parse {
                    message: format!("data[{pos}].embedding is not a numeric array"),
                    raw: reply.to_string(),
                })?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        let indices_ok = rows.iter().enumerate().all(|(i, (idx, _))| i == *idx);
        if rows.len() != texts.len() || !indices_ok {
            return Err(Error::ProviderInconsistency(format!(
                "requested {} embeddings, received {}{}",
                texts.len(),
                rows.len(),
                if indices_ok {
                    ""
                } else {
                    " with inconsistent indices"
                }
            )));
        }
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

impl EmbeddingBackend for HttpEmbeddingBackend {
    fn embed_batch(&self, texts: &[String], model_id: &str) -> Result<Vec<Vec<f64>>> {
        self.retry.run(|_| self.attempt(texts, model_id)).0
    }
}

/// Cache key: sha256 over the model id and the whitespace-normalized text.
pub fn cache_key(model_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(normalize_text(text).as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    model: String,
    text: String,
    vector: Vec<f64>,
}

/// In-memory embedding cache, optionally mirrored to a JSONL file in a
/// directory. Many readers may look up concurrently; writes are exclusive.
/// The cache never affects results, only how often the backend is called.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, EmbeddingVector>>,
    file: Option<Mutex<PathBuf>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a persistent cache in `dir`. Unreadable lines in an
    /// existing cache file are skipped.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            for (n, line) in fsio::read_to_string(&path)?.lines().enumerate() {
                let Ok(rec) = serde_json::from_str::<CacheRecord>(line) else {
                    log::warn!(
                        "{}:{}: skipping unreadable cache line",
                        path.display(),
                        n + 1
                    );
                    continue;
                };
                if let Ok(v) = EmbeddingVector::new(rec.vector, rec.model) {
                    entries.insert(rec.key, v);
                }
            }
        }
        Ok(EmbeddingCache {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(path)),
        })
    }

    pub fn get(&self, model_id: &str, text: &str) -> Option<EmbeddingVector> {
        let entries = self.entries.read().unwrap_or_else(|e| e.into_inner());
        entries.get(&cache_key(model_id, text)).cloned()
    }

    pub fn insert(&self, text: &str, vector: EmbeddingVector) -> Result<()> {
        let key = cache_key(vector.model_id(), text);
        if self
            .entries
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&key)
            == Some(&vector)
        {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let path = file.lock().unwrap_or_else(|e| e.into_inner());
            let rec = CacheRecord {
                key: key.clone(),
                model: vector.model_id().to_string(),
                text: normalize_text(text),
                vector: vector.values().to_vec(),
            };
            let mut line = serde_json::to_string(&rec).expect("cache record serializes");
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&*path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| Error::io(&*path, e))?;
        }
        let mut entries = self.entries.write().unwrap_or_else(|e| e.into_inner());
        entries.insert(key, vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resolves texts to embeddings through the cache, calling the backend
/// (if any) in batches for the misses.
pub struct Embedder {
    backend: Option<Box<dyn EmbeddingBackend>>,
    cache: EmbeddingCache,
    batch_size: usize,
}

impl Embedder {
    pub fn new(backend: Option<Box<dyn EmbeddingBackend>>, cache: EmbeddingCache) -> Self {
        Embedder {
            backend,
            cache,
            batch_size: 64,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// One vector per input text, in input order, all of one dimension.
    pub fn embed_texts(&self, texts: &[String], model_id: &str) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(Error::InvalidInput("no texts to embed".into()));
        }
        let normalized: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();
        if let Some(i) = normalized.iter().position(String::is_empty) {
            return Err(Error::InvalidInput(format!("text {i} is empty")));
        }

        let mut seen = HashSet::new();
        let missing: Vec<String> = normalized
            .iter()
            .filter(|t| self.cache.get(model_id, t).is_none() && seen.insert(t.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            let backend = self.backend.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "no embedding for {:?} (model {model_id:?}) and no embeddings service configured",
                    missing[0]
                ))
            })?;
            for batch in missing.chunks(self.batch_size) {
                let vectors = backend.embed_batch(batch, model_id)?;
                if vectors.len() != batch.len() {
                    return Err(Error::ProviderInconsistency(format!(
                        "requested {} embeddings, received {}",
                        batch.len(),
                        vectors.len()
                    )));
                }
                for (text, values) in batch.iter().zip(vectors) {
                    let v = EmbeddingVector::new(values, model_id).map_err(|e| {
                        Error::ProviderInconsistency(format!("embedding for {text:?}: {e}"))
                    })?;
                    self.cache.insert(text, v)?;
                }
            }
        }

        let out: Vec<EmbeddingVector> = normalized
            .iter()
            .map(|t| self.cache.get(model_id, t).expect("embedded above"))
            .collect();
        let dim = out[0].dim();
        if let Some((i, v)) = out.iter().enumerate().find(|(_, v)| v.dim() != dim) {
            return Err(Error::ProviderInconsistency(format!(
                "embedding for {:?} has dimension {}, expected {dim}",
                normalized[i],
                v.dim()
            )));
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct FileRecord<V> {
    text: String,
    model: String,
    vector: V,
}

/// Embeddings keyed by text, in file order. All records share one model
/// and one dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    records: Vec<(String, EmbeddingVector)>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a record. Rejects a second model or dimension, and a repeated text
    /// whose vector differs from the first.
    pub fn insert(&mut self, text: &str, vector: EmbeddingVector) -> Result<()> {
        let text = normalize_text(text);
        if let Some((_, first)) = self.records.first() {
            if first.model_id() != vector.model_id() {
                return Err(Error::InvalidInput(format!(
                    "model {:?} for {text:?} differs from {:?}",
                    vector.model_id(),
                    first.model_id()
                )));
            }
            if first.dim() != vector.dim() {
                return Err(Error::InvalidInput(format!(
                    "dimension {} for {text:?} differs from {}",
                    vector.dim(),
                    first.dim()
                )));
            }
        }
        match self.index.get(&text) {
            Some(&i) if self.records[i].1 == vector => Ok(()),
            Some(_) => Err(Error::InvalidInput(format!(
                "{text:?} appears twice with different vectors"
            ))),
            None => {
                self.index.insert(text.clone(), self.records.len());
                self.records.push((text, vector));
                Ok(())
            }
        }
    }

    pub fn get(&self, text: &str) -> Option<&EmbeddingVector> {
        self.index
            .get(&normalize_text(text))
            .map(|&i| &self.records[i].1)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn model_id(&self) -> Option<&str> {
        self.records.first().map(|(_, v)| v.model_id())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.records.iter().map(|(t, v)| (t.as_str(), v))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (text, v) in &self.records {
            let rec = FileRecord {
                text: text.clone(),
                model: v.model_id().to_string(),
                vector: v.values(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut table = EmbeddingTable::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FileRecord<Vec<f64>> =
                serde_json::from_str(line).map_err(|e| Error::EmbeddingFormat {
                    line: Some(line_no),
                    message: e.to_string(),
                })?;
            let vector = match EmbeddingVector::new(rec.vector, rec.model) {
                Ok(v) => v,
                Err(Error::ZeroVector) => {
                    return Err(Error::EmbeddingFormat {
                        line: Some(line_no),
                        message: format!("zero vector for {:?}", rec.text),
                    })
                }
                Err(e) => {
                    return Err(Error::EmbeddingFormat {
                        line: Some(line_no),
                        message: format!("{:?}: {e}", rec.text),
                    })
                }
            };
            table
                .insert(&rec.text, vector)
                .map_err(|e| Error::EmbeddingFormat {
                    line: Some(line_no),
                    message: e.to_string(),
                })?;
        }
        Ok(table)
    }
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable> {
    let text = fsio::read_to_string(path)?;
    EmbeddingTable::from_jsonl(&text).map_err(|e| Error::data_file(path, e.to_string()))
}

pub fn save_embedding_file(table: &EmbeddingTable, path: &Path) -> Result<()> {
    fsio::write_atomic(path, table.to_jsonl().as_bytes())
}
