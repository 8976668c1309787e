//! Candidate prompt pools: the generation request sent to a chat model, a
//! tolerant parser for its reply, and the JSON pool file.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::fsio;
use crate::http::{Credential, HttpClient, RetryPolicy};
use crate::model::{
    comparison_key, normalize_text, validate_pool, CandidateSource, ClassRole, ClassSpec,
    PromptCandidate, PromptPool,
};

const TEMPLATE_HEAD: &str = "Generate an extensive list of possible descriptions, synonyms, \
and detection-oriented prompts without negatives, limiting the prompt to a phrase, to detect \
the following base object classes with ";
const TEMPLATE_MID: &str = " prompts per class, intended for use with a vision-language model: ";

pub const DEFAULT_CHAT_MODEL: &str = "gpt-4o";

/// The generation instruction for `spec`: fixed wording with the per-class
/// count and the class list (target first) filled in.
pub fn render_generation_prompt(spec: &ClassSpec) -> String {
    let classes: Vec<&str> = spec.class_names().collect();
    format!(
        "{TEMPLATE_HEAD}{}{TEMPLATE_MID}{}",
        spec.prompts_per_class,
        classes.join(", ")
    )
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub spec: ClassSpec,
    pub model_id: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub include_base_name: bool,
}

impl GenerationRequest {
    pub fn new(spec: ClassSpec) -> Self {
        GenerationRequest {
            spec,
            model_id: DEFAULT_CHAT_MODEL.to_string(),
            temperature: 1.0,
            max_retries: 2,
            include_base_name: true,
        }
    }
}

/// A generated pool together with what it took to get it.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub pool: PromptPool,
    pub raw_reply: String,
    pub retries: u32,
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct ChatClient {
    http: HttpClient,
    retry: RetryPolicy,
}

impl ChatClient {
    pub fn new(base_url: &str, credential: Option<Credential>) -> Self {
        ChatClient {
            http: HttpClient::new(base_url, credential, Duration::from_secs(120)),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry_delays(mut self, base: Duration, max: Duration) -> Self {
        self.retry.base_delay = base;
        self.retry.max_delay = max;
        self
    }

    /// Single attempt: one user message, first choice's content.
    pub fn complete(&self, model: &str, content: &str, temperature: f64) -> Result<String> {
        let body = json!({
            "model": model,
            "messages": [{"role": "user", "content": content}],
            "temperature": temperature,
        });
        let reply = self.http.post_json("chat/completions", &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse {
                message: "reply has no choices[0].message.content".into(),
                raw: reply.to_string(),
            })
    }
}

/// Ask the chat model for candidate prompts and parse them into a pool.
///
/// Transport failures, 429/5xx statuses and unusable replies are retried up
/// to `request.max_retries` times with exponential backoff.
pub fn generate_pool(
    client: &ChatClient,
    request: &GenerationRequest,
) -> Result<GenerationOutcome> {
    if request.model_id.trim().is_empty() {
        return Err(Error::Config("chat model id is empty".into()));
    }
    let prompt = render_generation_prompt(&request.spec);
    let policy = RetryPolicy {
        max_retries: request.max_retries,
        ..client.retry
    };
    let (outcome, retries) = policy.run_when(
        |e| {
            e.is_retriable()
                || matches!(e, Error::Parse { .. } | Error::GenerationIncomplete { .. })
        },
        |_| {
            let raw = client.complete(&request.model_id, &prompt, request.temperature)?;
            let pool = parse_pool_reply(&raw, &request.spec, request.include_base_name)?;
            Ok((pool, raw))
        },
    );
    let (pool, raw_reply) = outcome?;
    Ok(GenerationOutcome {
        pool,
        raw_reply,
        retries,
    })
}

/// Parse a chat reply into a pool. Accepts either a JSON object mapping
/// class names to phrase arrays, or per-class header lines followed by
/// bulleted or numbered phrases. Headers are matched to classes
/// case-insensitively by substring.
pub fn parse_pool_reply(
    raw: &str,
    spec: &ClassSpec,
    include_base_name: bool,
) -> Result<PromptPool> {
    if raw.trim().is_empty() {
        return Err(Error::Parse {
            message: "reply is empty".into(),
            raw: raw.to_string(),
        });
    }
    let matcher = ClassMatcher::new(spec);
    let lists = parse_json_reply(raw, &matcher).unwrap_or_else(|| parse_text_reply(raw, &matcher));

    if lists.iter().all(Vec::is_empty) {
        return Err(Error::Parse {
            message: "no per-class prompt lists recognized".into(),
            raw: raw.to_string(),
        });
    }

    // A phrase belongs to the first class that claims it; each class name is
    // pre-claimed by its own class.
    let mut owner: HashMap<String, usize> = matcher
        .keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.clone(), i))
        .collect();
    let mut deduped = vec![Vec::new(); lists.len()];
    for (class, list) in lists.into_iter().enumerate() {
        for phrase in list {
            let key = comparison_key(&phrase);
            if *owner.entry(key).or_insert(class) == class {
                deduped[class].push(phrase);
            }
        }
    }
    if let Some(i) = deduped.iter().position(Vec::is_empty) {
        return Err(Error::GenerationIncomplete {
            class: matcher.names[i].clone(),
            raw: raw.to_string(),
        });
    }
    PromptPool::from_class_lists(
        spec.clone(),
        &deduped,
        CandidateSource::LlmGenerated,
        include_base_name,
    )
}

struct ClassMatcher {
    names: Vec<String>,
    keys: Vec<String>,
}

impl ClassMatcher {
    fn new(spec: &ClassSpec) -> Self {
        let names: Vec<String> = spec.class_names().map(str::to_string).collect();
        let keys = names.iter().map(|n| comparison_key(n)).collect();
        ClassMatcher { names, keys }
    }

    /// Exact match up to case, whitespace, and a plural suffix.
    fn exact(&self, text: &str) -> Option<usize> {
        let key = header_key(text);
        self.keys.iter().position(|k| {
            key == *k
                || key.strip_suffix("es") == Some(k)
                || key.strip_suffix('s') == Some(k)
                || k.strip_suffix('s') == Some(&key)
        })
    }

    /// Substring match in either direction. When several names match, those
    /// contained in another matched name are dropped ("glasses" inside
    /// "sunglasses"); anything still ambiguous is no match.
    fn fuzzy(&self, text: &str) -> Option<usize> {
        if let Some(i) = self.exact(text) {
            return Some(i);
        }
        let key = header_key(text);
        if key.is_empty() {
            return None;
        }
        let hits: Vec<usize> = (0..self.keys.len())
            .filter(|&i| {
                key.contains(&self.keys[i])
                    || format!(" {} ", self.keys[i]).contains(&format!(" {key} "))
            })
            .collect();
        let maximal: Vec<usize> = hits
            .iter()
            .copied()
            .filter(|&i| {
                !hits.iter().any(|&j| {
                    j != i
                        && self.keys[j].len() > self.keys[i].len()
                        && self.keys[j].contains(&self.keys[i])
                })
            })
            .collect();
        match maximal.as_slice() {
            [only] => Some(*only),
            _ => None,
        }
    }
}

fn header_key(text: &str) -> String {
    comparison_key(text.trim_matches(|c: char| !c.is_alphanumeric()))
}

fn parse_json_reply(raw: &str, matcher: &ClassMatcher) -> Option<Vec<Vec<String>>> {
    let object = extract_json_object(raw)?;
    let mut lists = vec![Vec::new(); matcher.names.len()];
    let mut matched = false;
    for (key, value) in object {
        let Some(class) = matcher.fuzzy(&key) else {
            continue;
        };
        matched = true;
        if let Value::Array(items) = value {
            lists[class].extend(items.iter().filter_map(Value::as_str).map(clean_phrase));
        }
    }
    matched.then_some(lists)
}

fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let trimmed = raw.trim();
    if let Ok(Value::Object(m)) = serde_json::from_str(trimmed) {
        return Some(m);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str(&trimmed[start..=end]) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

fn parse_text_reply(raw: &str, matcher: &ClassMatcher) -> Vec<Vec<String>> {
    let mut lists = vec![Vec::new(); matcher.names.len()];
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let (is_heading, rest) = strip_heading(line);
        let (is_item, body) = match strip_list_marker(rest) {
            Some(body) => (true, body),
            None => (false, rest),
        };
        let body = strip_emphasis(body);

        // "class: a, b, c" or "class:" on its own.
        if let Some((head, tail)) = body.split_once(':') {
            let class = if is_item && !is_heading {
                matcher.exact(head)
            } else {
                matcher.fuzzy(head)
            };
            if let Some(class) = class {
                current = Some(class);
                lists[class].extend(tail.split(',').map(clean_phrase).filter(|p| !p.is_empty()));
                continue;
            }
        }
        if !is_item || is_heading {
            if let Some(class) = matcher.fuzzy(body) {
                current = Some(class);
            }
            continue;
        }
        if let Some(class) = current {
            let phrase = clean_phrase(body);
            if !phrase.is_empty() {
                lists[class].push(phrase);
            }
        }
    }
    lists
}

fn strip_heading(line: &str) -> (bool, &str) {
    let hashes = line.trim_start_matches('#');
    if hashes.len() != line.len() {
        return (true, hashes.trim());
    }
    let bold = line.len() > 4
        && (line.starts_with("**") && (line.ends_with("**") || line.ends_with("**:")));
    (bold, line)
}

/// Strip a leading bullet (`-`, `*`, `+`, `•`, `–`) or number (`1.`, `2)`).
fn strip_list_marker(line: &str) -> Option<&str> {
    for bullet in ['-', '*', '+', '•', '–', '—'] {
        if let Some(rest) = line.strip_prefix(bullet) {
            if rest.starts_with(char::is_whitespace) {
                return Some(rest.trim());
            }
        }
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return Some(rest.trim());
            }
        }
    }
    None
}

fn strip_emphasis(text: &str) -> &str {
    text.trim_matches(|c| c == '*' || c == '_').trim()
}

fn clean_phrase(text: &str) -> String {
    let t = strip_emphasis(text.trim());
    let t = t.trim_end_matches([',', ';', '.']);
    let t = t.trim_matches(|c| matches!(c, '"' | '\'' | '`' | '“' | '”' | '‘' | '’'));
    normalize_text(strip_emphasis(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolOrigin {
    Llm,
    User,
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    spec: ClassSpec,
    classes: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<PoolOrigin>,
}

/// Serialize a pool in the documented pool-file JSON layout.
pub fn pool_to_json(pool: &PromptPool) -> String {
    let mut classes = Map::new();
    for (i, name) in pool.spec.class_names().enumerate() {
        let texts: Vec<Value> = pool
            .class_candidates(i)
            .iter()
            .map(|c| Value::String(c.text.clone()))
            .collect();
        classes.insert(name.to_string(), Value::Array(texts));
    }
    let llm = pool
        .targets
        .iter()
        .chain(pool.confounders.iter().flatten())
        .any(|c| c.source == CandidateSource::LlmGenerated);
    let file = PoolFile {
        spec: pool.spec.clone(),
        classes,
        origin: Some(if llm {
            PoolOrigin::Llm
        } else {
            PoolOrigin::User
        }),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("pool serializes");
    text.push('\n');
    text
}

/// Parse a pool file. Every class in `spec` must be present under its exact
/// (case-insensitive) name; the result must pass [`validate_pool`].
pub fn pool_from_json(text: &str) -> Result<PromptPool> {
    let file: PoolFile = serde_json::from_str(text)
        .map_err(|e| Error::InvalidInput(format!("malformed pool file: {e}")))?;
    let spec = ClassSpec::new(
        file.spec.target,
        file.spec.confounders,
        file.spec.prompts_per_class,
    )?;
    let default_source = match file.origin {
        Some(PoolOrigin::Llm) => CandidateSource::LlmGenerated,
        _ => CandidateSource::UserSupplied,
    };

    let mut by_key: HashMap<String, &Value> = HashMap::new();
    for (name, value) in &file.classes {
        if by_key.insert(comparison_key(name), value).is_some() {
            return Err(Error::InvalidInput(format!("class {name:?} listed twice")));
        }
    }
    let names: Vec<String> = spec.class_names().map(str::to_string).collect();
    if let Some(extra) = file
        .classes
        .keys()
        .find(|k| !names.iter().any(|n| comparison_key(n) == comparison_key(k)))
    {
        return Err(Error::InvalidInput(format!(
            "pool file lists class {extra:?} which is not in its spec"
        )));
    }

    let mut lists = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let value = by_key
            .get(&comparison_key(name))
            .ok_or_else(|| Error::InvalidInput(format!("pool file has no prompts for {name:?}")))?;
        let items = value
            .as_array()
            .ok_or_else(|| Error::InvalidInput(format!("prompts for {name:?} must be an array")))?;
        let role = if i == 0 {
            ClassRole::Target
        } else {
            ClassRole::Confounder(i)
        };
        let name_key = comparison_key(name);
        let mut list = Vec::with_capacity(items.len());
        for item in items {
            let text = item.as_str().ok_or_else(|| {
                Error::InvalidInput(format!("prompt under {name:?} is not a string: {item}"))
            })?;
            let source = if comparison_key(text) == name_key {
                CandidateSource::BaseClassName
            } else {
                default_source
            };
            list.push(PromptCandidate::new(text, role, source));
        }
        lists.push(list);
    }
    let mut lists = lists.into_iter();
    let pool = PromptPool {
        spec,
        targets: lists.next().unwrap_or_default(),
        confounders: lists.collect(),
    };
    let report = validate_pool(&pool);
    if !report.is_valid() {
        return Err(Error::InvalidInput(format!("invalid pool: {report}")));
    }
    Ok(pool)
}

/// Make the class name lead (or be absent from) each class pool.
pub fn apply_base_name_policy(pool: &PromptPool, include_base_name: bool) -> PromptPool {
    let adjust = |name: &str, role: ClassRole, list: &[PromptCandidate]| {
        let key = comparison_key(name);
        let rest = list
            .iter()
            .filter(|c| comparison_key(&c.text) != key)
            .cloned();
        if include_base_name {
            let base = list
                .iter()
                .find(|c| comparison_key(&c.text) == key)
                .cloned()
                .unwrap_or_else(|| {
                    PromptCandidate::new(name, role, CandidateSource::BaseClassName)
                });
            std::iter::once(base).chain(rest).collect()
        } else {
            rest.collect()
        }
    };
    PromptPool {
        spec: pool.spec.clone(),
        targets: adjust(&pool.spec.target, ClassRole::Target, &pool.targets),
        confounders: pool
            .spec
            .confounders
            .iter()
            .zip(&pool.confounders)
            .enumerate()
            .map(|(i, (name, list))| adjust(name, ClassRole::Confounder(i + 1), list))
            .collect(),
    }
}

pub fn load_pool_file(path: &Path) -> Result<PromptPool> {
    let text = fsio::read_to_string(path)?;
    pool_from_json(&text).map_err(|e| Error::data_file(path, e.to_string()))
}

pub fn save_pool_file(pool: &PromptPool, path: &Path) -> Result<()> {
    fsio::write_atomic(path, pool_to_json(pool).as_bytes())
}
