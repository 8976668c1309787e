//! Client contract checks against scripted servers. Each returns `Err` with
//! a description on the first violated expectation.

use std::time::Duration;

use ccas_core::embedding::{Embedder, EmbeddingCache, HttpEmbeddingBackend};
use ccas_core::generation::{
    generate_pool, render_generation_prompt, ChatClient, GenerationRequest,
};
use ccas_core::http::{Credential, RetryPolicy};
use ccas_core::{ClassSpec, Error, ErrorCategory};
use serde_json::json;

use super::{chat_reply, dead_url, embeddings_reply, status, MockServer};

pub type Check = Result<(), String>;
pub type Named = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn spec() -> ClassSpec {
    ClassSpec::new("goggles", ["glasses", "sunglasses"], 15).unwrap()
}

fn key() -> Option<Credential> {
    Credential::new("sk-mock-key")
}

fn chat(url: &str) -> ChatClient {
    ChatClient::new(url, key()).with_retry_delays(Duration::ZERO, Duration::ZERO)
}

fn no_wait(max_retries: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries,
        base_delay: Duration::ZERO,
        max_delay: Duration::ZERO,
    }
}

fn embedder(url: &str, retries: u32) -> Embedder {
    let backend = HttpEmbeddingBackend::new(url, key()).with_retry(no_wait(retries));
    Embedder::new(Some(Box::new(backend)), EmbeddingCache::in_memory())
}

pub fn fifteen_per_class_reply() -> String {
    let list = |stem: &str, class: &str| {
        (1..=15)
            .map(|i| format!("{i}. {stem} {i} {class}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    format!(
        "Goggles:\n{}\n\nGlasses:\n{}\n\nSunglasses:\n{}\n",
        list("style", "goggles"),
        list("style", "glasses"),
        list("style", "sunglasses")
    )
}

fn texts(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// A well-formed reply yields 15 targets plus the base name and two confounder pools.
pub fn generate_well_formed_pool() -> Check {
    let server = MockServer::start(vec![chat_reply(&fifteen_per_class_reply())]);
    let out = generate_pool(&chat(&server.base_url), &GenerationRequest::new(spec()))
        .map_err(|e| format!("generate_pool failed: {e}"))?;
    ensure!(out.retries == 0, "unexpected retries: {}", out.retries);
    ensure!(
        out.pool.targets.len() == 16,
        "targets: {}",
        out.pool.targets.len()
    );
    ensure!(out.pool.targets[0].text == "goggles", "base name not first");
    ensure!(
        out.pool.confounders.len() == 2,
        "confounder pools: {}",
        out.pool.confounders.len()
    );
    ensure!(
        out.raw_reply == fifteen_per_class_reply(),
        "raw reply not kept verbatim"
    );

    let reqs = server.requests();
    ensure!(reqs.len() == 1, "expected one request, saw {}", reqs.len());
    let r = &reqs[0];
    ensure!(
        r.method == "POST" && r.path == "/chat/completions",
        "{} {}",
        r.method,
        r.path
    );
    ensure!(
        r.header("authorization") == Some("Bearer sk-mock-key"),
        "missing bearer header"
    );
    let body = r.json();
    ensure!(body["model"] == "gpt-4o", "model {}", body["model"]);
    ensure!(
        body["temperature"] == 1.0,
        "temperature {}",
        body["temperature"]
    );
    ensure!(
        body["messages"].as_array().map(Vec::len) == Some(1),
        "expected a single message"
    );
    ensure!(
        body["messages"][0]["role"] == "user",
        "role {}",
        body["messages"][0]["role"]
    );
    ensure!(
        body["messages"][0]["content"] == render_generation_prompt(&spec()).as_str(),
        "content is not the rendered template"
    );
    Ok(())
}

/// 503, 503, then success: two retries, three requests.
pub fn generate_retries_transient_failures() -> Check {
    let server = MockServer::start(vec![
        status(503, "busy"),
        status(503, "busy"),
        chat_reply(&fifteen_per_class_reply()),
    ]);
    let out = generate_pool(&chat(&server.base_url), &GenerationRequest::new(spec()))
        .map_err(|e| format!("generate_pool failed: {e}"))?;
    ensure!(out.retries == 2, "retries {}", out.retries);
    ensure!(server.hits() == 3, "hits {}", server.hits());
    Ok(())
}

/// Persistent 503 stops after max_retries + 1 attempts with an upstream error.
pub fn generate_respects_retry_budget() -> Check {
    let server = MockServer::start(vec![status(503, "busy")]);
    let mut request = GenerationRequest::new(spec());
    request.max_retries = 3;
    let err = generate_pool(&chat(&server.base_url), &request)
        .err()
        .ok_or("expected failure")?;
    ensure!(
        matches!(err, Error::UpstreamStatus { status: 503, .. }),
        "got {err:?}"
    );
    ensure!(
        err.category() == ErrorCategory::Upstream,
        "category {:?}",
        err.category()
    );
    ensure!(server.hits() == 4, "hits {}", server.hits());
    Ok(())
}

/// Client errors such as 401 are not retried.
pub fn generate_does_not_retry_auth_failure() -> Check {
    let server = MockServer::start(vec![status(401, "{\"error\":\"bad key\"}")]);
    let err = generate_pool(&chat(&server.base_url), &GenerationRequest::new(spec()))
        .err()
        .ok_or("expected failure")?;
    ensure!(
        matches!(err, Error::UpstreamStatus { status: 401, .. }),
        "got {err:?}"
    );
    ensure!(server.hits() == 1, "hits {}", server.hits());
    Ok(())
}

/// An unusable reply is retried; if it persists, the parse error keeps the raw text.
pub fn generate_handles_unparseable_reply() -> Check {
    let server = MockServer::start(vec![
        chat_reply("I cannot help with that."),
        chat_reply(&fifteen_per_class_reply()),
    ]);
    let out = generate_pool(&chat(&server.base_url), &GenerationRequest::new(spec()))
        .map_err(|e| format!("generate_pool failed: {e}"))?;
    ensure!(out.retries == 1, "retries {}", out.retries);

    let server = MockServer::start(vec![chat_reply("")]);
    let mut request = GenerationRequest::new(spec());
    request.max_retries = 1;
    let err = generate_pool(&chat(&server.base_url), &request)
        .err()
        .ok_or("expected failure")?;
    ensure!(
        matches!(err, Error::Parse { ref raw, .. } if raw.is_empty()),
        "got {err:?}"
    );
    ensure!(server.hits() == 2, "hits {}", server.hits());

    let server = MockServer::start(vec![chat_reply("garbage without any class lists")]);
    request.max_retries = 0;
    let err = generate_pool(&chat(&server.base_url), &request)
        .err()
        .ok_or("expected failure")?;
    ensure!(
        matches!(err, Error::Parse { ref raw, .. } if raw == "garbage without any class lists"),
        "got {err:?}"
    );
    Ok(())
}

/// An unreachable host is a transport error after the full retry budget.
pub fn generate_reports_transport_failure() -> Check {
    let mut request = GenerationRequest::new(spec());
    request.max_retries = 1;
    let err = generate_pool(&chat(&dead_url()), &request)
        .err()
        .ok_or("expected failure")?;
    ensure!(
        matches!(err, Error::Transport { attempts: 2, .. }),
        "got {err:?}"
    );
    Ok(())
}

/// Rows sent out of index order come back aligned with the inputs.
pub fn embed_preserves_input_order() -> Check {
    let server = MockServer::start(vec![embeddings_reply(&[
        (2, vec![0.0, 0.0, 1.0]),
        (0, vec![1.0, 0.0, 0.0]),
        (1, vec![0.0, 1.0, 0.0]),
    ])]);
    let input = texts(&["safety goggles", "reading glasses", "aviator sunglasses"]);
    let out = embedder(&server.base_url, 0)
        .embed_texts(&input, "all-MiniLM-L6-v2")
        .map_err(|e| format!("embed_texts failed: {e}"))?;
    for (i, v) in out.iter().enumerate() {
        ensure!(
            v.values()[i] == 1.0,
            "vector {i} out of order: {:?}",
            v.values()
        );
        ensure!(
            v.model_id() == "all-MiniLM-L6-v2",
            "model id {}",
            v.model_id()
        );
    }
    let reqs = server.requests();
    ensure!(
        reqs.len() == 1 && reqs[0].path == "/embeddings",
        "requests {reqs:?}"
    );
    let body = reqs[0].json();
    ensure!(
        body["model"] == "all-MiniLM-L6-v2",
        "model {}",
        body["model"]
    );
    ensure!(body["input"] == json!(input), "input {}", body["input"]);
    Ok(())
}

/// Three vectors for four texts is a provider inconsistency, never a partial result.
pub fn embed_rejects_short_reply() -> Check {
    let server = MockServer::start(vec![embeddings_reply(&[
        (0, vec![1.0, 0.0]),
        (1, vec![0.0, 1.0]),
        (2, vec![1.0, 1.0]),
    ])]);
    let input = texts(&["a b", "c d", "e f", "g h"]);
    let err = embedder(&server.base_url, 0)
        .embed_texts(&input, "m")
        .err()
        .ok_or("expected failure")?;
    ensure!(
        matches!(err, Error::ProviderInconsistency(_)),
        "got {err:?}"
    );
    ensure!(
        err.category() == ErrorCategory::Upstream,
        "category {:?}",
        err.category()
    );
    Ok(())
}

/// A 384-dim vector is passed through unchanged.
pub fn embed_passes_vector_through() -> Check {
    let vector: Vec<f64> = (0..384)
        .map(|i| ((i * 37 % 101) as f64 - 50.0) / 97.0)
        .collect();
    let server = MockServer::start(vec![embeddings_reply(&[(0, vector.clone())])]);
    let out = embedder(&server.base_url, 0)
        .embed_texts(&texts(&["safety goggles"]), "all-MiniLM-L6-v2")
        .map_err(|e| format!("embed_texts failed: {e}"))?;
    ensure!(
        out.len() == 1 && out[0].dim() == 384,
        "dim {}",
        out[0].dim()
    );
    ensure!(out[0].values() == vector.as_slice(), "vector altered");
    Ok(())
}

/// 429 then success is retried once.
pub fn embed_retries_rate_limit() -> Check {
    let server = MockServer::start(vec![
        status(429, "slow down"),
        embeddings_reply(&[(0, vec![0.6, 0.8])]),
    ]);
    let out = embedder(&server.base_url, 2)
        .embed_texts(&texts(&["lab goggles"]), "m")
        .map_err(|e| format!("embed_texts failed: {e}"))?;
    ensure!(out.len() == 1, "len {}", out.len());
    ensure!(server.hits() == 2, "hits {}", server.hits());
    Ok(())
}

/// Misses are deduplicated and batched; cached texts never reach the server.
pub fn embed_batches_and_caches() -> Check {
    let server = MockServer::start_with(|_, req| {
        let body = req.json();
        let n = body["input"].as_array().map_or(0, Vec::len);
        let rows: Vec<(usize, Vec<f64>)> = (0..n).map(|i| (i, vec![1.0 + i as f64, 1.0])).collect();
        embeddings_reply(&rows)
    });
    let e = embedder(&server.base_url, 0).with_batch_size(2);
    let input = texts(&["a1", "b2", "a1", "c3", "d4", "e5"]);
    let out = e
        .embed_texts(&input, "m")
        .map_err(|err| format!("embed_texts failed: {err}"))?;
    ensure!(out.len() == 6, "len {}", out.len());
    ensure!(out[0] == out[2], "duplicate texts got different vectors");
    let reqs = server.requests();
    ensure!(reqs.len() == 3, "requests {}", reqs.len());
    let sent: Vec<String> = reqs
        .iter()
        .flat_map(|r| {
            r.json()["input"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string())
                .collect::<Vec<_>>()
        })
        .collect();
    ensure!(sent == ["a1", "b2", "c3", "d4", "e5"], "sent {sent:?}");

    e.embed_texts(&texts(&["e5", "a1"]), "m")
        .map_err(|err| format!("cached embed failed: {err}"))?;
    ensure!(server.hits() == 3, "cache miss went to the server");
    Ok(())
}

pub const ALL: &[Named] = &[
    ("generate: well-formed reply", generate_well_formed_pool),
    (
        "generate: 503 twice then success",
        generate_retries_transient_failures,
    ),
    ("generate: retry budget", generate_respects_retry_budget),
    (
        "generate: 401 not retried",
        generate_does_not_retry_auth_failure,
    ),
    (
        "generate: unparseable reply",
        generate_handles_unparseable_reply,
    ),
    (
        "generate: transport failure",
        generate_reports_transport_failure,
    ),
    ("embed: input order", embed_preserves_input_order),
    ("embed: short reply", embed_rejects_short_reply),
    ("embed: 384-dim passthrough", embed_passes_vector_through),
    ("embed: 429 retry", embed_retries_rate_limit),
    ("embed: batching and cache", embed_batches_and_caches),
];
