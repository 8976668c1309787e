mod support;

use std::fs;

use ccas_core::http::Credential;
use ccas_core::pipeline::{run_pipeline, PipelineConfig, ServiceConfig};
use ccas_core::{Error, ErrorCategory};
use support::conformance::fifteen_per_class_reply;
use support::{chat_reply, embeddings_reply, MockServer};

const LLM_SECRET: &str = "sk-llm-7f3a9c";
const EMBED_SECRET: &str = "sk-emb-51d2e8";

fn text_vector(text: &str) -> Vec<f64> {
    let mut v = vec![0.05; 8];
    for (i, b) in text.bytes().enumerate() {
        v[(b as usize + i) % 8] += 1.0;
    }
    v
}

fn embedding_server() -> MockServer {
    MockServer::start_with(|_, req| {
        let body = req.json();
        let rows: Vec<(usize, Vec<f64>)> = body["input"]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, t)| (i, text_vector(t.as_str().unwrap())))
            .collect();
        embeddings_reply(&rows)
    })
}

fn online_config(chat: &MockServer, embed: &MockServer, out: &std::path::Path) -> PipelineConfig {
    PipelineConfig {
        target: Some("goggles".into()),
        confounders: vec!["glasses".into(), "sunglasses".into()],
        n: Some(15),
        llm: ServiceConfig {
            base_url: Some(chat.base_url.clone()),
            model: None,
            credential: Credential::new(LLM_SECRET),
        },
        embed: ServiceConfig {
            base_url: Some(embed.base_url.clone()),
            model: None,
            credential: Credential::new(EMBED_SECRET),
        },
        top: 3,
        out_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

#[test]
fn online_run_writes_artifacts_without_secrets() {
    let chat = MockServer::start(vec![chat_reply(&fifteen_per_class_reply())]);
    let embed = embedding_server();
    let dir = tempfile::tempdir().unwrap();
    let cfg = online_config(&chat, &embed, &dir.path().join("out"));

    let summary = run_pipeline(&cfg).unwrap();
    assert_eq!(summary.pool.targets.len(), 16);
    assert_eq!(summary.selection.prompts.len(), 3);
    assert!(summary.evaluation.is_none());
    assert_eq!(chat.hits(), 1);
    assert_eq!(
        embed.requests()[0].header("authorization"),
        Some(&*format!("Bearer {EMBED_SECRET}"))
    );

    let mut names = Vec::new();
    for entry in fs::read_dir(&cfg.out_dir).unwrap() {
        let entry = entry.unwrap();
        let text = fs::read_to_string(entry.path()).unwrap();
        let name = entry.file_name().to_string_lossy().into_owned();
        assert!(
            !text.contains(LLM_SECRET) && !text.contains(EMBED_SECRET),
            "secret in {name}"
        );
        names.push(name);
    }
    names.sort();
    assert_eq!(
        names,
        [
            "config.json",
            "embeddings.jsonl",
            "pool.json",
            "pool.raw.txt",
            "ranking.json",
            "ranking_avg.txt",
            "ranking_max.txt",
            "selected.json",
            "similarity.csv"
        ]
    );
    assert_eq!(
        fs::read_to_string(cfg.out_dir.join("pool.raw.txt")).unwrap(),
        fifteen_per_class_reply()
    );
}

#[test]
fn cache_dir_avoids_repeat_embedding_calls() {
    let chat = MockServer::start(vec![chat_reply(&fifteen_per_class_reply())]);
    let embed = embedding_server();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = online_config(&chat, &embed, &dir.path().join("a"));
    cfg.cache_dir = Some(dir.path().join("cache"));

    run_pipeline(&cfg).unwrap();
    let calls = embed.hits();
    assert!(calls > 0);
    cfg.out_dir = dir.path().join("b");
    run_pipeline(&cfg).unwrap();
    assert_eq!(embed.hits(), calls);
    for name in ["ranking.json", "similarity.csv", "embeddings.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn missing_credential_fails_before_any_request() {
    let chat = MockServer::start(vec![chat_reply(&fifteen_per_class_reply())]);
    let embed = embedding_server();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = online_config(&chat, &embed, &dir.path().join("out"));
    cfg.embed.credential = None;

    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
    assert_eq!(err.category(), ErrorCategory::Config);
    assert_eq!(chat.hits() + embed.hits(), 0);
    assert!(!cfg.out_dir.exists());
}

#[test]
fn upstream_failure_is_categorized() {
    let chat = MockServer::start(vec![support::status(500, "down")]);
    let embed = embedding_server();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = online_config(&chat, &embed, &dir.path().join("out"));
    cfg.max_retries = 0;
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.category(), ErrorCategory::Upstream, "{err:?}");
    assert_eq!(embed.hits(), 0);
}
