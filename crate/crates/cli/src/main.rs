use std::path::PathBuf;
use std::process::ExitCode;

use ccas_core::embedding::load_embedding_file;
use ccas_core::pipeline::{
    self, ensure_out_dir, load_eval_results, load_pool, load_ranking, write_effective_config,
    PipelineConfig, POOL_FILE, RANKING_FILE,
};
use ccas_core::report::{render_ap_table, render_ranking_table};
use ccas_core::{Error, ErrorCategory, PromptPool, Result, ScoreVariant};
use clap::{Parser, Subcommand};

mod config;

use config::{Options, EMBED_KEY_VAR, LLM_KEY_VAR};

const AFTER_HELP: &str = "\
Credentials are read only from the environment:
  CCAS_LLM_API_KEY    bearer token for the chat completions service
  CCAS_EMBED_API_KEY  bearer token for the embeddings service

Every option can also be set as CCAS_<NAME> in the environment or as a key in
the --config TOML file. Flags win over the environment, which wins over the file.

Exit codes: 0 ok, 2 configuration, 3 upstream service, 4 data or parse,
5 evaluation.";

#[derive(Debug, Parser)]
#[command(name = "ccas", version, about = "Generate, score and select detection prompts", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    options: Options,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ask the chat service for a prompt pool; writes pool.json and pool.raw.txt.
    Generate,
    /// Embed every pool text; writes embeddings.jsonl.
    Embed,
    /// Similarity matrix and both rankings; writes similarity.csv, ranking.json and tables.
    Score,
    /// Pick the top prompts from ranking.json; writes selected.json.
    Select,
    /// AP@IoU for each detection configuration; writes eval.json and ap_table.txt.
    Eval,
    /// Print the ranking table and, when present, the AP table.
    Report,
    /// Run generate (or load), embed, score and select, plus eval when --gt is given.
    Pipeline,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Upstream => 3,
        ErrorCategory::Data => 4,
        ErrorCategory::Evaluation => 5,
    }
}

/// `--pool-file` if given, else the pool a previous stage left in the output directory.
fn stage_pool(cfg: &PipelineConfig) -> Result<PromptPool> {
    let path = cfg
        .pool_file
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(POOL_FILE));
    if !path.exists() {
        return Err(Error::Config(format!(
            "no pool at {}; run `generate` or pass --pool-file",
            path.display()
        )));
    }
    load_pool(cfg, &path)
}

fn stage_embeddings_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.embeddings_file
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(pipeline::EMBEDDINGS_FILE))
}

fn run(command: &Command, cfg: &PipelineConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    write_effective_config(cfg)?;
    match command {
        Command::Generate => {
            let pool = pipeline::stage_generate(cfg)?;
            println!(
                "generated {} target and {} confounder prompts",
                pool.targets.len(),
                pool.confounders.iter().map(Vec::len).sum::<usize>()
            );
        }
        Command::Embed => {
            let pool = stage_pool(cfg)?;
            let table = pipeline::stage_embed(cfg, &pool)?;
            println!("embedded {} texts", table.len());
        }
        Command::Score => {
            let pool = stage_pool(cfg)?;
            let table = load_embedding_file(&stage_embeddings_path(cfg))?;
            let scores = pipeline::stage_score(cfg, &pool, &table)?;
            print!("{}", render_ranking_table(&scores.ranking));
        }
        Command::Select => {
            let ranking = load_ranking(&cfg.out_dir.join(RANKING_FILE))?;
            let base = match &cfg.target {
                Some(t) => t.clone(),
                None => stage_pool(cfg)?.spec.target,
            };
            let selection = pipeline::stage_select(cfg, &ranking, &base)?;
            for prompt in &selection.prompts {
                println!("{prompt}");
            }
        }
        Command::Eval => {
            let results = pipeline::stage_eval(cfg)?;
            print!("{}", render_ap_table(&results));
        }
        Command::Report => {
            let ranking = load_ranking(&cfg.out_dir.join(RANKING_FILE))?;
            for variant in [ScoreVariant::Avg, ScoreVariant::Max] {
                println!("{}", render_ranking_table(&ranking.reordered(variant)));
            }
            let eval = cfg.out_dir.join(pipeline::EVAL_FILE);
            if eval.exists() {
                print!("{}", render_ap_table(&load_eval_results(&eval)?));
            }
        }
        Command::Pipeline => {
            let summary = pipeline::run_pipeline(cfg)?;
            print!("{}", render_ranking_table(&summary.scores.ranking));
            println!("selected: {}", summary.selection.prompts.join(", "));
            if let Some(results) = &summary.evaluation {
                print!("{}", render_ap_table(results));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = config::resolve(&cli.options).and_then(|cfg| {
        log::debug!(
            "credentials: {LLM_KEY_VAR} {}, {EMBED_KEY_VAR} {}",
            if cfg.llm.credential.is_some() {
                "set"
            } else {
                "unset"
            },
            if cfg.embed.credential.is_some() {
                "set"
            } else {
                "unset"
            },
        );
        run(&cli.command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
