use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use docqa_core::bench::{bench_bm25, SyntheticSpec};
use docqa_core::ingest::{ChunkStore, ImageFilterConfig};
use docqa_core::pipeline::{
    build_indexes, evaluate, ingest_corpus, load_eval_records, reindex, Backends, Pipeline, PipelineConfig,
    QueryResult, RouteKind, DEFAULT_EVAL_KS,
};
use docqa_core::sparse::Bm25Params;
use docqa_server::{router, AppState, ServerOptions, ENV_API_TOKEN};

#[derive(Parser)]
#[command(name = "docqa", version, about = "Question answering over HTML documentation packages")]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a package (directory or zip) into a chunk store.
    Ingest(IngestArgs),
    /// Build or probe the sparse index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Answer one question.
    Query(QueryArgs),
    /// Retrieval and answer metrics over a QA set.
    Eval(EvalArgs),
    /// Micro-benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Rebuild an index directory from a package and swap it in.
    Reindex(ReindexArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    chunk_overlap: Option<usize>,
    /// TOML file with image filter rules.
    #[arg(long)]
    image_rules: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Write index snapshots for a chunk store.
    Build {
        /// Directory holding the chunk store written by `ingest`.
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k1: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
    },
    /// Top hits of the sparse chunk route.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        q: String,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    q: String,
    /// Print the full result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    /// Line-delimited JSON records with `question`, `gold_chunk_ids`, `gold_keywords`.
    #[arg(long)]
    qa: PathBuf,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Eager index against the naive scorer on a synthetic corpus.
    Bm25 {
        #[arg(long, default_value_t = 10_000)]
        docs: usize,
        #[arg(long, default_value_t = 1_000)]
        queries: usize,
        #[arg(long, default_value_t = 20_000)]
        vocab: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    /// Package used by `POST /v1/reindex`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

#[derive(Args)]
struct ReindexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    index: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn backends(config: &PipelineConfig) -> Result<Backends> {
    let tokenizer = config.tokenizer.build()?;
    let (backends, notes) = Backends::from_env(&tokenizer)?;
    for note in notes {
        eprintln!("note: {note}");
    }
    Ok(backends)
}

fn open(index: &Path, config: PipelineConfig) -> Result<Pipeline> {
    let b = backends(&config)?;
    let pipeline = Pipeline::open(index, config, b).with_context(|| format!("opening index {}", index.display()))?;
    for note in pipeline.notes() {
        eprintln!("note: {note}");
    }
    Ok(pipeline)
}

fn truncate(text: &str, n: usize) -> String {
    let mut out: String = text.chars().take(n).collect();
    if text.chars().count() > n {
        out.push('…');
    }
    out
}

fn print_result(result: &QueryResult) {
    println!("{}", result.answer);
    println!();
    println!("{:>4}  {:>9}  {:<12}  {:<40}  knowledge path", "rank", "score", "route", "chunk");
    for c in &result.contexts {
        println!(
            "{:>4}  {:>9.4}  {:<12}  {:<40}  {}",
            c.rank, c.score, c.route, c.chunk_id, c.knowledge_path
        );
    }
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
}

async fn shutdown() {
    let _ = tokio::signal::ctrl_c().await;
}

fn serve(args: ServeArgs, config: PipelineConfig) -> Result<()> {
    // backends hold blocking HTTP clients, so build them before the runtime
    let b = backends(&config)?;
    let pipeline = match &args.index {
        Some(dir) => match Pipeline::open(dir, config.clone(), b.clone()) {
            Ok(p) => Some(p),
            Err(e) => {
                eprintln!("warning: no index loaded from {}: {e}", dir.display());
                None
            }
        },
        None => None,
    };
    let options = ServerOptions {
        index_dir: args.index,
        corpus: args.corpus,
        ui_dir: args.ui_dir,
        api_token: std::env::var(ENV_API_TOKEN).ok().filter(|t| !t.is_empty()),
    };
    let state = Arc::new(AppState::new(pipeline, config, b, options));
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("invalid host or port")?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(shutdown())
            .await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(args) => {
            if let Some(n) = args.chunk_size {
                config.chunking.chunk_size = n;
            }
            if let Some(n) = args.chunk_overlap {
                config.chunking.chunk_overlap = n;
            }
            if let Some(path) = &args.image_rules {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                config.images = toml::from_str::<ImageFilterConfig>(&text)
                    .with_context(|| format!("parsing {}", path.display()))?;
            }
            config.validate()?;
            let store = ingest_corpus(&args.src, &config)?;
            store.save(&args.out)?;
            for w in &store.warnings {
                eprintln!("warning: {}: {}", w.file, w.message);
            }
            println!(
                "{} documents, {} chunks, {} warnings -> {}",
                store.documents.len(),
                store.chunks.len(),
                store.warnings.len(),
                args.out.display()
            );
        }
        Command::Index(IndexCommand::Build { chunks, out, k1, b }) => {
            config.bm25 = Bm25Params {
                k1: k1.unwrap_or(config.bm25.k1),
                b: b.unwrap_or(config.bm25.b),
            };
            config.validate()?;
            let store = ChunkStore::load(&chunks)?;
            let tokenizer = config.tokenizer.build()?;
            let backends = backends(&config)?;
            build_indexes(&store, &config, &tokenizer, backends.embedder.as_ref(), &out)?;
            println!("indexed {} chunks -> {}", store.chunks.len(), out.display());
        }
        Command::Index(IndexCommand::Query { index, q, top_k }) => {
            config.routes.sparse_chunk.top_k = top_k;
            let pipeline = open(&index, config)?;
            let hits = pipeline.route_hits(RouteKind::SparseChunk, &q, pipeline.config())?;
            for h in hits {
                println!("{:>4}  {:>9.4}  {}", h.rank, h.score, h.chunk_id);
            }
        }
        Command::Query(args) => {
            let pipeline = open(&args.index, config)?;
            let result = pipeline.run_query(&args.q)?;
            if args.json {
                println!("{}", serde_json::to_string_pretty(&result)?);
            } else {
                print_result(&result);
                if let Some(top) = result.contexts.first() {
                    eprintln!("top source: {}", truncate(&top.text, 80));
                }
            }
        }
        Command::Eval(args) => {
            let records = load_eval_records(&args.qa)?;
            let pipeline = open(&args.index, config)?;
            let report = evaluate(&pipeline, &records, pipeline.config(), &DEFAULT_EVAL_KS)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Bench(BenchCommand::Bm25 {
            docs,
            queries,
            vocab,
            top_k,
            seed,
        }) => {
            if docs == 0 || queries == 0 {
                bail!("--docs and --queries must be positive");
            }
            let spec = SyntheticSpec {
                docs,
                queries,
                vocabulary: vocab,
                seed,
                ..SyntheticSpec::default()
            };
            let r = bench_bm25(&spec, top_k, config.bm25)?;
            println!("docs {}  queries {}  top_k {}", r.docs, r.queries, r.top_k);
            println!("naive  build {:>10.1} ms  query {:>10.1} ms", r.build_naive_ms, r.query_naive_ms);
            println!("eager  build {:>10.1} ms  query {:>10.1} ms", r.build_eager_ms, r.query_eager_ms);
            println!("speedup {:.1}x  max score diff {:.2e}", r.speedup, r.max_abs_diff);
        }
        Command::Serve(args) => serve(args, config)?,
        Command::Reindex(args) => {
            let backends = backends(&config)?;
            let r = reindex(&args.corpus, &args.index, &config, backends.embedder.as_ref())?;
            println!(
                "{} documents, {} chunks, {} warnings in {:.0} ms -> {}",
                r.documents,
                r.chunks,
                r.warnings,
                r.elapsed_ms,
                args.index.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
