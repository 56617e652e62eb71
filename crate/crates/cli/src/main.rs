use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use ragpool_core::ann_graph::io::{read_graph, read_vectors, write_graph, write_vectors};
use ragpool_core::bench::bench_engine;
use ragpool_core::engine::{Admission, RequestStage};
use ragpool_core::fsutil::write_atomic;
use ragpool_core::roofline::parse_sample_points;
use ragpool_core::sim::{write_compare_artifacts, write_sim_artifacts};
use ragpool_core::workload::{gen_trace, gen_vectors, gen_vectors_stream, write_trace, STREAM_QUERIES};
use ragpool_core::{
    build_knn_graph, compare_architectures, search_sequential, simulate, Architecture, Engine, EngineConfig, Error,
    RunConfig, Stage, StageRooflineParams, World,
};

const EXIT_INPUT: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_INTERNAL: u8 = 1;

#[derive(Parser)]
#[command(name = "ragpool", version, about = "Vector-search pool tooling: index, search, cost model and serving simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an exact kNN graph over a vector file.
    BuildIndex(BuildIndexArgs),
    /// Search a query file against an index; JSON Lines on stdout.
    Search(SearchArgs),
    /// Generate query vectors and a request trace from a config.
    Gen(GenArgs),
    /// Sample a stage utilization curve as CSV.
    Roofline(RooflineArgs),
    /// Simulate one serving architecture.
    Sim(SimArgs),
    /// Simulate all three architectures on the same workload.
    Compare(CompareArgs),
    /// Compare per-request and continuous batching wall-clock throughput.
    BenchEngine(BenchArgs),
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    degree: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Batch,
    Sequential,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Mode::Batch)]
    mode: Mode,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    capacity: Option<usize>,
    /// Accepted for interface stability; the search itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Write results here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Query vectors; trace `query_ids` index into this file.
    #[arg(long)]
    out_vectors: PathBuf,
    #[arg(long)]
    out_trace: PathBuf,
    /// Also write the database vectors.
    #[arg(long)]
    out_db: Option<PathBuf>,
    /// Overrides `workload.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RooflineArgs {
    /// Preset supplying any parameter not given explicitly.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    ai: Option<f64>,
    #[arg(long)]
    mem_bw: Option<f64>,
    #[arg(long)]
    peak_flops: Option<f64>,
    #[arg(long)]
    x_sat: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma list or `a:b:step` range.
    #[arg(long)]
    xs: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    arch: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Engine and workload sizes; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    n_queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Database vector file; generated from the config when absent.
    #[arg(long, requires = "index")]
    vectors: Option<PathBuf>,
    #[arg(long, requires = "vectors")]
    index: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Invalid flag combinations detected after parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let store = read_vectors(&a.vectors)?;
    if a.degree == 0 || a.degree >= store.count() {
        return Err(UsageError(format!("--degree {} must be in 1..{}", a.degree, store.count())).into());
    }
    let graph = build_knn_graph(&store, a.degree)?;
    write_graph(&a.out, &graph)?;
    log::info!("wrote {} x {} graph to {}", graph.node_count(), graph.degree(), a.out.display());
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let store = Arc::new(read_vectors(&a.vectors)?);
    let graph = Arc::new(read_graph(&a.index)?);
    let queries = read_vectors(&a.queries)?;
    let defaults = EngineConfig::default();
    let config = EngineConfig {
        m: a.m.unwrap_or(defaults.m),
        p: a.p.unwrap_or(defaults.p),
        batch_capacity: a.capacity.unwrap_or(defaults.batch_capacity),
        ..defaults
    };
    config.validate()?;
    if a.k == 0 || a.k > config.m {
        return Err(UsageError(format!("--k {} must be in 1..={}", a.k, config.m)).into());
    }
    let mut results = Vec::with_capacity(queries.count());
    match a.mode {
        Mode::Sequential => {
            for q in queries.rows() {
                let c = search_sequential(q, &store, &graph, &config, a.k)?;
                results.push((c.neighbors, c.extends));
            }
        }
        Mode::Batch => {
            let mut engine = Engine::new(store, graph, config)?;
            for (i, q) in queries.rows().enumerate() {
                engine.submit(Admission {
                    request_id: i as u64,
                    query: q.to_vec(),
                    stage: RequestStage::Prefill,
                    t_arrival: 0.0,
                    deadline: None,
                    k: a.k,
                })?;
            }
            engine.run_to_completion()?;
            let mut done = engine.take_completed();
            done.sort_by_key(|c| c.request_id);
            results.extend(done.into_iter().map(|c| (c.neighbors, c.extends)));
        }
    }
    let mut text = String::new();
    for (i, (neighbors, extends)) in results.iter().enumerate() {
        let line = serde_json::json!({
            "query": i,
            "ids": neighbors.iter().map(|n| n.id).collect::<Vec<_>>(),
            "dists": neighbors.iter().map(|n| n.dist).collect::<Vec<_>>(),
            "extends": extends,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.spec)?;
    if let Some(seed) = a.seed {
        cfg.workload.seed = seed;
    }
    let trace = gen_trace(&cfg.workload)?;
    write_vectors(&a.out_vectors, &trace.queries)?;
    write_trace(&a.out_trace, &trace.requests)?;
    if let Some(db) = &a.out_db {
        write_vectors(db, &gen_vectors(cfg.workload.n_db, cfg.workload.dim, cfg.workload.seed))?;
    }
    log::info!("generated {} requests, {} query vectors", trace.requests.len(), trace.queries.count());
    Ok(())
}

fn roofline(a: RooflineArgs) -> Result<()> {
    let stage = a.stage.as_deref().map(str::parse::<Stage>).transpose()?;
    let preset = stage.map(StageRooflineParams::<f64>::preset);
    let pick = |v: Option<f64>, flag: &str, from: fn(&StageRooflineParams<f64>) -> f64| -> Result<f64> {
        v.or_else(|| preset.as_ref().map(from))
            .ok_or_else(|| UsageError(format!("missing --{flag} (or pass --stage for a preset)")).into())
    };
    let params = StageRooflineParams::new(
        stage.unwrap_or(Stage::Ann),
        pick(a.ai, "ai", |p| p.ai())?,
        pick(a.mem_bw, "mem-bw", |p| p.mem_bw())?,
        pick(a.peak_flops, "peak-flops", |p| p.peak_flops())?,
        pick(a.x_sat, "x-sat", |p| p.x_sat())?,
        pick(a.alpha, "alpha", |p| p.alpha())?,
    )?;
    let xs = parse_sample_points(&a.xs).context("--xs")?;
    let curve = params.sample_curve(&xs).context("--xs")?;
    emit(a.out.as_deref(), &curve.to_csv())
}

fn load_world(config: &Path, seed: u64) -> Result<(RunConfig, World)> {
    let mut cfg = RunConfig::load(config)?;
    cfg.workload.seed = seed;
    let world = World::generate(&cfg.workload, cfg.index.degree, seed)?;
    Ok((cfg, world))
}

fn sim(a: SimArgs) -> Result<()> {
    let arch: Architecture = a.arch.parse()?;
    let (cfg, world) = load_world(&a.config, a.seed)?;
    let run = simulate(&world, arch, &cfg.setup()?)?;
    write_sim_artifacts(&a.out, &run, &cfg.resolved())?;
    emit(None, &ragpool_core::sim::summary_csv(&[&run.metrics]))
}

fn compare(a: CompareArgs) -> Result<()> {
    let (cfg, world) = load_world(&a.config, a.seed)?;
    let runs = compare_architectures(&world, &cfg.setup()?)?;
    write_compare_artifacts(&a.out, &runs, &cfg.resolved())?;
    let rows: Vec<_> = runs.iter().map(|r| &r.metrics).collect();
    emit(None, &ragpool_core::sim::summary_csv(&rows))
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let (store, graph) = match (&a.vectors, &a.index) {
        (Some(v), Some(i)) => (read_vectors(v)?, read_graph(i)?),
        _ => {
            let store = gen_vectors(cfg.workload.n_db, cfg.workload.dim, a.seed);
            let graph = build_knn_graph(&store, cfg.index.degree)?;
            (store, graph)
        }
    };
    let queries = match &a.queries {
        Some(q) => Some(read_vectors(q)?),
        None if a.n_queries == 0 => None,
        None => Some(gen_vectors_stream(a.n_queries, store.dim(), a.seed, STREAM_QUERIES)),
    };
    if a.k == 0 || a.k > cfg.engine.m {
        return Err(UsageError(format!("--k {} must be in 1..={}", a.k, cfg.engine.m)).into());
    }
    let (store, graph) = (Arc::new(store), Arc::new(graph));
    let summary = match &queries {
        Some(q) => bench_engine(store, graph, q, &cfg.engine, a.k)?,
        None => ragpool_core::bench::bench_rows(store, graph, Vec::new(), &cfg.engine, a.k)?,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildIndex(a) => build_index(a),
        Command::Search(a) => search(a),
        Command::Gen(a) => gen(a),
        Command::Roofline(a) => roofline(a),
        Command::Sim(a) => sim(a),
        Command::Compare(a) => compare(a),
        Command::BenchEngine(a) => bench(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_INPUT;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Internal(_) => EXIT_INTERNAL,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INTERNAL
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RAGPOOL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
                | ErrorKind::MissingSubcommand => EXIT_USAGE,
                _ => EXIT_INPUT,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
