mod analyze;
mod sae;
mod trace;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use craftbench::harness::{replay_session, run_experiment, ExperimentConfig};
use craftbench::recipes::{difficulty_curve, load_graph};
use craftbench_server::{AppState, ServerConfig, DEFAULT_GRAPH};

#[derive(Parser)]
#[command(name = "craftbench", version, about = "Open-ended exploration benchmark on a crafting game")]
struct Cli {
    /// Log filter, e.g. `info` or `craftbench=debug`.
    #[arg(long, global = true, env = "CRAFTBENCH_LOG", default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run(RunArgs),
    /// Statistics over finished runs.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
    /// Mean success probability by inventory size under random play.
    Difficulty(DifficultyArgs),
    /// Sparse autoencoders over activation matrices.
    #[command(subcommand)]
    Sae(sae::SaeCommand),
    /// Reasoning-trace labeling and statistics.
    #[command(subcommand)]
    Trace(trace::TraceCommand),
    /// Start the HTTP session service.
    Serve(ServeArgs),
    /// Re-apply a session log against a graph and check every trial.
    Replay(ReplayArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_trials: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(clap::Args)]
struct DifficultyArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 500)]
    max_trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ServeArgs {
    /// Graph file served as `default`; more as `name=path` with `--extra-graph`.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long = "extra-graph", value_parser = parse_named_path)]
    extra_graphs: Vec<(String, PathBuf)>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    max_trials: Option<usize>,
    /// Shared token clients must send as a bearer token.
    #[arg(long, env = "CRAFTBENCH_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

#[derive(clap::Args)]
struct ReplayArgs {
    log: PathBuf,
    #[arg(long)]
    graph: PathBuf,
}

pub(crate) fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got {s:?}"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

/// Writer for `--out`, or stdout.
pub(crate) fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(d) = args.output_dir {
        config.output_dir = d;
    }
    if let Some(s) = args.seed_base {
        config.seed_base = s;
    }
    if let Some(p) = args.parallelism {
        config.parallelism = p;
    }
    if let Some(m) = args.max_trials {
        config.max_trials = m;
    }
    if let Some(r) = args.repetitions {
        config.repetitions = r;
    }
    let manifest = run_experiment(&config)?;
    println!("{}", config.output_dir.join("manifest.json").display());
    for s in &manifest.sessions {
        println!(
            "session {:03} t={} rep={} discoveries={}",
            s.index, s.temperature, s.repetition, s.summary.discoveries
        );
    }
    for a in &manifest.aborted {
        eprintln!("session {:03} aborted after {} trials: {}", a.index, a.trials_completed, a.error);
    }
    Ok(())
}

fn difficulty(args: DifficultyArgs) -> Result<()> {
    let graph = load_graph(&args.graph)?;
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    for p in difficulty_curve(&graph, &seeds, args.max_trials) {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut config = ServerConfig {
        checkpoint_dir: args.checkpoint_dir,
        token: args.token,
        static_dir: args.static_dir,
        max_trials: args.max_trials,
        ..ServerConfig::default()
    };
    config.graphs.insert(DEFAULT_GRAPH.to_string(), Arc::new(load_graph(&args.graph)?));
    for (name, path) in args.extra_graphs {
        config.graphs.insert(name, Arc::new(load_graph(&path)?));
    }
    let state = AppState::recover(config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(craftbench_server::serve(args.addr, state))?;
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let graph = Arc::new(load_graph(&args.graph)?);
    let state = replay_session(&args.log, graph)?;
    let s = state.summary();
    println!("ok: {} trials replayed, {} discoveries", s.trials, s.discoveries);
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Analyze(c) => analyze::run(c),
        Command::Difficulty(a) => difficulty(a),
        Command::Sae(c) => sae::run(c),
        Command::Trace(c) => trace::run(c),
        Command::Serve(a) => serve(a),
        Command::Replay(a) => replay(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
