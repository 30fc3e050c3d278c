use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use craftbench::analytics::{
    behavior_summary, build_choice_dataset, estimates_plot_json, model1_rows, read_choice_csv, regression_rows,
    run_model1, run_model2, welch_t, write_behavior_csv, write_choice_csv, write_estimates_csv, ChoiceDatum,
    FitOptions, HumanBaseline, RunData,
};
use craftbench::engine::read_trial_log;
use craftbench::harness::RunManifest;

use crate::{output, parse_named_path};

#[derive(Subcommand)]
pub enum AnalyzeCommand {
    /// Behavior-category proportions per agent and temperature.
    Behavior(BehaviorArgs),
    /// Per-run choice regressions pooled across runs.
    Model1(ModelArgs),
    /// Pooled choice regression with temperature interactions.
    Model2(ModelArgs),
    /// Welch's t-test on discoveries per session.
    Ttest(TtestArgs),
    /// Percentile of discoveries within a human baseline.
    Percentile(PercentileArgs),
}

#[derive(Args)]
pub struct BehaviorArgs {
    /// Run directories (each holding a manifest.json).
    #[arg(long = "runs", num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Extra session logs as `group=path`, e.g. human sessions.
    #[arg(long = "log", value_parser = parse_named_path)]
    logs: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ModelArgs {
    #[arg(long = "runs", num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Ready-made choice datasets (CSV), e.g. from human sessions.
    #[arg(long = "choices", num_args = 1..)]
    choices: Vec<PathBuf>,
    /// Seed for negative sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimate table (CSV); stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plot-ready estimates (JSON).
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Also write the assembled choice dataset.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TtestArgs {
    /// Run directory or a file of whitespace-separated numbers.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
pub struct PercentileArgs {
    /// JSON `{discoveries: [...], trials_cap}`.
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long, conflicts_with = "runs")]
    value: Option<f64>,
    /// Run directory; reports the mean discoveries of its sessions.
    #[arg(long)]
    runs: Option<PathBuf>,
}

pub fn run(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Behavior(a) => behavior(a),
        AnalyzeCommand::Model1(a) => model1(a),
        AnalyzeCommand::Model2(a) => model2(a),
        AnalyzeCommand::Ttest(a) => ttest(a),
        AnalyzeCommand::Percentile(a) => percentile(a),
    }
}

fn manifest(dir: &Path) -> Result<RunManifest> {
    RunManifest::load(&dir.join("manifest.json")).with_context(|| format!("loading run {}", dir.display()))
}

/// Sessions of a run directory with run ids made unique across runs.
fn load_runs(dir: &Path) -> Result<Vec<RunData>> {
    let m = manifest(dir)?;
    let mut runs = m.load_runs(dir)?;
    for r in &mut runs {
        r.run_id = format!("{}/{}", m.run_id, r.run_id);
    }
    Ok(runs)
}

fn behavior(args: BehaviorArgs) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<Vec<craftbench::engine::TrialRecord>>> = BTreeMap::new();
    for dir in &args.runs {
        let m = manifest(dir)?;
        let label = m.config.agent.label();
        for s in &m.sessions {
            let (_, trials) = read_trial_log(BufReader::new(File::open(dir.join(&s.log))?))?;
            groups.entry(format!("{label} t={}", s.temperature)).or_default().push(trials);
        }
    }
    for (group, path) in &args.logs {
        let (_, trials) =
            read_trial_log(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))?;
        groups.entry(group.clone()).or_default().push(trials);
    }
    if groups.is_empty() {
        bail!("give at least one --runs directory or --log file");
    }
    write_behavior_csv(&behavior_summary(groups), output(args.out.as_deref())?)?;
    Ok(())
}

fn choice_data(args: &ModelArgs) -> Result<Vec<ChoiceDatum>> {
    let mut runs = Vec::new();
    for dir in &args.runs {
        runs.extend(load_runs(dir)?);
    }
    let mut rows = if runs.is_empty() { Vec::new() } else { build_choice_dataset(&runs, args.seed)?.rows };
    for path in &args.choices {
        rows.extend(read_choice_csv(File::open(path).with_context(|| format!("opening {}", path.display()))?)?);
    }
    if rows.is_empty() {
        bail!("no choice data: give --runs or --choices");
    }
    if let Some(p) = &args.dataset_out {
        write_choice_csv(&rows, File::create(p)?)?;
    }
    Ok(rows)
}

fn write_estimates(args: &ModelArgs, rows: &[craftbench::analytics::EstimateRow]) -> Result<()> {
    write_estimates_csv(rows, output(args.out.as_deref())?)?;
    if let Some(p) = &args.plot {
        std::fs::write(p, serde_json::to_string_pretty(&estimates_plot_json(rows))?)?;
    }
    Ok(())
}

fn model1(args: ModelArgs) -> Result<()> {
    let rows = choice_data(&args)?;
    let result = run_model1(&rows, FitOptions::default())?;
    for (term, p) in &result.pooled {
        eprintln!("{term}: {:.4} (se {:.4}, z {:.2}, p {:.3e}, {} runs)", p.estimate, p.se, p.z, p.p, p.runs);
    }
    write_estimates(&args, &model1_rows(&result))
}

fn model2(args: ModelArgs) -> Result<()> {
    let rows = choice_data(&args)?;
    let result = run_model2(&rows, FitOptions::default())?;
    for (term, t) in &result.terms {
        eprintln!("{term}: {:.4} (se {:.4}, z {:.2}, p {:.3e})", t.estimate, t.se, t.z, t.p);
    }
    write_estimates(&args, &regression_rows("model2", &result))
}

/// Discoveries per completed session of a run, or numbers from a file.
fn sample(path: &Path) -> Result<Vec<f64>> {
    if path.is_dir() {
        return Ok(manifest(path)?.sessions.iter().map(|s| s.summary.discoveries as f64).collect());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| t.parse::<f64>().with_context(|| format!("{t:?} in {} is not a number", path.display())))
        .collect()
}

fn ttest(args: TtestArgs) -> Result<()> {
    let (a, b) = (sample(&args.a)?, sample(&args.b)?);
    let r = welch_t(&a, &b)?;
    let out = serde_json::json!({
        "n_a": a.len(), "n_b": b.len(),
        "t": r.t, "df": r.df, "p": r.p,
        "p_greater": r.p_greater(), "p_less": r.p_less(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn percentile(args: PercentileArgs) -> Result<()> {
    let baseline = HumanBaseline::load(&args.baseline)?;
    let value = match (args.value, &args.runs) {
        (Some(v), _) => v,
        (None, Some(dir)) => {
            let s = sample(dir)?;
            if s.is_empty() {
                bail!("run {} has no completed sessions", dir.display());
            }
            s.iter().sum::<f64>() / s.len() as f64
        }
        (None, None) => bail!("give --value or --runs"),
    };
    let out = serde_json::json!({"value": value, "percentile": baseline.percentile(value), "players": baseline.discoveries.len()});
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
