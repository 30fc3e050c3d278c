use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};
use craftbench::sae::{
    intervene, layer_sweep, neuron_choice_beta, neuron_correlation, sweep_profile, train_sae, ActivationMatrix,
    ProbeTarget, SaeHyper, SaeModel,
};

use crate::{output, parse_named_path};

#[derive(Subcommand)]
pub enum SaeCommand {
    /// Train a tied-weight SAE on an activation matrix.
    Train(TrainArgs),
    /// Score every latent neuron against a target.
    Probe(ProbeArgs),
    /// Train one SAE per layer and probe each.
    Sweep(SweepArgs),
    /// Scale one latent neuron and decode.
    Intervene(InterveneArgs),
}

#[derive(Args, Clone)]
pub struct HyperArgs {
    /// Latent width; defaults to the input width.
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    momentum: Option<f64>,
    /// Keep row order fixed across epochs.
    #[arg(long)]
    no_shuffle: bool,
}

impl HyperArgs {
    fn hyper(&self) -> SaeHyper {
        SaeHyper {
            latent: self.latent,
            lambda: self.lambda,
            lr: self.lr,
            batch: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            momentum: self.momentum,
            shuffle: !self.no_shuffle,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    activations: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training report (JSON); stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TargetKind {
    /// Continuous target, Pearson r per neuron.
    Pearson,
    /// Binary chosen/not-chosen target, logistic beta per neuron.
    Choice,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    /// One value per line, aligned with the activation rows.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum, default_value = "pearson")]
    kind: TargetKind,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Activation matrix per layer as `layer=path`.
    #[arg(long = "layer", value_parser = parse_named_path, required = true)]
    layers: Vec<(String, PathBuf)>,
    /// Continuous target as `name=path`.
    #[arg(long = "target", value_parser = parse_named_path)]
    targets: Vec<(String, PathBuf)>,
    /// Binary target as `name=path`.
    #[arg(long = "choice-target", value_parser = parse_named_path)]
    choice_targets: Vec<(String, PathBuf)>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
pub struct InterveneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    neuron: usize,
    /// Multiplier for the neuron's activation; 0 ablates it.
    #[arg(long)]
    factor: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cmd: SaeCommand) -> Result<()> {
    match cmd {
        SaeCommand::Train(a) => train(a),
        SaeCommand::Probe(a) => probe(a),
        SaeCommand::Sweep(a) => sweep(a),
        SaeCommand::Intervene(a) => intervene_cmd(a),
    }
}

fn load_matrix(path: &Path) -> Result<ActivationMatrix> {
    ActivationMatrix::load(path).with_context(|| format!("loading activations {}", path.display()))
}

fn load_model(path: &Path) -> Result<SaeModel> {
    Ok(SaeModel::load(path).with_context(|| format!("loading model {}", path.display()))?.0)
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| match t {
            "true" => Ok(1.0),
            "false" => Ok(0.0),
            _ => t.parse::<f64>().with_context(|| format!("{t:?} in {} is not a number", path.display())),
        })
        .collect()
}

fn read_choices(path: &Path) -> Result<Vec<bool>> {
    read_numbers(path)?
        .into_iter()
        .map(|v| {
            if v == 1.0 {
                Ok(true)
            } else if v == 0.0 {
                Ok(false)
            } else {
                bail!("choice targets must be 0 or 1, found {v}")
            }
        })
        .collect()
}

fn write_json(path: Option<&Path>, value: serde_json::Value) -> Result<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, &value)?;
    writeln!(out)?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let x = load_matrix(&args.activations)?;
    let hyper = args.hyper.hyper();
    let (model, report) = train_sae(&x, &hyper)?;
    model.save(&args.out, Some(hyper))?;
    write_json(args.report.as_deref(), serde_json::to_value(&report)?)
}

fn probe(args: ProbeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let x = load_matrix(&args.activations)?;
    let z = model.encode(&x.to_matrix())?;
    let result = match args.kind {
        TargetKind::Pearson => neuron_correlation(&z, &read_numbers(&args.target)?)?,
        TargetKind::Choice => neuron_choice_beta(&z, &read_choices(&args.target)?)?,
    };
    let layer = x.meta().first().map_or(0, |m| m.layer);
    write_json(args.out.as_deref(), serde_json::to_value(result.with_layer(layer))?)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut matrices = BTreeMap::new();
    for (layer, path) in &args.layers {
        let layer: u32 = layer.parse().with_context(|| format!("layer {layer:?} is not a number"))?;
        matrices.insert(layer, load_matrix(path)?);
    }
    let mut targets = BTreeMap::new();
    for (name, path) in &args.targets {
        targets.insert(name.clone(), ProbeTarget::Continuous(read_numbers(path)?));
    }
    for (name, path) in &args.choice_targets {
        targets.insert(name.clone(), ProbeTarget::Choice(read_choices(path)?));
    }
    if targets.is_empty() {
        bail!("give at least one --target or --choice-target");
    }
    let rows = layer_sweep(&matrices, &targets, &args.hyper.hyper())?;
    let out = serde_json::json!({ "layers": rows, "profile": sweep_profile(&rows) });
    write_json(args.out.as_deref(), out)
}

fn intervene_cmd(args: InterveneArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let x = load_matrix(&args.activations)?;
    intervene(&model, &x, args.neuron, args.factor)?.save(&args.out)?;
    Ok(())
}
