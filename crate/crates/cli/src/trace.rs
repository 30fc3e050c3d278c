use std::fs::File;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use craftbench::agents::{LlmClient, LlmEndpointConfig};
use craftbench::trace::{
    label_traces, load_traces, read_labeled_sentences, read_spans_tsv, trace_stats, write_spans_tsv,
    write_stats_csv, FileClassifier, LlmClassifier, Segmenter, SentenceClassifier, TransitionMatrix,
};

use crate::output;

#[derive(Subcommand)]
pub enum TraceCommand {
    /// Segment, label and merge reasoning traces into spans (TSV).
    Label(LabelArgs),
    /// Per-trial depth, label coverage and tokens per label (CSV).
    Stats(SpansArgs),
    /// Label-transition matrix (CSV).
    Transitions(TransitionArgs),
}

#[derive(Args)]
pub struct LabelArgs {
    /// JSONL of `{trial, text}`.
    #[arg(long)]
    traces: PathBuf,
    /// Pre-labeled sentences (TSV) instead of a live classifier.
    #[arg(long, conflicts_with = "endpoint")]
    labels: Option<PathBuf>,
    /// Chat-completions base URL for the classifier.
    #[arg(long, requires = "model")]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long, default_value_t = 40)]
    batch: usize,
    /// Extra abbreviations that never end a sentence.
    #[arg(long = "abbreviation")]
    abbreviations: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SpansArgs {
    /// Spans written by `trace label`.
    #[arg(long)]
    spans: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TransitionArgs {
    #[arg(long, required_unless_present = "sentences")]
    spans: Option<PathBuf>,
    /// Labeled sentences (TSV); counts transitions before merging.
    #[arg(long, conflicts_with = "spans")]
    sentences: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cmd: TraceCommand) -> Result<()> {
    match cmd {
        TraceCommand::Label(a) => label(a),
        TraceCommand::Stats(a) => stats(a),
        TraceCommand::Transitions(a) => transitions(a),
    }
}

fn label(args: LabelArgs) -> Result<()> {
    let traces = load_traces(&args.traces).with_context(|| format!("reading {}", args.traces.display()))?;
    let mut segmenter = Segmenter::default();
    for a in &args.abbreviations {
        segmenter = segmenter.with_abbreviation(a);
    }
    let classifier: Box<dyn SentenceClassifier> = match (&args.labels, &args.endpoint, &args.model) {
        (Some(path), _, _) => Box::new(FileClassifier::load(path)?),
        (None, Some(url), Some(model)) => {
            let mut cfg = LlmEndpointConfig::new(url.as_str(), model.as_str());
            cfg.temperature = 0.0;
            cfg.api_key_env = args.api_key_env.clone();
            Box::new(LlmClassifier::new(LlmClient::new(cfg)?, args.batch))
        }
        _ => bail!("give --labels or --endpoint with --model"),
    };
    let labeled = label_traces(&traces, &segmenter, classifier.as_ref())?;
    write_spans_tsv(&labeled, output(args.out.as_deref())?)?;
    Ok(())
}

fn stats(args: SpansArgs) -> Result<()> {
    let trials = read_spans_tsv(File::open(&args.spans)?)?;
    write_stats_csv(&trace_stats(&trials), output(args.out.as_deref())?)?;
    Ok(())
}

fn transitions(args: TransitionArgs) -> Result<()> {
    let matrix = match (&args.spans, &args.sentences) {
        (Some(path), _) => {
            let trials = read_spans_tsv(File::open(path)?)?;
            TransitionMatrix::from_spans(&trials.iter().map(|t| t.spans.clone()).collect::<Vec<_>>())
        }
        (None, Some(path)) => {
            let rows = read_labeled_sentences(File::open(path)?)?;
            let mut trials: Vec<(usize, Vec<(String, craftbench::trace::ReasoningLabel)>)> = Vec::new();
            for r in rows {
                match trials.last_mut() {
                    Some((t, items)) if *t == r.trial => items.push((r.text, r.label)),
                    _ => trials.push((r.trial, vec![(r.text, r.label)])),
                }
            }
            TransitionMatrix::from_sentences(&trials.into_iter().map(|(_, s)| s).collect::<Vec<_>>())
        }
        (None, None) => bail!("give --spans or --sentences"),
    };
    let empty = matrix.empty_rows();
    if !empty.is_empty() {
        log::info!("labels without outgoing transitions: {empty:?}");
    }
    matrix.write_csv(output(args.out.as_deref())?)?;
    Ok(())
}
