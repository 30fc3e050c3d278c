//! Reasoning traces: sentence segmentation, labeling, span merging,
//! per-trial statistics and label-transition matrices.
//!
//! A token is a whitespace-delimited unit throughout.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, ChatMessage, LlmClient};

pub const CLASSIFIER_PROMPT: &str = include_str!("../assets/prompts/classifier_v1.txt");
pub const CLASSIFIER_PROMPT_VERSION: &str = "classifier_v1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("unknown reasoning label {0:?}")]
    UnknownLabel(String),
    #[error(transparent)]
    Transport(#[from] AgentError),
    #[error("classifier returned {got} labels for {expected} sentences")]
    LabelCountMismatch { expected: usize, got: usize },
    #[error("no label for trial {trial}, sentence {sentence}")]
    MissingLabel { trial: usize, sentence: usize },
    #[error("trial {trial}, sentence {sentence}: text differs from the labeled file")]
    TextMismatch { trial: usize, sentence: usize },
    #[error("line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningLabel {
    StateGoal,
    CheckCurrentInventory,
    PastTrialAnalysis,
    ElementPropertyReasoning,
    CombinationAnalysis,
    OutcomePrediction,
    FinalChoice,
}

impl ReasoningLabel {
    pub const ALL: [ReasoningLabel; 7] = [
        ReasoningLabel::StateGoal,
        ReasoningLabel::CheckCurrentInventory,
        ReasoningLabel::PastTrialAnalysis,
        ReasoningLabel::ElementPropertyReasoning,
        ReasoningLabel::CombinationAnalysis,
        ReasoningLabel::OutcomePrediction,
        ReasoningLabel::FinalChoice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningLabel::StateGoal => "state_goal",
            ReasoningLabel::CheckCurrentInventory => "check_current_inventory",
            ReasoningLabel::PastTrialAnalysis => "past_trial_analysis",
            ReasoningLabel::ElementPropertyReasoning => "element_property_reasoning",
            ReasoningLabel::CombinationAnalysis => "combination_analysis",
            ReasoningLabel::OutcomePrediction => "outcome_prediction",
            ReasoningLabel::FinalChoice => "final_choice",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Accepts the exact name after trimming, lowercasing, stripping a
    /// leading list marker and surrounding punctuation, and mapping spaces
    /// and hyphens to underscores.
    pub fn parse(raw: &str) -> Result<Self, TraceError> {
        let mut s = raw.trim();
        s = strip_list_marker(s).trim();
        let norm: String = s
            .trim_matches(|c: char| !c.is_alphanumeric() && c != '_')
            .to_lowercase()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c })
            .collect();
        ReasoningLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == norm)
            .ok_or_else(|| TraceError::UnknownLabel(raw.to_string()))
    }
}

impl std::fmt::Display for ReasoningLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ReasoningLabel {
    type Err = TraceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Drops `-`, `*`, `•`, `1.` or `1)` at the start of a line.
fn strip_list_marker(s: &str) -> &str {
    list_marker_len(s).map_or(s, |n| &s[n..])
}

/// Byte length of a list marker plus its following space, if `s` starts
/// with one.
fn list_marker_len(s: &str) -> Option<usize> {
    let mut chars = s.char_indices();
    let (_, first) = chars.next()?;
    let after = if matches!(first, '-' | '*' | '•') {
        first.len_utf8()
    } else if first.is_ascii_digit() {
        let digits = s.bytes().take_while(|b| b.is_ascii_digit()).count();
        match s.as_bytes().get(digits) {
            Some(b'.') | Some(b')') => digits + 1,
            _ => return None,
        }
    } else {
        return None;
    };
    match s[after..].chars().next() {
        Some(c) if c.is_whitespace() => Some(after + c.len_utf8()),
        _ => None,
    }
}

pub const DEFAULT_ABBREVIATIONS: &[&str] = &["e.g.", "i.e.", "vs.", "cf.", "approx.", "mr.", "mrs.", "dr."];

/// Sentence splitter with a configurable abbreviation list.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: Vec<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter::new(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

impl Segmenter {
    pub fn new<'a>(abbreviations: impl IntoIterator<Item = &'a str>) -> Self {
        Segmenter { abbreviations: abbreviations.into_iter().map(|a| a.to_lowercase()).collect() }
    }

    pub fn with_abbreviation(mut self, abbr: &str) -> Self {
        self.abbreviations.push(abbr.to_lowercase());
        self
    }

    /// Splits after `.`, `!` or `?` (plus closing quotes or brackets) when
    /// followed by whitespace or the end, before list items that start a
    /// new line, and at blank lines. Segments are trimmed and never empty.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = text.as_bytes();
        let mut i = 0;
        let push = |from: usize, to: usize, out: &mut Vec<String>| {
            let s = text[from..to].trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
        };
        while i < bytes.len() {
            let c = bytes[i];
            if c == b'\n' {
                let rest = &text[i + 1..];
                let line = rest.trim_start_matches([' ', '\t', '\r']);
                let blank = line.starts_with('\n') || line.is_empty();
                if blank || list_marker_len(line).is_some() {
                    push(start, i, &mut out);
                    start = i + 1;
                }
                i += 1;
                continue;
            }
            if matches!(c, b'.' | b'!' | b'?') {
                let mut end = i + 1;
                while end < bytes.len() && matches!(bytes[end], b'.' | b'!' | b'?' | b'"' | b'\'' | b')' | b']') {
                    end += 1;
                }
                let at_gap = end == bytes.len() || text[end..].starts_with(char::is_whitespace);
                if at_gap && !self.suppressed(text, start, i, end) {
                    push(start, end, &mut out);
                    start = end;
                }
                i = end;
                continue;
            }
            i += 1;
        }
        push(start, text.len(), &mut out);
        out
    }

    /// Abbreviations and list numbers do not end sentences.
    fn suppressed(&self, text: &str, seg_start: usize, dot: usize, end: usize) -> bool {
        let word_start = text[..dot].rfind(char::is_whitespace).map_or(0, |p| p + 1);
        let word = text[word_start..end].trim_start_matches(['(', '"', '\'']).to_lowercase();
        if self.abbreviations.contains(&word) {
            return true;
        }
        let line_start = text[..word_start].trim_end_matches([' ', '\t']);
        let at_line_start = word_start.max(seg_start) == seg_start
            || line_start.is_empty()
            || line_start.ends_with('\n');
        let number = &text[word_start..dot];
        at_line_start && text.as_bytes()[dot] == b'.' && !number.is_empty() && number.bytes().all(|b| b.is_ascii_digit())
    }
}

pub fn segment_sentences(text: &str) -> Vec<String> {
    Segmenter::default().segment(text)
}

/// Inverse of segmentation: `segment(join_segments(segment(t)))` equals
/// `segment(t)`.
pub fn join_segments<S: AsRef<str>>(segments: &[S]) -> String {
    segments.iter().map(|s| s.as_ref()).collect::<Vec<_>>().join("\n\n")
}

pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Assigns one label per sentence of a trial.
pub trait SentenceClassifier: Sync {
    fn classify(&self, trial: usize, sentences: &[String]) -> Result<Vec<ReasoningLabel>, TraceError>;
}

pub fn classify_sentences(
    classifier: &dyn SentenceClassifier,
    trial: usize,
    sentences: &[String],
) -> Result<Vec<(String, ReasoningLabel)>, TraceError> {
    let labels = classifier.classify(trial, sentences)?;
    if labels.len() != sentences.len() {
        return Err(TraceError::LabelCountMismatch { expected: sentences.len(), got: labels.len() });
    }
    Ok(sentences.iter().cloned().zip(labels).collect())
}

/// Labels sentences through a chat endpoint, `batch` sentences per request.
/// Batches go out concurrently (bounded by the client) and are reassembled
/// in order.
pub struct LlmClassifier {
    client: LlmClient,
    batch: usize,
}

impl LlmClassifier {
    pub fn new(client: LlmClient, batch: usize) -> Self {
        LlmClassifier { client, batch: batch.max(1) }
    }

    fn classify_batch(&self, sentences: &[String]) -> Result<Vec<ReasoningLabel>, TraceError> {
        let numbered: String =
            sentences.iter().enumerate().map(|(i, s)| format!("{}. {}\n", i + 1, s.replace('\n', " "))).collect();
        let messages = vec![
            ChatMessage { role: "system".into(), content: CLASSIFIER_PROMPT.to_string() },
            ChatMessage { role: "user".into(), content: numbered },
        ];
        let reply = self.client.chat(&messages)?;
        let labels = reply
            .content
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(ReasoningLabel::parse)
            .collect::<Result<Vec<_>, _>>()?;
        if labels.len() != sentences.len() {
            return Err(TraceError::LabelCountMismatch { expected: sentences.len(), got: labels.len() });
        }
        Ok(labels)
    }
}

impl SentenceClassifier for LlmClassifier {
    fn classify(&self, _trial: usize, sentences: &[String]) -> Result<Vec<ReasoningLabel>, TraceError> {
        let batches: Vec<&[String]> = sentences.chunks(self.batch).collect();
        let results: Vec<Result<Vec<ReasoningLabel>, TraceError>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches.iter().map(|b| s.spawn(|| self.classify_batch(b))).collect();
            handles.into_iter().map(|h| h.join().expect("classifier thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(sentences.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// One row of a pre-labeled sentence file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub trial: usize,
    pub sentence: usize,
    pub label: ReasoningLabel,
    pub text: String,
}

/// Labels looked up from a TSV file with columns
/// `trial, sentence, label, text`.
#[derive(Debug, Clone, Default)]
pub struct FileClassifier {
    labels: HashMap<(usize, usize), (ReasoningLabel, String)>,
}

impl FileClassifier {
    pub fn from_rows(rows: impl IntoIterator<Item = LabeledSentence>) -> Self {
        FileClassifier { labels: rows.into_iter().map(|r| ((r.trial, r.sentence), (r.label, r.text))).collect() }
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Ok(Self::from_rows(read_labeled_sentences(std::fs::File::open(path)?)?))
    }
}

impl SentenceClassifier for FileClassifier {
    fn classify(&self, trial: usize, sentences: &[String]) -> Result<Vec<ReasoningLabel>, TraceError> {
        sentences
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (label, text) =
                    self.labels.get(&(trial, i)).ok_or(TraceError::MissingLabel { trial, sentence: i })?;
                if text.trim() != s.trim() {
                    return Err(TraceError::TextMismatch { trial, sentence: i });
                }
                Ok(*label)
            })
            .collect()
    }
}

fn tsv_reader<R: std::io::Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().delimiter(b'\t').from_reader(input)
}

fn tsv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().delimiter(b'\t').from_writer(out)
}

pub fn read_labeled_sentences<R: std::io::Read>(input: R) -> Result<Vec<LabeledSentence>, TraceError> {
    let mut rows = Vec::new();
    for (i, rec) in tsv_reader(input).into_records().enumerate() {
        let rec = rec?;
        let bad = |detail: String| TraceError::Format { line: i + 2, detail };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let num = |k: usize| rec[k].trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        rows.push(LabeledSentence { trial: num(0)?, sentence: num(1)?, label: ReasoningLabel::parse(&rec[2])?, text: rec[3].to_string() });
    }
    Ok(rows)
}

pub fn write_labeled_sentences<W: Write>(rows: &[LabeledSentence], out: W) -> Result<(), TraceError> {
    let mut w = tsv_writer(out);
    w.write_record(["trial", "sentence", "label", "text"])?;
    for r in rows {
        w.write_record([r.trial.to_string(), r.sentence.to_string(), r.label.to_string(), r.text.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSpan {
    pub label: ReasoningLabel,
    pub text: String,
    pub token_count: usize,
    pub sentence_count: usize,
}

/// Collapses runs of equal labels, counting whitespace tokens.
pub fn merge_spans(labeled: &[(String, ReasoningLabel)]) -> Vec<LabeledSpan> {
    merge_spans_with(labeled, whitespace_tokens)
}

pub fn merge_spans_with(labeled: &[(String, ReasoningLabel)], tokenizer: impl Fn(&str) -> usize) -> Vec<LabeledSpan> {
    let mut spans: Vec<LabeledSpan> = Vec::new();
    for (text, label) in labeled {
        let tokens = tokenizer(text);
        match spans.last_mut() {
            Some(last) if last.label == *label => {
                last.text.push(' ');
                last.text.push_str(text);
                last.token_count += tokens;
                last.sentence_count += 1;
            }
            _ => spans.push(LabeledSpan { label: *label, text: text.clone(), token_count: tokens, sentence_count: 1 }),
        }
    }
    spans
}

/// Row-stochastic label transitions in [`ReasoningLabel::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub counts: [[u64; 7]; 7],
    pub probabilities: [[f64; 7]; 7],
    pub row_counts: [u64; 7],
}

impl TransitionMatrix {
    /// Counts consecutive label pairs within each sequence; nothing crosses
    /// sequence boundaries.
    pub fn from_sequences<S: AsRef<[ReasoningLabel]>>(sequences: &[S]) -> Self {
        let mut counts = [[0u64; 7]; 7];
        for seq in sequences {
            for w in seq.as_ref().windows(2) {
                counts[w[0].index()][w[1].index()] += 1;
            }
        }
        let mut row_counts = [0u64; 7];
        let mut probabilities = [[0.0; 7]; 7];
        for i in 0..7 {
            row_counts[i] = counts[i].iter().sum();
            if row_counts[i] > 0 {
                for j in 0..7 {
                    probabilities[i][j] = counts[i][j] as f64 / row_counts[i] as f64;
                }
            }
        }
        TransitionMatrix { counts, probabilities, row_counts }
    }

    /// Transitions between merged spans; the diagonal is zero.
    pub fn from_spans<S: AsRef<[LabeledSpan]>>(trials: &[S]) -> Self {
        let seqs: Vec<Vec<ReasoningLabel>> =
            trials.iter().map(|t| t.as_ref().iter().map(|s| s.label).collect()).collect();
        Self::from_sequences(&seqs)
    }

    /// Transitions between sentences before merging, so self-transitions
    /// are counted.
    pub fn from_sentences<S: AsRef<[(String, ReasoningLabel)]>>(trials: &[S]) -> Self {
        let seqs: Vec<Vec<ReasoningLabel>> =
            trials.iter().map(|t| t.as_ref().iter().map(|(_, l)| *l).collect()).collect();
        Self::from_sequences(&seqs)
    }

    pub fn probability(&self, from: ReasoningLabel, to: ReasoningLabel) -> f64 {
        self.probabilities[from.index()][to.index()]
    }

    /// Labels with no outgoing transitions; their rows are all zero.
    pub fn empty_rows(&self) -> Vec<ReasoningLabel> {
        ReasoningLabel::ALL.into_iter().filter(|l| self.row_counts[l.index()] == 0).collect()
    }

    /// 7×7 CSV with label names as header row and first column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TraceError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["from".to_string()];
        header.extend(ReasoningLabel::ALL.iter().map(|l| l.to_string()));
        w.write_record(&header)?;
        for l in ReasoningLabel::ALL {
            let mut rec = vec![l.to_string()];
            rec.extend(self.probabilities[l.index()].iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialStats {
    pub trial: usize,
    /// Number of merged spans.
    pub depth: usize,
    pub tokens: BTreeMap<ReasoningLabel, usize>,
    pub total_tokens: usize,
    /// Distinct labels used.
    pub coverage: usize,
}

pub fn trial_stats(trial: usize, spans: &[LabeledSpan]) -> TrialStats {
    let mut tokens: BTreeMap<ReasoningLabel, usize> = ReasoningLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for s in spans {
        *tokens.entry(s.label).or_default() += s.token_count;
    }
    let coverage = tokens.keys().filter(|l| spans.iter().any(|s| s.label == **l)).count();
    TrialStats { trial, depth: spans.len(), total_tokens: tokens.values().sum(), tokens, coverage }
}

pub fn trace_stats(trials: &[LabeledTrial]) -> Vec<TrialStats> {
    trials.iter().map(|t| trial_stats(t.trial, &t.spans)).collect()
}

/// Columns `trial, depth, coverage, total_tokens`, then one token column
/// per label.
pub fn write_stats_csv<W: Write>(rows: &[TrialStats], out: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["trial".to_string(), "depth".into(), "coverage".into(), "total_tokens".into()];
    header.extend(ReasoningLabel::ALL.iter().map(|l| l.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.trial.to_string(), r.depth.to_string(), r.coverage.to_string(), r.total_tokens.to_string()];
        rec.extend(ReasoningLabel::ALL.iter().map(|l| r.tokens[l].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trial: usize,
    pub text: String,
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TraceError::Format { line: i + 1, detail: e.to_string() })?);
    }
    Ok(out)
}

pub fn load_traces(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    read_traces(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledTrial {
    pub trial: usize,
    pub spans: Vec<LabeledSpan>,
}

/// Segments, classifies and merges every trace.
pub fn label_traces(
    traces: &[TraceRecord],
    segmenter: &Segmenter,
    classifier: &dyn SentenceClassifier,
) -> Result<Vec<LabeledTrial>, TraceError> {
    traces
        .iter()
        .map(|t| {
            let sentences = segmenter.segment(&t.text);
            let labeled = classify_sentences(classifier, t.trial, &sentences)?;
            Ok(LabeledTrial { trial: t.trial, spans: merge_spans(&labeled) })
        })
        .collect()
}

/// TSV with columns `trial, span, label, token_count, sentence_count, text`.
pub fn write_spans_tsv<W: Write>(trials: &[LabeledTrial], out: W) -> Result<(), TraceError> {
    let mut w = tsv_writer(out);
    w.write_record(["trial", "span", "label", "token_count", "sentence_count", "text"])?;
    for t in trials {
        for (i, s) in t.spans.iter().enumerate() {
            w.write_record([
                t.trial.to_string(),
                i.to_string(),
                s.label.to_string(),
                s.token_count.to_string(),
                s.sentence_count.to_string(),
                s.text.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads spans written by [`write_spans_tsv`]; trials keep first-seen
/// order and spans are ordered by index.
pub fn read_spans_tsv<R: std::io::Read>(input: R) -> Result<Vec<LabeledTrial>, TraceError> {
    let mut trials: Vec<(usize, Vec<(usize, LabeledSpan)>)> = Vec::new();
    for (i, rec) in tsv_reader(input).into_records().enumerate() {
        let rec = rec?;
        let bad = |detail: String| TraceError::Format { line: i + 2, detail };
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", rec.len())));
        }
        let num = |k: usize| rec[k].trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        let trial = num(0)?;
        let span = LabeledSpan {
            label: ReasoningLabel::parse(&rec[2])?,
            token_count: num(3)?,
            sentence_count: num(4)?,
            text: rec[5].to_string(),
        };
        let idx = num(1)?;
        match trials.iter_mut().find(|(t, _)| *t == trial) {
            Some((_, spans)) => spans.push((idx, span)),
            None => trials.push((trial, vec![(idx, span)])),
        }
    }
    Ok(trials
        .into_iter()
        .map(|(trial, mut spans)| {
            spans.sort_by_key(|(i, _)| *i);
            LabeledTrial { trial, spans: spans.into_iter().map(|(_, s)| s).collect() }
        })
        .collect())
}
