use std::path::{Path, PathBuf};
use std::sync::Arc;

use craftbench::agents::{PolicyKind, ValueWeights};
use craftbench::engine::TrialLogError;
use craftbench::harness::{replay_session, run_experiment, AgentSpec, ExperimentConfig, HarnessError};
use craftbench::synthetic::{g4, planted_chain_graph};

const GOLDEN: &str = "tests/fixtures/golden/random_g4_seed0.jsonl";

fn config(dir: &Path, out: &str) -> ExperimentConfig {
    let graph = dir.join("g4.json");
    std::fs::write(&graph, g4().to_json()).unwrap();
    ExperimentConfig {
        graph,
        agent: AgentSpec::scripted(PolicyKind::Random, ValueWeights::default()),
        temperatures: vec![0.0],
        repetitions: 1,
        max_trials: 10,
        seed_base: 0,
        output_dir: dir.join(out),
        parallelism: 1,
        empowerment: Default::default(),
    }
}

fn session_log(dir: &Path, out: &str) -> PathBuf {
    let cfg = config(dir, out);
    let manifest = run_experiment(&cfg).unwrap();
    assert_eq!(manifest.sessions.len(), 1);
    cfg.output_dir.join(&manifest.sessions[0].log)
}

#[test]
fn random_run_matches_golden_log() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(session_log(dir.path(), "a")).unwrap();
    let b = std::fs::read(session_log(dir.path(), "b")).unwrap();
    assert_eq!(a, b);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("CRAFTBENCH_BLESS").is_some() {
        std::fs::write(&golden, &a).unwrap();
    }
    assert_eq!(String::from_utf8(a).unwrap(), std::fs::read_to_string(golden).unwrap());
}

#[test]
fn golden_log_replays() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    let state = replay_session(&golden, Arc::new(g4())).unwrap();
    assert_eq!(state.trials(), 10);
}

#[test]
fn replay_on_other_graph_is_rejected() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    let err = replay_session(&golden, Arc::new(planted_chain_graph(30, 1))).unwrap_err();
    assert!(matches!(err, HarnessError::GraphMismatch { .. }), "{err}");
}

#[test]
fn truncated_log_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    let text = std::fs::read_to_string(golden).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut cut = lines[..4].join("\n");
    cut.push('\n');
    cut.push_str(&lines[4][..lines[4].len() / 2]);
    let path = dir.path().join("cut.jsonl");
    std::fs::write(&path, cut).unwrap();
    match replay_session(&path, Arc::new(g4())) {
        Err(HarnessError::LogCorrupt(TrialLogError::Corrupt { line, .. })) => assert_eq!(line, 5),
        other => panic!("expected corrupt log, got {other:?}"),
    }
}

#[test]
fn zero_repetitions_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "z");
    cfg.repetitions = 0;
    assert!(matches!(run_experiment(&cfg), Err(HarnessError::Validation(_))));
    assert!(!cfg.output_dir.exists());
}
