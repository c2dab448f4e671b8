use hybridroi::config::ExperimentConfig;
use hybridroi::data::Partition;
use hybridroi::experiment::{run_eval, run_train, BEST_DIR, HISTORY_FILE, LAST_DIR, RESOLVED_CONFIG_FILE, SPLIT_FILE};

const MICRO: &str = r#"{"seed": 5,
    "model": {"preset": "tiny", "token_dim": 16, "image_size": 32, "scan": {"blocks": 1, "state_dim": 4}},
    "data": {"synth": {"n": 40, "size": 32}},
    "train": {"epochs": 3, "phase1_epochs": 1, "batch_size": 8}}"#;

#[test]
fn evaluating_the_best_checkpoint_reproduces_the_training_test_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(MICRO).unwrap();
    let out = dir.path().join("run");
    let summary = run_train(&cfg, &out).unwrap();
    for f in [HISTORY_FILE, SPLIT_FILE, RESOLVED_CONFIG_FILE, BEST_DIR, LAST_DIR] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(summary.history.len(), 3);
    let report = run_eval(&out.join(BEST_DIR), &out.join(SPLIT_FILE), Partition::Test, None, Some(dir.path())).unwrap();
    assert_eq!(report.to_text(), summary.test.to_text());
}

#[test]
fn resolved_config_reloads_to_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(MICRO).unwrap();
    run_train(&cfg, &dir.path().join("a")).unwrap();
    let reloaded = ExperimentConfig::load(&dir.path().join("a").join(RESOLVED_CONFIG_FILE)).unwrap();
    assert_eq!(reloaded, cfg);
    run_train(&reloaded, &dir.path().join("b")).unwrap();
    let read = |d: &str| std::fs::read(dir.path().join(d).join(HISTORY_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
}
