use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 12] = [
    "--set",
    "world.n_agents=50",
    "--set",
    "world.n_days=16",
    "--set",
    "model.epochs=1",
    "--set",
    "model.d_model=8",
    "--set",
    "model.heads=2",
    "--set",
    "injection.absence_rate=0.01",
];

fn coact(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coact"))
        .current_dir(dir)
        .env_remove("COACT_DATA_DIR")
        .env_remove("COACT_CHECKPOINT_DIR")
        .env_remove("COACT_REPORT_DIR")
        .args(SMALL)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let o = coact(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(64));
    let o = Command::new(env!("CARGO_BIN_EXE_coact")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let help = String::from_utf8_lossy(&o.stdout);
    for verb in ["simulate", "pretrain", "calibrate", "score", "evaluate", "report"] {
        assert!(help.contains(verb), "{verb} missing from help");
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = coact(dir.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("error_kind=2"));

    let o = coact(dir.path(), &["simulate", "--set", "model.bogus=1"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = coact(dir.path(), &["simulate", "--set", "model.d_model=7"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let o = coact(dir.path(), &["-c", "missing.toml", "simulate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn env_overrides_paths_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_coact"))
        .current_dir(dir.path())
        .env("COACT_REPORT_DIR", "elsewhere")
        .env("COACT_DATA_DIR", "mine")
        .arg("config")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("report_dir = \"elsewhere\""), "{text}");
    assert!(text.contains("data_dir = \"mine\""), "{text}");
}

#[test]
fn full_run_is_reproducible() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        for verb in ["simulate", "pretrain", "calibrate", "score", "evaluate", "report"] {
            let o = coact(dir.path(), &[verb, "--set", "master_seed=3", "--log-level", "warn"]);
            assert!(o.status.success(), "{verb}: {}", stderr(&o));
        }
        let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
        let files = [
            "data/events.csv",
            "data/labels.csv",
            "data/manifest.json",
            "reports/events.csv",
            "reports/agents.csv",
            "reports/metrics.json",
            "reports/link_prediction.json",
            "reports/plot_data.csv",
        ];
        files.map(read)
    };
    assert_eq!(run(), run());
}
