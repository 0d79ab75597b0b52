use std::fs;
use std::path::Path;

use coact_core::data::{load_labels, Manifest};
use coact_core::eval::{MetricsTable, MIXED};
use coact_core::io::read_json;
use coact_core::pipeline::{
    self, CalibrationFile, PipelineConfig, AGENT_FILE, AGGREGATE_CSV, CALIBRATION_FILE, CHECKPOINT_FILE,
    EVENTS_FILE, LABELS_FILE, LINK_AGGREGATE_CSV, LINK_FILE, MANIFEST_FILE, METRICS_CSV, METRICS_JSON,
    PLOT_FILE, REPORT_FILE, TRAIN_LOG_FILE,
};
use coact_core::Error;
use tempfile::TempDir;

fn small(root: &Path, epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.paths.data_dir = root.join("data");
    cfg.paths.checkpoint_dir = root.join("ckpt");
    cfg.paths.report_dir = root.join("rep");
    cfg.world.n_agents = 60;
    cfg.world.n_days = 16;
    cfg.injection.unexpected_occurrence_rate = 0.01;
    cfg.injection.absence_rate = 0.01;
    cfg.injection.synthetic_coordination_rate = 0.01;
    cfg.model.d_model = 16;
    cfg.model.heads = 2;
    cfg.model.batch_size = 16;
    cfg.model.epochs = epochs;
    cfg.resolved()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn scored_run(epochs: usize) -> (TempDir, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), epochs);
    pipeline::simulate(&cfg).unwrap();
    pipeline::pretrain_stage(&cfg).unwrap();
    pipeline::score_stage(&cfg).unwrap();
    (dir, cfg)
}

#[test]
fn manifest_counts_match_files_and_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 1);
    let m = pipeline::simulate(&cfg).unwrap();
    let on_disk: Manifest = read_json(&cfg.paths.data_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m, on_disk);
    assert_eq!(lines(&cfg.paths.data_dir.join(EVENTS_FILE)), m.n_events + 1);
    assert_eq!(lines(&cfg.paths.data_dir.join(LABELS_FILE)), m.n_labels + 1);
    assert_eq!(m.n_agents, 60);
    let labels = load_labels(&cfg.paths.data_dir.join(LABELS_FILE)).unwrap();
    let positives = labels.iter().filter(|l| l.is_anomalous == 1).count() as f64;
    let requested = 0.03 * labels.len() as f64;
    assert!((positives - requested).abs() <= 0.2 * requested, "{positives} vs {requested}");
}

#[test]
fn missing_inputs_are_clear_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 1);
    let err = pipeline::pretrain_stage(&cfg).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(err.to_string().contains(MANIFEST_FILE) || err.to_string().contains(EVENTS_FILE));
    pipeline::simulate(&cfg).unwrap();
    let err = pipeline::score_stage(&cfg).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    let err = pipeline::evaluate_stage(&cfg).unwrap_err();
    assert!(err.to_string().contains(REPORT_FILE), "{err}");
}

#[test]
fn resumed_training_continues_the_same_curve() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let straight = small(a.path(), 3);
    pipeline::simulate(&straight).unwrap();
    let full = pipeline::pretrain_stage(&straight).unwrap();

    let first = small(b.path(), 1);
    pipeline::simulate(&first).unwrap();
    pipeline::pretrain_stage(&first).unwrap();
    let resumed = pipeline::pretrain_stage(&small(b.path(), 3)).unwrap();

    assert_eq!(full.log, resumed.log);
    assert_eq!(full.state, resumed.state);
    assert_eq!(lines(&b.path().join("ckpt").join(TRAIN_LOG_FILE)), 4);
    let again = pipeline::pretrain_stage(&small(b.path(), 3)).unwrap();
    assert_eq!(again.state, resumed.state, "a finished run has nothing left to do");
}

#[test]
fn scoring_fits_missing_calibration_and_refits_stale_ones() {
    let (dir, cfg) = scored_run(1);
    let cal_path = cfg.paths.checkpoint_dir.join(CALIBRATION_FILE);
    let first: CalibrationFile = read_json(&cal_path).unwrap();
    assert!(first.reference_events > 0);

    let rows = pipeline::load_report(&cfg.paths.report_dir.join(REPORT_FILE)).unwrap();
    let labels = load_labels(&cfg.paths.data_dir.join(LABELS_FILE)).unwrap();
    assert_eq!(rows.len(), labels.len());
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.combined)));
    assert!(rows
        .iter()
        .all(|r| r.combined == r.node_pct.max(r.obs_pct).max(r.notobs_pct)));
    assert!(cfg.paths.report_dir.join(AGENT_FILE).exists());

    let longer = small(dir.path(), 2);
    pipeline::pretrain_stage(&longer).unwrap();
    pipeline::score_stage(&longer).unwrap();
    let second: CalibrationFile = read_json(&cal_path).unwrap();
    assert_ne!(first.model, second.model);
    let fitted = pipeline::calibrate_stage(&longer).unwrap();
    assert_eq!(fitted, second);
}

#[test]
fn evaluation_and_aggregation() {
    let (dir, cfg) = scored_run(1);
    let table = pipeline::evaluate_stage(&cfg).unwrap();
    assert!(table.rows.iter().any(|r| r.subset == MIXED));
    for f in [METRICS_JSON, METRICS_CSV, LINK_FILE] {
        assert!(cfg.paths.report_dir.join(f).exists(), "{f}");
    }
    assert!(pipeline::report_stage(&cfg).unwrap() > 0);
    assert!(cfg.paths.report_dir.join(PLOT_FILE).exists());

    // Evaluating a copy of the report set twice gives identical tables.
    let mut copy = cfg.clone();
    copy.paths.report_dir = dir.path().join("copy");
    fs::create_dir_all(&copy.paths.report_dir).unwrap();
    fs::copy(
        cfg.paths.report_dir.join(REPORT_FILE),
        copy.paths.report_dir.join(REPORT_FILE),
    )
    .unwrap();
    let once = pipeline::evaluate_stage(&copy).unwrap();
    let bytes = fs::read(copy.paths.report_dir.join(METRICS_JSON)).unwrap();
    let twice = pipeline::evaluate_stage(&copy).unwrap();
    assert_eq!(once, twice);
    assert_eq!(once, table);
    assert_eq!(bytes, fs::read(copy.paths.report_dir.join(METRICS_JSON)).unwrap());

    let runs: Vec<_> = (0..5)
        .map(|i| {
            let d = dir.path().join(format!("run{i}"));
            fs::create_dir_all(&d).unwrap();
            for f in [METRICS_JSON, LINK_FILE] {
                fs::copy(cfg.paths.report_dir.join(f), d.join(f)).unwrap();
            }
            d
        })
        .collect();
    let mut agg_cfg = cfg.clone();
    agg_cfg.paths.report_dir = dir.path().join("agg");
    let rows = pipeline::aggregate_stage(&agg_cfg, &runs).unwrap();
    assert_eq!(rows.len(), table.rows.len());
    for r in &rows {
        assert_eq!(r.runs, 5);
        assert!(r.auroc_std < 1e-12 && r.aucpr_std < 1e-12);
    }
    assert!(agg_cfg.paths.report_dir.join(AGGREGATE_CSV).exists());
    assert!(agg_cfg.paths.report_dir.join(LINK_AGGREGATE_CSV).exists());
    let stored: MetricsTable = read_json(&cfg.paths.report_dir.join(METRICS_JSON)).unwrap();
    assert_eq!(stored, table);
    assert!(cfg.paths.checkpoint_dir.join(CHECKPOINT_FILE).exists());
}
