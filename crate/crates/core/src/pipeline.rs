//! Configuration, file layout and the six pipeline stages:
//! simulate, pretrain, calibrate, score, evaluate and report.
//!
//! Every stage reads what earlier stages wrote, validates it, and writes its
//! outputs atomically. Log lines are `key=value` pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_events, load_labels, pad_batch, write_events, write_labels, DaySplit, EventStore,
    History, LabelRecord, Manifest, PaddedBatch, SampleBuilder, SampleConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, evaluate_link_prediction, evaluate_run, link_instances, mean_std, plot_data,
    AggregateRow, LinkPredReport, MetricsTable,
};
use crate::io;
use crate::model::{
    load_checkpoint, pretrain, save_checkpoint, Checkpoint, EpochLog, FeatureStats, ModelConfig,
    ModelState,
};
use crate::scoring::{
    agent_scores, calibrate, score_period, AgentRow, ReportRow, ScoreCalibration, Variant,
};
use crate::sim::{generate_world, inject, InjectionConfig, WorldConfig};

pub const EVENTS_FILE: &str = "events.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const REPORT_FILE: &str = "events.csv";
pub const AGENT_FILE: &str = "agents.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LINK_FILE: &str = "link_prediction.json";
pub const PLOT_FILE: &str = "plot_data.csv";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const LINK_AGGREGATE_CSV: &str = "link_aggregate.csv";

/// Environment variables that may override the configured directories.
pub const ENV_DATA_DIR: &str = "COACT_DATA_DIR";
pub const ENV_CHECKPOINT_DIR: &str = "COACT_CHECKPOINT_DIR";
pub const ENV_REPORT_DIR: &str = "COACT_REPORT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// When set, replaces the world, injection, model and evaluation seeds
    /// with values drawn from this one.
    pub master_seed: Option<u64>,
    /// Seeds the masks of the loss report and the random link baseline.
    pub eval_seed: u64,
    /// Train / validation / test lengths, split by date.
    pub split_ratio: [u32; 3],
    /// Co-occurrence threshold, distance metric and window length.
    pub sample: SampleConfig,
    pub world: WorldConfig,
    pub injection: InjectionConfig,
    pub model: ModelConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            master_seed: None,
            eval_seed: 5,
            split_ratio: [3, 1, 4],
            sample: SampleConfig::default(),
            world: WorldConfig::default(),
            injection: InjectionConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(Error::Config(format!("empty override key in {key:?}")));
    };
    let mut node = table;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl PipelineConfig {
    /// Reads an optional TOML file, applies path overrides from `env`, then
    /// `key.path=value` overrides, and resolves seeds.
    pub fn load(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = io::read_string(p)?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (var, key) in [
            (ENV_DATA_DIR, "paths.data_dir"),
            (ENV_CHECKPOINT_DIR, "paths.checkpoint_dir"),
            (ENV_REPORT_DIR, "paths.report_dir"),
        ] {
            if let Some(v) = env(var).filter(|v| !v.is_empty()) {
                set_dotted(&mut table, key, toml::Value::String(v))?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_literal(v.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the master seed and keeps the injector's window in step with
    /// the sample window.
    pub fn resolved(mut self) -> Self {
        if let Some(m) = self.master_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(m);
            self.world.seed = rng.next_u64();
            self.injection.seed = rng.next_u64();
            self.model.seed = rng.next_u64();
            self.eval_seed = rng.next_u64();
        }
        self.injection.window_days = self.sample.window_days;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_ratio.contains(&0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        if !(self.sample.delta_km > 0.0) || self.sample.window_days <= 0 || self.sample.stride_days <= 0 {
            return Err(Error::Config(
                "delta_km, window_days and stride_days must be positive".into(),
            ));
        }
        self.world.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.injection.validate()?;
        self.model.validate()
    }

    pub fn split(&self, n_days: i64) -> Result<DaySplit> {
        DaySplit::from_ratio(0, n_days, self.split_ratio).ok_or_else(|| {
            Error::Config(format!(
                "{n_days} days cannot be split {:?} with every part non-empty",
                self.split_ratio
            ))
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn data(&self, name: &str) -> PathBuf {
        self.paths.data_dir.join(name)
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.paths.checkpoint_dir.join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.paths.report_dir.join(name)
    }
}

/// A dataset on disk with its date split and training-period history.
pub struct Dataset {
    pub manifest: Manifest,
    pub store: EventStore,
    pub split: DaySplit,
    pub history: History,
}

impl Dataset {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let manifest: Manifest = io::read_json(&cfg.data(MANIFEST_FILE))?;
        let store = load_events(&cfg.data(EVENTS_FILE), manifest.n_poi)?;
        manifest.check(&store)?;
        let split = cfg.split(manifest.n_days)?;
        let history = History::build(
            &store,
            split.train.0,
            split.train.1,
            cfg.sample.delta_km,
            cfg.sample.metric,
        );
        Ok(Self {
            manifest,
            store,
            split,
            history,
        })
    }

    pub fn builder(&self, cfg: &PipelineConfig) -> SampleBuilder<'_> {
        SampleBuilder::new(&self.store, &self.history, cfg.sample.clone())
    }

    pub fn training_batches(&self, cfg: &PipelineConfig) -> Result<Vec<PaddedBatch>> {
        self.builder(cfg)
            .samples(self.split.train.0, self.split.train.1)
            .iter()
            .map(pad_batch)
            .collect()
    }
}

/// Generates a world, injects anomalies into its test period and writes the
/// event, label and manifest files.
pub fn simulate(cfg: &PipelineConfig) -> Result<Manifest> {
    let world = generate_world(&cfg.world)?;
    let split = cfg.split(cfg.world.n_days)?;
    let inj = inject(
        &world.store,
        &split,
        &cfg.injection,
        cfg.sample.delta_km,
        cfg.sample.metric,
    )?;
    let mut manifest = Manifest::describe(
        &inj.store,
        cfg.world.n_days,
        world.manifest.poi_names.clone(),
        cfg.world.seed,
    );
    manifest.n_labels = inj.labels.len();
    write_events(&cfg.data(EVENTS_FILE), &inj.store)?;
    write_labels(&cfg.data(LABELS_FILE), &inj.labels)?;
    io::write_json(&cfg.data(MANIFEST_FILE), &manifest)?;
    let n_test = inj.labels.len().max(1) as f64;
    for (tag, n) in &inj.counts {
        log::info!(
            "stage=simulate anomaly_type={tag} injected={n} rate={:.5}",
            *n as f64 / n_test
        );
    }
    log::info!(
        "stage=simulate agents={} events={} test_events={} dir={}",
        manifest.n_agents,
        manifest.n_events,
        manifest.n_labels,
        cfg.paths.data_dir.display()
    );
    Ok(manifest)
}

#[derive(Serialize)]
struct TrainLogRow {
    epoch: usize,
    steps: usize,
    total: f64,
    num: f64,
    cls: f64,
    node: f64,
    link: f64,
}

fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let rows = log.iter().map(|l| TrainLogRow {
        epoch: l.epoch,
        steps: l.steps,
        total: l.train.total,
        num: l.train.num,
        cls: l.train.cls,
        node: l.train.node,
        link: l.train.link,
    });
    io::write_atomic(path, &io::csv_bytes(rows)?)
}

/// Trains on the training period, resuming from an existing checkpoint. The
/// checkpoint and loss log are rewritten after every epoch.
pub fn pretrain_stage(cfg: &PipelineConfig) -> Result<Checkpoint> {
    let data = Dataset::load(cfg)?;
    if data.manifest.n_poi != cfg.model.n_poi {
        return Err(Error::Config(format!(
            "model.n_poi = {} but the dataset has {} POI categories",
            cfg.model.n_poi, data.manifest.n_poi
        )));
    }
    let batches = data.training_batches(cfg)?;
    let ckpt_path = cfg.checkpoint(CHECKPOINT_FILE);
    let ckpt = if ckpt_path.exists() {
        let mut c = load_checkpoint(&ckpt_path, Some(&cfg.model))?;
        c.state.config.epochs = cfg.model.epochs;
        log::info!("stage=pretrain resume_epoch={}", c.next_epoch);
        c
    } else {
        let stats = FeatureStats::fit(&data.store, data.split.train.0, data.split.train.1);
        Checkpoint::fresh(ModelState::init(&cfg.model, stats)?)
    };
    log::info!(
        "stage=pretrain instances={} parameters={} epochs={}",
        batches.len(),
        ckpt.state.n_parameters(),
        cfg.model.epochs
    );
    let log_path = cfg.checkpoint(TRAIN_LOG_FILE);
    let done = pretrain(&batches, ckpt, |c| {
        save_checkpoint(&ckpt_path, c)?;
        write_train_log(&log_path, &c.log)
    })?;
    if done.log.is_empty() {
        write_train_log(&log_path, &done.log)?;
    }
    save_checkpoint(&ckpt_path, &done)?;
    Ok(done)
}

fn load_model(cfg: &PipelineConfig) -> Result<Checkpoint> {
    let path = cfg.checkpoint(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "{} not found; run pretrain first",
            path.display()
        )));
    }
    load_checkpoint(&path, None)
}

/// Digest of a model's parameters, so a calibration can tell whether it
/// belongs to the current checkpoint.
pub fn fingerprint(state: &ModelState) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, t) in &state.params {
        feed(name.as_bytes());
        for x in t.data() {
            feed(&x.to_bits().to_le_bytes());
        }
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub model: String,
    pub reference_events: usize,
    pub calibration: ScoreCalibration,
}

fn fit_calibration(cfg: &PipelineConfig, data: &Dataset, ckpt: &Checkpoint) -> Result<CalibrationFile> {
    let raw = score_period(
        &ckpt.state,
        &data.store,
        &data.history,
        &cfg.sample,
        data.split.val.0,
        data.split.val.1,
    )?;
    let calibration = ScoreCalibration::fit(&raw)?;
    log::info!(
        "stage=calibrate reference_events={} with_neighbors={} with_ghosts={}",
        raw.len(),
        calibration.obs.len(),
        calibration.notobs.len()
    );
    let file = CalibrationFile {
        model: fingerprint(&ckpt.state),
        reference_events: raw.len(),
        calibration,
    };
    io::write_json(&cfg.checkpoint(CALIBRATION_FILE), &file)?;
    Ok(file)
}

/// Scores the validation period and stores its reference distributions.
pub fn calibrate_stage(cfg: &PipelineConfig) -> Result<CalibrationFile> {
    let ckpt = load_model(cfg)?;
    let data = Dataset::load(cfg)?;
    fit_calibration(cfg, &data, &ckpt)
}

/// Scores every test-period event, fitting the calibration first when it is
/// missing or belongs to another model. Writes the event and agent reports.
pub fn score_stage(cfg: &PipelineConfig) -> Result<Vec<ReportRow>> {
    let ckpt = load_model(cfg)?;
    let data = Dataset::load(cfg)?;
    let cal_path = cfg.checkpoint(CALIBRATION_FILE);
    let current = fingerprint(&ckpt.state);
    let cal = match cal_path.exists() {
        true => {
            let f: CalibrationFile = io::read_json(&cal_path)?;
            f.calibration.check()?;
            if f.model == current {
                f
            } else {
                log::warn!("stage=score calibration=stale action=refit");
                fit_calibration(cfg, &data, &ckpt)?
            }
        }
        false => {
            log::info!("stage=score calibration=missing action=fit");
            fit_calibration(cfg, &data, &ckpt)?
        }
    };
    log::info!(
        "stage=score days={}..{} agents={}",
        data.split.test.0,
        data.split.test.1,
        data.store.n_agents()
    );
    let raw = score_period(
        &ckpt.state,
        &data.store,
        &data.history,
        &cfg.sample,
        data.split.test.0,
        data.split.test.1,
    )?;
    let rows: Vec<ReportRow> = raw
        .into_iter()
        .map(|r| calibrate(r, &cal.calibration).map(|a| ReportRow::from(&a)))
        .collect::<Result<_>>()?;
    let agents: Vec<AgentRow> = agent_scores(&rows, Variant::Full)
        .into_iter()
        .map(|(agent_id, agent_score)| AgentRow {
            agent_id,
            agent_score,
        })
        .collect();
    io::write_atomic(&cfg.report(REPORT_FILE), &io::csv_bytes(&rows)?)?;
    io::write_atomic(&cfg.report(AGENT_FILE), &io::csv_bytes(&agents)?)?;
    log::info!(
        "stage=score events={} agents={} dir={}",
        rows.len(),
        agents.len(),
        cfg.paths.report_dir.display()
    );
    Ok(rows)
}

pub fn load_report(path: &Path) -> Result<Vec<ReportRow>> {
    let rows: Vec<(usize, ReportRow)> = io::read_csv(path)?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

fn load_run(cfg: &PipelineConfig) -> Result<(Vec<ReportRow>, Vec<LabelRecord>)> {
    let rows = load_report(&cfg.report(REPORT_FILE))?;
    let labels = load_labels(&cfg.data(LABELS_FILE))?;
    Ok((rows, labels))
}

/// Link prediction on the validation period against the random and history
/// baselines.
pub fn link_prediction(cfg: &PipelineConfig) -> Result<LinkPredReport> {
    let ckpt = load_model(cfg)?;
    let data = Dataset::load(cfg)?;
    let instances = link_instances(
        &ckpt.state,
        &data.store,
        &data.history,
        &cfg.sample,
        data.split.val.0,
        data.split.val.1,
    )?;
    evaluate_link_prediction(&instances, cfg.eval_seed)
}

/// Event- and agent-level metrics for the configured run, plus link
/// prediction when a checkpoint is available.
pub fn evaluate_stage(cfg: &PipelineConfig) -> Result<MetricsTable> {
    let (rows, labels) = load_run(cfg)?;
    let table = evaluate_run(&rows, &labels)?;
    io::write_json(&cfg.report(METRICS_JSON), &table)?;
    io::write_atomic(&cfg.report(METRICS_CSV), &io::csv_bytes(&table.rows)?)?;
    for r in &table.rows {
        log::info!(
            "stage=evaluate level={:?} variant={} subset={} n_pos={} auroc={:.4} aucpr={:.4}",
            r.level,
            r.variant,
            r.subset,
            r.n_pos,
            r.auroc,
            r.aucpr
        );
    }
    if cfg.checkpoint(CHECKPOINT_FILE).exists() {
        let lp = link_prediction(cfg)?;
        io::write_json(&cfg.report(LINK_FILE), &lp)?;
        for (name, s) in [("model", lp.model), ("random", lp.random), ("history", lp.history)] {
            log::info!(
                "stage=evaluate link_scorer={name} hr_at_1={:.4} mrr={:.4} js_at_alpha={:.4} alpha={:.4}",
                s.hr_at_1,
                s.mrr,
                s.js_at_alpha,
                s.alpha
            );
        }
    } else {
        log::warn!("stage=evaluate link_prediction=skipped reason=no_checkpoint");
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkAggregateRow {
    pub scorer: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate_links(reports: &[LinkPredReport]) -> Vec<LinkAggregateRow> {
    let mut out = Vec::new();
    type Pick = fn(&LinkPredReport) -> crate::eval::LinkScores;
    let scorers: [(&str, Pick); 3] = [
        ("model", |r| r.model),
        ("random", |r| r.random),
        ("history", |r| r.history),
    ];
    for (scorer, pick) in scorers {
        let metrics: [(&str, fn(&crate::eval::LinkScores) -> f64); 3] = [
            ("hr_at_1", |s| s.hr_at_1),
            ("mrr", |s| s.mrr),
            ("js_at_alpha", |s| s.js_at_alpha),
        ];
        for (metric, get) in metrics {
            let v: Vec<f64> = reports.iter().map(|r| get(&pick(r))).collect();
            let (mean, std) = mean_std(&v);
            out.push(LinkAggregateRow {
                scorer: scorer.into(),
                metric: metric.into(),
                runs: v.len(),
                mean,
                std,
            });
        }
    }
    out
}

/// Mean ± std over already-evaluated runs, written to the report directory.
pub fn aggregate_stage(cfg: &PipelineConfig, runs: &[PathBuf]) -> Result<Vec<AggregateRow>> {
    if runs.is_empty() {
        return Err(Error::Validation("no runs to aggregate".into()));
    }
    let tables: Vec<MetricsTable> = runs
        .iter()
        .map(|d| io::read_json(&d.join(METRICS_JSON)))
        .collect::<Result<_>>()?;
    let rows = aggregate(&tables);
    io::write_json(&cfg.report(AGGREGATE_JSON), &rows)?;
    io::write_atomic(&cfg.report(AGGREGATE_CSV), &io::csv_bytes(&rows)?)?;
    let links: Vec<LinkPredReport> = runs
        .iter()
        .map(|d| d.join(LINK_FILE))
        .filter(|p| p.exists())
        .map(|p| io::read_json(&p))
        .collect::<Result<_>>()?;
    if !links.is_empty() {
        let l = aggregate_links(&links);
        io::write_atomic(&cfg.report(LINK_AGGREGATE_CSV), &io::csv_bytes(&l)?)?;
    }
    for r in &rows {
        log::info!(
            "stage=aggregate level={:?} variant={} subset={} runs={} auroc_mean={:.4} auroc_std={:.4}",
            r.level,
            r.variant,
            r.subset,
            r.runs,
            r.auroc_mean,
            r.auroc_std
        );
    }
    Ok(rows)
}

/// Score histograms and ROC/PR point lists for external plotting.
pub fn report_stage(cfg: &PipelineConfig) -> Result<usize> {
    let (rows, labels) = load_run(cfg)?;
    let points = plot_data(&rows, &labels)?;
    io::write_atomic(&cfg.report(PLOT_FILE), &io::csv_bytes(&points)?)?;
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &points {
        *kinds.entry(p.kind.as_str()).or_default() += 1;
    }
    for (k, n) in kinds {
        log::info!("stage=report kind={k} points={n}");
    }
    Ok(points.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn overrides_and_env_paths() {
        let env = |k: &str| (k == ENV_REPORT_DIR).then(|| "/tmp/r".to_string());
        let cfg = PipelineConfig::load(
            None,
            env,
            &["model.epochs=3".into(), "sample.delta_km=0.05".into(), "paths.data_dir=d".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.epochs, 3);
        assert_eq!(cfg.sample.delta_km, 0.05);
        assert_eq!(cfg.paths.data_dir, PathBuf::from("d"));
        assert_eq!(cfg.paths.report_dir, PathBuf::from("/tmp/r"));
    }

    #[test]
    fn env_cannot_touch_non_paths() {
        let env = |_: &str| Some("9".to_string());
        let cfg = PipelineConfig::load(None, env, &[]).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.paths.data_dir, PathBuf::from("9"));
    }

    #[test]
    fn master_seed_fans_out() {
        let a = PipelineConfig::load(None, no_env, &["master_seed=3".into()]).unwrap();
        let b = PipelineConfig::load(None, no_env, &["master_seed=3".into()]).unwrap();
        let c = PipelineConfig::load(None, no_env, &["master_seed=4".into()]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.world.seed, c.world.seed);
        let seeds = [a.world.seed, a.injection.seed, a.model.seed, a.eval_seed];
        let distinct: std::collections::BTreeSet<_> = seeds.iter().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn rejects_bad_config() {
        for o in ["split_ratio=[3, 0, 4]", "model.heads=3", "nonsense=1", "model=1"] {
            let e = PipelineConfig::load(None, no_env, &[o.into()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{o}: {e}");
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
        assert_eq!(PipelineConfig::load(Some(&p), no_env, &[]).unwrap(), cfg.resolved());
    }
}
