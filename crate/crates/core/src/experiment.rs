//! End-to-end runs: data preparation, multi-seed training, topology
//! ablation, baselines and report merging. Every run writes its artifacts
//! under a run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{persistence_forecasts, score, HarmonicBaseline};
use crate::config::ExperimentConfig;
use crate::events::{fit_normalization, ingest_csv, EventStore, NodeKey, NormStats, Registry, VarType};
use crate::graph::TopologyMode;
use crate::model::{fit_max_fs, Model, ModelSpec};
use crate::sampler::{chronological_split, normalize_snapshot, sample_dtdg, SamplingParams, Snapshot, Split};
use crate::train::{evaluate, multi_seed, train, Evaluation, MetricReport, MultiSeedReport, ScoredForecast, TrainState};
use crate::{Error, Result};

/// Loads the registry and events named by the config, keeping input types only.
pub fn load_store(cfg: &ExperimentConfig) -> Result<EventStore> {
    cfg.check_data_paths()?;
    let registry = Registry::load(&cfg.data.registry_path())?;
    cfg.validate_against(&registry)?;
    let (store, report) = ingest_csv(&cfg.data.events, &registry)?;
    if !report.rejected.is_empty() {
        log::warn!(
            "{} rows rejected while reading {} (first: line {}: {})",
            report.rejected.len(),
            cfg.data.events.display(),
            report.rejected[0].line,
            report.rejected[0].reason
        );
    }
    log::info!("loaded {} events from {}", report.accepted, cfg.data.events.display());
    Ok(store.restrict_types(&cfg.inputs))
}

/// Sampled, split and normalized data shared by every seed of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Input types only, physical units.
    pub store: EventStore,
    pub summary: DatasetSummary,
    /// Physical units.
    pub raw: Split,
    pub stats: NormStats,
    pub train: Vec<Snapshot>,
    pub val: Vec<Snapshot>,
    pub test: Vec<Snapshot>,
    pub max_fs: BTreeMap<VarType, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub store_digest: String,
    pub events: usize,
    pub range: (i64, i64),
    pub spacing: i64,
    pub sampled: usize,
    pub dropped_empty: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub purged: usize,
    pub normalization_range: (i64, i64),
    pub passthrough_columns: Vec<(NodeKey, usize)>,
}

fn default_range(store: &EventStore, cfg: &ExperimentConfig) -> Result<(i64, i64)> {
    let (first, last) = store
        .span()
        .ok_or_else(|| Error::Sampling("the event store is empty".into()))?;
    Ok((first + cfg.window.past_len, last + 1 - cfg.window.future_len))
}

pub fn prepare(cfg: &ExperimentConfig, store: EventStore) -> Result<Prepared> {
    cfg.validate()?;
    cfg.validate_against(store.registry())?;
    let store = store.restrict_types(&cfg.inputs);
    let range = match cfg.range {
        Some(r) => r,
        None => default_range(&store, cfg)?,
    };
    let dataset = sample_dtdg(
        &store,
        SamplingParams {
            count: cfg.snapshots,
            range,
            window: cfg.window,
            topology: cfg.topology,
            targets: cfg.targets.clone(),
        },
    )?;
    let raw = chronological_split(&dataset.snapshots, cfg.window, cfg.split)?;
    let last_train = raw.train.last().map_or(range.0, |s| s.reference_time);
    let norm_range = (range.0 - cfg.window.past_len, last_train + cfg.window.future_len);
    let stats = fit_normalization(&store, norm_range.0, norm_range.1)?;
    let registry = store.registry();
    let norm = |v: &[Snapshot]| -> Result<Vec<Snapshot>> {
        v.iter().map(|s| normalize_snapshot(s, &stats, registry)).collect()
    };
    let (train, val, test) = (norm(&raw.train)?, norm(&raw.val)?, norm(&raw.test)?);
    let max_fs = fit_max_fs(&dataset.snapshots, &cfg.targets);
    let summary = DatasetSummary {
        store_digest: store.digest(),
        events: store.len(),
        range,
        spacing: dataset.spacing,
        sampled: dataset.snapshots.len(),
        dropped_empty: dataset.dropped_empty.len(),
        train: raw.train.len(),
        val: raw.val.len(),
        test: raw.test.len(),
        purged: raw.purged.len(),
        normalization_range: norm_range,
        passthrough_columns: stats.flagged().into_iter().map(|(n, c, _)| (n, c)).collect(),
    };
    Ok(Prepared {
        store,
        summary,
        raw,
        stats,
        train,
        val,
        test,
        max_fs,
    })
}

pub fn model_spec(cfg: &ExperimentConfig, prep: &Prepared) -> ModelSpec {
    ModelSpec {
        config: cfg.model.clone(),
        registry: prep.store.registry().clone(),
        inputs: cfg.inputs.clone(),
        targets: cfg.targets.clone(),
        max_fs: prep.max_fs.clone(),
        time_scale: cfg.window.past_len as f64,
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub model: Model,
    pub state: TrainState,
    pub evaluation: Evaluation,
}

/// Trains one seed and scores it on the test split.
pub fn train_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<SeedOutcome> {
    let mut model = Model::new(model_spec(cfg, prep), seed)?;
    let state = train(&mut model, &prep.train, &prep.val, &cfg.train, seed)?;
    let evaluation = evaluate(&model, &prep.test, &prep.stats, None, cfg.pooling, Some(seed))?;
    Ok(SeedOutcome {
        model,
        state,
        evaluation,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

/// Trains every configured seed into `run_dir` and writes the aggregate
/// report as `report-<name>.json` and `.csv`.
pub fn run_seeds(cfg: &ExperimentConfig, prep: &Prepared, run_dir: &Path, name: &str) -> Result<MultiSeedReport> {
    create_dir(run_dir)?;
    write_json(&run_dir.join("config.json"), cfg)?;
    write_json(&run_dir.join("dataset.json"), &prep.summary)?;
    let report = multi_seed(&cfg.seeds, |seed| {
        let dir = seed_dir(run_dir, seed);
        create_dir(&dir)?;
        let out = train_seed(cfg, prep, seed)?;
        out.model.save(&dir.join("model.ckpt"))?;
        write(&dir.join("history.csv"), out.state.history_csv())?;
        write_json(&dir.join("report.json"), &out.evaluation.report)?;
        write(&dir.join("report.csv"), out.evaluation.report.to_csv())?;
        write_json(&dir.join("forecasts.json"), &out.evaluation.forecasts)?;
        log::info!(
            "{name} seed {seed}: {} epochs, best {} (val loss {:.4})",
            out.state.epochs_run,
            out.state.best_epoch,
            out.state.best_val_loss
        );
        Ok(out.evaluation.report)
    })?;
    write_json(&run_dir.join(format!("report-{name}.json")), &report)?;
    write(&run_dir.join(format!("report-{name}.csv")), report.to_csv())?;
    Ok(report)
}

/// Output directory of a training run: `<output>/<inputs>`.
pub fn train_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join(cfg.input_set_name())
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<MultiSeedReport> {
    let prep = prepare(cfg, load_store(cfg)?)?;
    run_seeds(cfg, &prep, &train_dir(cfg), &cfg.input_set_name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub topology: TopologyMode,
    pub seeds: usize,
    pub failed: usize,
    /// Mean and sample standard deviation of the headline IoA per target.
    pub ioa_mean: BTreeMap<VarType, f64>,
    pub ioa_std: BTreeMap<VarType, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BypassCheck {
    pub compared: usize,
    pub max_abs_diff: f64,
    pub mismatched_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub reports: BTreeMap<TopologyMode, MultiSeedReport>,
    pub bypass: Option<BypassCheck>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let targets: BTreeSet<&VarType> = self.rows.iter().flat_map(|r| r.ioa_mean.keys()).collect();
        let mut out = String::from("topology,seeds,failed");
        for t in &targets {
            out.push_str(&format!(",{t}_ioa_mean,{t}_ioa_std"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.topology, r.seeds, r.failed));
            for t in &targets {
                let cell = |m: &BTreeMap<VarType, f64>| m.get(*t).map_or(String::new(), |v| v.to_string());
                out.push_str(&format!(",{},{}", cell(&r.ioa_mean), cell(&r.ioa_std)));
            }
            out.push('\n');
        }
        out
    }
}

fn headline_key(t: &VarType) -> String {
    format!("{t}/headline/ioa")
}

/// Compares two multi-seed runs metric by metric.
pub fn compare_reports(a: &MultiSeedReport, b: &MultiSeedReport) -> BypassCheck {
    let mut check = BypassCheck {
        compared: 0,
        max_abs_diff: 0.0,
        mismatched_keys: vec![],
    };
    if a.per_seed.len() != b.per_seed.len() {
        check.mismatched_keys.push("seed count".into());
    }
    for (x, y) in a.per_seed.iter().zip(&b.per_seed) {
        let (fx, fy) = (x.flatten(), y.flatten());
        for (k, v) in &fx {
            match fy.get(k) {
                Some(w) => {
                    check.compared += 1;
                    check.max_abs_diff = check.max_abs_diff.max((v - w).abs());
                }
                None => check.mismatched_keys.push(k.clone()),
            }
        }
        check.mismatched_keys.extend(fy.keys().filter(|k| !fx.contains_key(*k)).cloned());
    }
    check
}

pub fn ablation_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join("ablate-topology")
}

/// Runs the three topology modes with otherwise identical settings. With
/// `verify_bypass`, also runs the model with message passing skipped and
/// compares it to the disconnected run.
pub fn run_ablation(cfg: &ExperimentConfig, store: EventStore, verify_bypass: bool) -> Result<AblationTable> {
    let root = ablation_dir(cfg);
    let mut rows = Vec::new();
    let mut reports = BTreeMap::new();
    for mode in TopologyMode::ALL {
        let c = ExperimentConfig {
            topology: mode,
            ..cfg.clone()
        };
        let prep = prepare(&c, store.clone())?;
        let report = run_seeds(&c, &prep, &root.join(mode.as_str()), mode.as_str())?;
        let mut ioa_mean = BTreeMap::new();
        let mut ioa_std = BTreeMap::new();
        for t in &cfg.targets {
            if let Some(m) = report.mean.get(&headline_key(t)) {
                ioa_mean.insert(t.clone(), *m);
                ioa_std.insert(t.clone(), report.std[&headline_key(t)]);
            }
        }
        rows.push(AblationRow {
            topology: mode,
            seeds: report.per_seed.len(),
            failed: report.failures.len(),
            ioa_mean,
            ioa_std,
        });
        reports.insert(mode, report);
    }
    let bypass = if verify_bypass {
        let mut c = cfg.clone();
        c.topology = TopologyMode::FullyConnected;
        c.model.bypass_gnn = true;
        let prep = prepare(&c, store)?;
        let report = run_seeds(&c, &prep, &root.join("bypass"), "bypass")?;
        let check = compare_reports(&reports[&TopologyMode::Disconnected], &report);
        write_json(&root.join("bypass-check.json"), &check)?;
        Some(check)
    } else {
        None
    };
    let table = AblationTable { rows, reports, bypass };
    write(&root.join("topology.csv"), table.to_csv())?;
    write_json(&root.join("topology.json"), &table)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub persistence: MetricReport,
    pub harmonic: MetricReport,
}

impl BaselineReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("baseline,metric,value\n");
        for (name, r) in [("persistence", &self.persistence), ("harmonic", &self.harmonic)] {
            for (k, v) in r.flatten() {
                out.push_str(&format!("{name},{k},{v}\n"));
            }
        }
        out
    }
}

pub fn baselines_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join("baselines")
}

/// Scores persistence and a harmonic fit on the test split. The harmonic
/// fit uses only the normalization (training) range.
pub fn run_baselines(cfg: &ExperimentConfig, store: EventStore) -> Result<BaselineReport> {
    let prep = prepare(cfg, store)?;
    let registry = prep.store.registry();
    let (t0, t1) = prep.summary.normalization_range;
    let harmonic = HarmonicBaseline::fit(&prep.store, t0, t1, &cfg.targets, &cfg.harmonic_periods_h)?;
    let report = BaselineReport {
        persistence: score(&persistence_forecasts(&prep.raw.test, registry)?, registry, cfg.pooling)?,
        harmonic: score(&harmonic.forecasts(&prep.raw.test), registry, cfg.pooling)?,
    };
    let dir = baselines_dir(cfg);
    create_dir(&dir)?;
    write_json(&dir.join("baselines.json"), &report)?;
    write(&dir.join("baselines.csv"), report.to_csv())?;
    let fits: Vec<_> = harmonic.coefficients.iter().collect();
    write_json(
        &dir.join("harmonic-fit.json"),
        &serde_json::json!({ "periods_h": harmonic.periods_h, "coefficients": fits }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

/// Scores a saved model on one split of the configured data. Inputs and
/// targets come from the checkpoint.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    store: EventStore,
    checkpoint: &Path,
    split: SplitName,
    locations: Option<&[String]>,
) -> Result<Evaluation> {
    let model = Model::load(checkpoint)?;
    let c = ExperimentConfig {
        inputs: model.spec.inputs.clone(),
        targets: model.spec.targets.clone(),
        ..cfg.clone()
    };
    let prep = prepare(&c, store)?;
    let snaps = match split {
        SplitName::Train => &prep.train,
        SplitName::Val => &prep.val,
        SplitName::Test => &prep.test,
    };
    evaluate(&model, snaps, &prep.stats, locations, cfg.pooling, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub run: String,
    pub seeds: usize,
    pub failed: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayRequest {
    pub seed: u64,
    pub node: NodeKey,
    /// First forecast of the node when absent.
    pub reference_time: Option<i64>,
}

fn report_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("report-"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Merges the aggregate reports found in `run_dirs` into `merged.json` and
/// `merged.csv`, one row per report. With an overlay request, also writes
/// the forecast and truth series of one node to `overlay.csv`.
pub fn run_report(run_dirs: &[PathBuf], out: &Path, overlay: Option<&OverlayRequest>) -> Result<Vec<MergedRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let files = report_files(dir)?;
        if files.is_empty() {
            return Err(Error::Config(format!("no report-*.json in `{}`", dir.display())));
        }
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            let r: MultiSeedReport = serde_json::from_str(&text)?;
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            rows.push(MergedRow {
                run: stem.trim_start_matches("report-").to_string(),
                seeds: r.per_seed.len(),
                failed: r.failures.len(),
                mean: r.mean,
                std: r.std,
            });
        }
    }
    create_dir(out)?;
    write_json(&out.join("merged.json"), &rows)?;
    let mut csv = String::from("run,metric,mean,std,seeds,failed\n");
    for r in &rows {
        for (k, m) in &r.mean {
            csv.push_str(&format!("{},{k},{m},{},{},{}\n", r.run, r.std[k], r.seeds, r.failed));
        }
    }
    write(&out.join("merged.csv"), csv)?;
    if let Some(req) = overlay {
        let dir = run_dirs
            .first()
            .ok_or_else(|| Error::Config("an overlay needs a run directory".into()))?;
        let path = seed_dir(dir, req.seed).join("forecasts.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let forecasts: Vec<ScoredForecast> = serde_json::from_str(&text)?;
        let f = forecasts
            .iter()
            .find(|f| f.node == req.node && req.reference_time.is_none_or(|t| t == f.reference_time))
            .ok_or_else(|| Error::Config(format!("no forecast for {} in `{}`", req.node, path.display())))?;
        write(&out.join("overlay.csv"), overlay_csv(f, dir)?)?;
    }
    Ok(rows)
}

fn overlay_csv(f: &ScoredForecast, run_dir: &Path) -> Result<String> {
    let cfg_path = run_dir.join("config.json");
    let labels: Vec<String> = match ExperimentConfig::load(&cfg_path)
        .ok()
        .and_then(|c| Registry::load(&c.data.registry_path()).ok())
        .and_then(|r| r.spec(&f.node.var_type).cloned())
    {
        Some(spec) => spec.labels.iter().map(|&i| spec.columns[i].clone()).collect(),
        None => (0..f.truth.cols()).map(|c| format!("y{c}")).collect(),
    };
    let mut out = String::from("timestamp,offset_s");
    for l in &labels {
        out.push_str(&format!(",{l}_truth,{l}_forecast"));
    }
    out.push('\n');
    for (r, o) in f.offsets.iter().enumerate() {
        out.push_str(&format!("{},{o}", f.reference_time + o));
        for c in 0..f.truth.cols() {
            out.push_str(&format!(",{},{}", f.truth.get(r, c), f.forecast.get(r, c)));
        }
        out.push('\n');
    }
    Ok(out)
}
