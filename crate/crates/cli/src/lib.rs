//! Run orchestration behind the `vugrade` binary: configuration
//! resolution, the cross-validation and cross-study protocols, and the
//! on-disk layout of their outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use vugrade_core::backend::{
    BackendKind, BaselineOptions, ClassWeighting, ClassifierSpec, DeepOptions,
};
use vugrade_core::cascade::{
    read_predictions, train_cascade, write_predictions, CascadeModel, PredictionRow,
    ScoreDistribution, DEFAULT_GATE_THRESHOLD,
};
use vugrade_core::data::{
    load_manifest, ImageSet, MsasssScore, PreprocessConfig, VuImage, VuRecord,
};
use vugrade_core::metrics::{crossval_aggregate, evaluate, CrossValTable, MetricsReport};
use vugrade_core::split::{assign_folds, materialize_split, FoldAssignment};
use vugrade_core::synth::SyntheticConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the directory relative `--out` paths are
/// resolved against.
pub const OUTPUT_ROOT_ENV: &str = "VUGRADE_OUTPUT_ROOT";

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const ERROR_FILE: &str = "error.json";

/// Stage hyperparameters shared by both cascade stages. Unset fields take
/// the backend defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub class_weighting: ClassWeighting,
    pub baseline: BaselineOptions,
    pub deep: DeepOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub manifest: Option<PathBuf>,
    /// Held-out manifest for the cross-study protocol.
    pub test_manifest: Option<PathBuf>,
    /// Directory `image_ref` paths are relative to; defaults to the
    /// directory of each manifest.
    pub image_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
    pub stratify: bool,
    pub tau: f64,
    pub backend: BackendKind,
    pub training: TrainingConfig,
    pub preprocess: PreprocessConfig,
    pub synth: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            manifest: None,
            test_manifest: None,
            image_root: None,
            out: None,
            k: 5,
            seed: 0,
            stratify: false,
            tau: DEFAULT_GATE_THRESHOLD,
            backend: BackendKind::Baseline,
            training: TrainingConfig::default(),
            preprocess: PreprocessConfig::default(),
            synth: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(vugrade_core::Error::Config(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Stage specs with seeds derived from the run seed.
    pub fn stage_specs(&self) -> (ClassifierSpec, ClassifierSpec) {
        let build = |mut spec: ClassifierSpec, salt: u64| {
            if let Some(e) = self.training.epochs {
                spec.epochs = e;
            }
            if let Some(lr) = self.training.learning_rate {
                spec.learning_rate = lr;
            }
            spec.seed = self.seed.wrapping_mul(2).wrapping_add(salt);
            spec.class_weighting = self.training.class_weighting;
            spec.baseline = self.training.baseline.clone();
            spec.deep = self.training.deep.clone();
            spec
        };
        (
            build(ClassifierSpec::stage1(self.backend), 0),
            build(ClassifierSpec::stage2(self.backend), 1),
        )
    }

    /// Output directory after applying the output-root variable.
    pub fn resolve_out(&self, command: &str) -> anyhow::Result<PathBuf> {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        match (&self.out, root) {
            (Some(out), Some(root)) if out.is_relative() => Ok(root.join(out)),
            (Some(out), _) => Ok(out.clone()),
            (None, Some(root)) => Ok(root.join(command)),
            (None, None) => bail!(vugrade_core::Error::Config(format!(
                "no output directory: pass --out or set {OUTPUT_ROOT_ENV}"
            ))),
        }
    }

    fn require_manifest(&self) -> anyhow::Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| {
            vugrade_core::Error::Config("a manifest is required (--manifest)".into()).into()
        })
    }

    fn image_root_for(&self, manifest: &Path) -> PathBuf {
        self.image_root
            .clone()
            .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}

/// Written beside every run's outputs.
#[derive(Serialize)]
struct ResolvedConfig<'a> {
    config: &'a RunConfig,
    stage1: ClassifierSpec,
    stage2: ClassifierSpec,
    crate_version: &'static str,
}

pub fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let (stage1, stage2) = cfg.stage_specs();
    let resolved = ResolvedConfig {
        config: cfg,
        stage1,
        stage2,
        crate_version: env!("CARGO_PKG_VERSION"),
    };
    write_file(
        &dir.join(RESOLVED_CONFIG_FILE),
        &serde_json::to_vec_pretty(&resolved)?,
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Machine-readable failure record.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub command: String,
    pub kind: String,
    pub message: String,
}

impl ErrorRecord {
    pub fn from_error(command: &str, err: &anyhow::Error) -> Self {
        let kind = err
            .chain()
            .find_map(|e| e.downcast_ref::<vugrade_core::Error>())
            .map_or("internal", |e| e.kind());
        Self {
            command: command.to_string(),
            kind: kind.to_string(),
            message: format!("{err:#}"),
        }
    }
}

pub fn write_error_record(dir: &Path, record: &ErrorRecord) -> anyhow::Result<()> {
    write_file(&dir.join(ERROR_FILE), &serde_json::to_vec_pretty(record)?)
}

/// Loads a manifest with its preprocessed images.
pub fn load_corpus(cfg: &RunConfig, manifest: &Path) -> anyhow::Result<(Vec<VuRecord>, ImageSet)> {
    let records = load_manifest(manifest)?;
    let images = ImageSet::load(&records, cfg.image_root_for(manifest), &cfg.preprocess)?;
    Ok((records, images))
}

pub fn train(
    cfg: &RunConfig,
    records: &[VuRecord],
    images: &ImageSet,
) -> anyhow::Result<CascadeModel> {
    let (s1, s2) = cfg.stage_specs();
    Ok(train_cascade(
        records,
        images,
        &s1,
        &s2,
        cfg.tau,
        &cfg.preprocess,
    )?)
}

/// One row per corner of every record, in record order.
pub fn predict_records(
    model: &CascadeModel,
    records: &[VuRecord],
    images: &ImageSet,
) -> anyhow::Result<Vec<PredictionRow>> {
    let batch: Vec<&VuImage> = records
        .iter()
        .map(|r| images.get(r))
        .collect::<Result<_, _>>()?;
    let preds = model.predict_batch(&batch)?;
    Ok(records
        .iter()
        .zip(preds)
        .flat_map(|(r, p)| {
            p.corners.into_iter().map(|c| PredictionRow {
                vu_id: r.vu_id.clone(),
                prediction: c,
            })
        })
        .collect())
}

/// Scores every corner that has both a ground-truth label and a
/// prediction. Corners without ground truth are skipped.
pub fn evaluate_predictions(
    records: &[VuRecord],
    rows: &[PredictionRow],
) -> anyhow::Result<MetricsReport> {
    let truth: std::collections::HashMap<(&str, _), MsasssScore> = records
        .iter()
        .flat_map(|r| {
            r.labels()
                .into_iter()
                .filter_map(move |(s, l)| l.map(|l| ((r.vu_id.as_str(), s), l)))
        })
        .collect();
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    let mut dists: Vec<ScoreDistribution> = Vec::new();
    for row in rows {
        if let Some(&t) = truth.get(&(row.vu_id.as_str(), row.prediction.site)) {
            y_true.push(t);
            y_pred.push(row.prediction.label);
            dists.push(row.prediction.dist);
        }
    }
    Ok(evaluate(&y_true, &y_pred, &dists)?)
}

fn write_predictions_file(path: &Path, rows: &[PredictionRow]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_predictions(&mut buf, rows)?;
    write_file(path, &buf)
}

pub fn read_predictions_file(path: &Path) -> anyhow::Result<Vec<PredictionRow>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_predictions(file)?)
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport) -> anyhow::Result<()> {
    write_file(
        &dir.join("report.json"),
        &serde_json::to_vec_pretty(report)?,
    )?;
    write_file(&dir.join("report.txt"), report.to_text_table().as_bytes())
}

pub struct CrossValOutcome {
    pub assignment: FoldAssignment,
    pub fold_reports: Vec<MetricsReport>,
    pub table: CrossValTable,
}

/// Patient-level k-fold cross-validation of the cascade. Folds train in
/// parallel, each writing only into its own `fold_{i}` directory.
pub fn run_crossval(cfg: &RunConfig, out: &Path) -> anyhow::Result<CrossValOutcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(cfg, out)?;
    let manifest = cfg.require_manifest()?;
    let (records, images) = load_corpus(cfg, manifest)?;
    let assignment = assign_folds(&records, cfg.k, cfg.seed, cfg.stratify)?;
    write_file(
        &out.join("assignment.csv"),
        assignment.to_csv_string().as_bytes(),
    )?;

    let fold_reports = (0..cfg.k)
        .into_par_iter()
        .map(|fold| -> anyhow::Result<MetricsReport> {
            let dir = out.join(format!("fold_{fold}"));
            let (train_set, test_set) = materialize_split(&records, &assignment, fold)?;
            let model = train(cfg, &train_set, &images).with_context(|| format!("fold {fold}"))?;
            model.save(dir.join("model"))?;
            let rows = predict_records(&model, &test_set, &images)?;
            write_predictions_file(&dir.join("predictions.csv"), &rows)?;
            let report =
                evaluate_predictions(&test_set, &rows).with_context(|| format!("fold {fold}"))?;
            write_report(&dir, &report)?;
            log::info!(
                "fold {fold}: balanced accuracy {:.4}",
                report.balanced_accuracy
            );
            Ok(report)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let table = crossval_aggregate(&fold_reports)?;
    write_file(&out.join("aggregate.csv"), table.to_csv_string().as_bytes())?;
    write_file(&out.join("aggregate.txt"), table.to_text_table().as_bytes())?;
    write_file(
        &out.join("aggregate.json"),
        &serde_json::to_vec_pretty(&table)?,
    )?;
    Ok(CrossValOutcome {
        assignment,
        fold_reports,
        table,
    })
}

/// Cross-study protocol: fit on the whole training manifest and evaluate
/// on a separate test manifest.
pub fn run_single(cfg: &RunConfig, out: &Path) -> anyhow::Result<(CascadeModel, MetricsReport)> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(cfg, out)?;
    let train_manifest = cfg.require_manifest()?;
    let test_manifest = cfg.test_manifest.as_deref().ok_or_else(|| {
        vugrade_core::Error::Config("a test manifest is required (--test-manifest)".into())
    })?;
    let (train_records, train_images) = load_corpus(cfg, train_manifest)?;
    let model = train(cfg, &train_records, &train_images)?;
    model.save(out.join("model"))?;
    drop(train_images);
    let (test_records, test_images) = load_corpus(cfg, test_manifest)?;
    let rows = predict_records(&model, &test_records, &test_images)?;
    write_predictions_file(&out.join("predictions.csv"), &rows)?;
    let report = evaluate_predictions(&test_records, &rows)?;
    write_report(out, &report)?;
    Ok((model, report))
}

/// Trains on every labeled record of the manifest.
pub fn run_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<CascadeModel> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(cfg, out)?;
    let (records, images) = load_corpus(cfg, cfg.require_manifest()?)?;
    let model = train(cfg, &records, &images)?;
    model.save(out.join("model"))?;
    Ok(model)
}

/// Predicts every record of the manifest with a saved cascade. The
/// model's own preprocessing overrides the config's.
pub fn run_predict(
    cfg: &RunConfig,
    model_dir: &Path,
    out: &Path,
) -> anyhow::Result<Vec<PredictionRow>> {
    let model = CascadeModel::load(model_dir)?;
    let cfg = RunConfig {
        preprocess: model.preprocess.clone(),
        ..cfg.clone()
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(&cfg, out)?;
    let (records, images) = load_corpus(&cfg, cfg.require_manifest()?)?;
    let rows = predict_records(&model, &records, &images)?;
    write_predictions_file(&out.join("predictions.csv"), &rows)?;
    Ok(rows)
}

pub fn run_evaluate(
    cfg: &RunConfig,
    predictions: &Path,
    out: &Path,
) -> anyhow::Result<MetricsReport> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(cfg, out)?;
    let records = load_manifest(cfg.require_manifest()?)?;
    let rows = read_predictions_file(predictions)?;
    let report = evaluate_predictions(&records, &rows)?;
    write_report(out, &report)?;
    Ok(report)
}

pub fn run_split(cfg: &RunConfig, out: &Path) -> anyhow::Result<FoldAssignment> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(cfg, out)?;
    let records = load_manifest(cfg.require_manifest()?)?;
    let assignment = assign_folds(&records, cfg.k, cfg.seed, cfg.stratify)?;
    assignment.save(out.join("assignment.csv"))?;
    Ok(assignment)
}

pub fn run_synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<Vec<VuRecord>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_resolved_config(cfg, out)?;
    Ok(vugrade_core::synth::generate_corpus(&cfg.synth, out)?)
}
