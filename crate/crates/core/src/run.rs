//! Run orchestration: training with checkpoints and resume, generation,
//! ablation sweeps, comparison reports and survey export.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::advsegloss::{training_step, SegContext, StepReport};
use crate::config::{ColorImage, Scheme, TrainConfig, Variant};
use crate::data::{validate_dataset, Dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::eval::{compute_fid, emit_sample_grid, FeatureExtractor};
use crate::gan::{build_networks, lr_factor, ArchConfig, NetworkBundle};
use crate::image_io::{self, list_images, stem};
use crate::segmentation::{load_backend, FgBgPartition};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_FILE: &str = "losses.csv";
pub const GENERATIONS_DIR: &str = "generations";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub epoch: usize,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub root: PathBuf,
    pub scheme: Scheme,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: TrainConfig,
    pub config_digest: String,
    pub dataset: DatasetInfo,
    pub source_digest: String,
    pub backend_id: String,
    pub backend_digest: String,
    pub checkpoints: Vec<CheckpointEntry>,
    pub epochs_completed: usize,
    pub status: RunStatus,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join(MANIFEST_FILE)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
    }

    /// Write-temp-then-rename, so readers never see a partial manifest.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = Self::path(run_dir);
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.run_dir()
    }

    pub fn last_checkpoint(&self) -> Option<&CheckpointEntry> {
        self.checkpoints.last()
    }

    /// Every checkpoint file the manifest lists that is missing on disk.
    pub fn missing_checkpoints(&self) -> Vec<PathBuf> {
        self.checkpoints.iter().flat_map(|c| c.files.iter()).filter(|f| !f.is_file()).cloned().collect()
    }

    /// Column the run belongs to in a comparison table.
    pub fn label(&self) -> &'static str {
        model_label(&self.config)
    }
}

/// `baseline` when both auxiliary weights are zero, otherwise the variant.
pub fn model_label(cfg: &TrainConfig) -> &'static str {
    if cfg.w_b == 0.0 && cfg.w_m == 0.0 {
        return "baseline";
    }
    match cfg.variant {
        Variant::MultiClass => "multiclass",
        Variant::Binary => "binary",
        Variant::Both => "both",
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the last checkpoint of an existing run with the same config.
    pub resume: bool,
    /// Stop after this many epochs in this invocation, leaving the run resumable.
    pub max_epochs: Option<usize>,
    /// Skip generating test-split outputs when training finishes.
    pub skip_generation: bool,
    /// Called with each step report.
    pub progress: Option<fn(usize, &StepReport)>,
}

fn partition_for(cfg: &TrainConfig) -> Result<FgBgPartition> {
    match &cfg.partition_file {
        Some(p) => FgBgPartition::load(p, cfg.num_classes),
        None => FgBgPartition::default_for(cfg.num_classes),
    }
}

fn rewrite_losses(path: &Path, keep_through_epoch: usize) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
        if i == 0 || epoch.is_some_and(|e| e <= keep_through_epoch) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains (or resumes) the run described by `cfg` and returns its manifest.
///
/// Checkpoints land every `checkpoint_interval` epochs and after the last one.
/// Resuming requires an identical config digest and backend; training restarts
/// from the most recent checkpoint, so epochs after it are recomputed.
pub fn train(cfg: &TrainConfig, opts: &TrainOptions) -> Result<RunManifest> {
    cfg.validate()?;
    let dtype = cfg.dtype();
    let run_dir = cfg.run_dir();
    let spec = DatasetSpec::new(&cfg.dataset, &cfg.dataset_root, cfg.scheme);
    let report = validate_dataset(&spec)?;
    for v in &report.violations {
        log::warn!("dataset {}: {v}", spec.name);
    }
    let train_set = Dataset::open(&spec, Split::Train, cfg.image_size)?;
    let backend = load_backend(&cfg.seg_backend, cfg.num_classes, cfg.seg_temperature, dtype)?;
    let backend_digest = backend.digest()?;
    let ctx = SegContext::new(backend.as_ref(), partition_for(cfg)?, cfg.seg_map_size, dtype)?;
    let variant = cfg.variant_config();
    let mut nets = build_networks(cfg.scheme, Some(&variant), &ArchConfig::from(cfg))?;

    let manifest_path = RunManifest::path(&run_dir);
    let loss_path = run_dir.join(LOSS_FILE);
    let mut manifest = if manifest_path.is_file() {
        if !opts.resume {
            return Err(Error::Resume(format!(
                "run directory {} already holds a run; resume it or choose another run_name",
                run_dir.display()
            )));
        }
        let m = RunManifest::load(&manifest_path)?;
        if m.config_digest != cfg.digest() {
            return Err(Error::Resume(format!(
                "config digest {} differs from the run's {}",
                cfg.digest(),
                m.config_digest
            )));
        }
        if m.backend_digest != backend_digest {
            return Err(Error::Resume("segmentation backend weights changed".into()));
        }
        if let Some(last) = m.missing_checkpoints().first() {
            return Err(Error::Resume(format!("listed checkpoint {} is missing", last.display())));
        }
        if m.status == RunStatus::Completed {
            return Ok(m);
        }
        let start = m.last_checkpoint().map(|c| c.epoch).unwrap_or(0);
        if start > 0 {
            nets.load(&run_dir, start)?;
        }
        rewrite_losses(&loss_path, start)?;
        RunManifest { epochs_completed: start, status: RunStatus::Running, ..m }
    } else {
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        RunManifest {
            run_id: cfg.run_name.clone(),
            config: cfg.clone(),
            config_digest: cfg.digest(),
            dataset: DatasetInfo {
                name: spec.name.clone(),
                root: spec.root.clone(),
                scheme: spec.scheme,
                counts: report.counts.clone(),
            },
            source_digest: crate::SOURCE_DIGEST.to_string(),
            backend_id: backend.id(),
            backend_digest: backend_digest.clone(),
            checkpoints: Vec::new(),
            epochs_completed: 0,
            status: RunStatus::Running,
        }
    };
    manifest.save(&run_dir)?;
    if !loss_path.is_file() {
        std::fs::write(&loss_path, format!("epoch,{}\n", StepReport::csv_header())).map_err(|e| Error::io(&loss_path, e))?;
    }

    let first = manifest.epochs_completed + 1;
    let last = match opts.max_epochs {
        Some(n) => cfg.epochs.min(manifest.epochs_completed + n),
        None => cfg.epochs,
    };
    let weights = cfg.weights();
    for epoch in first..=last {
        nets.set_lr(cfg.learning_rate * lr_factor(epoch, cfg.lr_constant_epochs, cfg.epochs));
        let order = train_set.epoch_order(cfg.seed, epoch, true);
        let mut lines = String::new();
        for batch in train_set.prefetch(order, cfg.batch_size, dtype) {
            let step = batch.and_then(|b| training_step(&b, &mut nets, &ctx, &variant, &weights));
            match step {
                Ok(r) => {
                    if let Some(cb) = opts.progress {
                        cb(epoch, &r);
                    }
                    lines.push_str(&format!("{epoch},{}\n", r.csv_line()));
                }
                Err(e) => {
                    manifest.status = RunStatus::Failed { reason: e.to_string() };
                    manifest.save(&run_dir)?;
                    return Err(e);
                }
            }
        }
        let mut f = OpenOptions::new().append(true).open(&loss_path).map_err(|e| Error::io(&loss_path, e))?;
        f.write_all(lines.as_bytes()).map_err(|e| Error::io(&loss_path, e))?;
        if epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs || epoch == last {
            let files = nets.save(&run_dir, epoch)?;
            manifest.checkpoints.retain(|c| c.epoch != epoch);
            manifest.checkpoints.push(CheckpointEntry { epoch, files });
        }
        manifest.epochs_completed = epoch;
        manifest.save(&run_dir)?;
    }
    if manifest.epochs_completed == cfg.epochs {
        if !opts.skip_generation && spec.dir(Split::Test.sketch_dir()).is_dir() {
            let sketches = spec.dir(Split::Test.sketch_dir());
            if !list_images(&sketches)?.is_empty() {
                generate_dir(&nets, &sketches, &run_dir.join(GENERATIONS_DIR), cfg.image_size, dtype)?;
            }
        }
        manifest.status = RunStatus::Completed;
        manifest.save(&run_dir)?;
    }
    Ok(manifest)
}

/// Rebuilds the networks of a run and loads the checkpoint at `epoch` (latest if `None`).
pub fn load_run(manifest: &RunManifest, epoch: Option<usize>) -> Result<NetworkBundle> {
    let cfg = &manifest.config;
    let epoch = match epoch {
        Some(e) => e,
        None => manifest.last_checkpoint().map(|c| c.epoch).ok_or_else(|| {
            Error::Checkpoint(format!("run {} has no checkpoints", manifest.run_id))
        })?,
    };
    let variant = cfg.variant_config();
    let mut nets = build_networks(cfg.scheme, Some(&variant), &ArchConfig::from(cfg))?;
    nets.load(&manifest.run_dir(), epoch)?;
    Ok(nets)
}

/// Colors every sketch in `sketch_dir`, writing `{stem}.png` into `out_dir`.
pub fn generate_dir(
    nets: &NetworkBundle,
    sketch_dir: &Path,
    out_dir: &Path,
    image_size: usize,
    dtype: DType,
) -> Result<usize> {
    let files = list_images(sketch_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDir(sketch_dir.to_path_buf()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for f in &files {
        let sketch = image_io::load_sketch(f, image_size)?;
        let input = sketch.to_tensor(&Device::Cpu, dtype)?.affine(2.0, -1.0)?;
        let out = nets.g_ab.model.forward(&input)?.to_dtype(DType::F32)?;
        let color = ColorImage::from_tensor(&out)?;
        image_io::save_png(&image_io::color_to_rgb(&color), &out_dir.join(format!("{}.png", stem(f))))?;
    }
    Ok(files.len())
}

/// Sample grid of the run's generator over the sketches in `sketch_dir`.
pub fn sample(
    manifest: &RunManifest,
    epoch: Option<usize>,
    sketch_dir: &Path,
    out: &Path,
    columns: usize,
    limit: Option<usize>,
) -> Result<(usize, usize)> {
    let nets = load_run(manifest, epoch)?;
    let mut files = list_images(sketch_dir)?;
    if let Some(n) = limit {
        files.truncate(n);
    }
    let cfg = &manifest.config;
    emit_sample_grid(&nets.g_ab.model, &files, out, columns, cfg.image_size, cfg.dtype())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub weight: f64,
    pub run_name: String,
    pub fid: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn best(&self) -> Option<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.fid.map(|f| (i, f)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }

    pub fn to_markdown(&self) -> String {
        let best = self.best();
        let mut s = String::from("| w_b = w_m | FID |\n|---|---|\n");
        for (i, r) in self.rows.iter().enumerate() {
            let cell = match (&r.fid, &r.error) {
                (Some(f), _) if Some(i) == best => format!("**{f:.2}**"),
                (Some(f), _) => format!("{f:.2}"),
                (None, Some(e)) => format!("failed: {e}"),
                (None, None) => "failed".into(),
            };
            s.push_str(&format!("| {} | {cell} |\n", r.weight));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let best = self.best();
        let mut s = String::from("weight,fid,best,error\n");
        for (i, r) in self.rows.iter().enumerate() {
            let fid = r.fid.map(|f| f.to_string()).unwrap_or_default();
            let err = r.error.as_deref().unwrap_or("").replace(',', ";");
            s.push_str(&format!("{},{fid},{},{err}\n", r.weight, Some(i) == best));
        }
        s
    }
}

/// Trains and evaluates one run per weight with `w_b = w_m = weight`, keeping
/// `w_g` fixed. A failing leg is recorded and the sweep continues.
pub fn ablate(cfg: &TrainConfig, grid: &[f64], extractor: &dyn FeatureExtractor) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let real_dir = cfg.dataset_root.join(Split::Test.color_dir());
    let mut rows = Vec::new();
    for &w in grid {
        let mut leg = cfg.clone();
        leg.w_b = w;
        leg.w_m = w;
        leg.run_name = format!("{}_w{w}", cfg.run_name);
        let outcome = train(&leg, &TrainOptions { resume: true, ..Default::default() }).and_then(|m| {
            let gen = m.run_dir().join(GENERATIONS_DIR);
            compute_fid(&real_dir, &gen, extractor).map(|r| r.fid)
        });
        rows.push(match outcome {
            Ok(fid) => AblationRow { weight: w, run_name: leg.run_name, fid: Some(fid), error: None },
            Err(e) => AblationRow { weight: w, run_name: leg.run_name, fid: None, error: Some(e.to_string()) },
        });
    }
    Ok(AblationTable { rows })
}

pub const REPORT_COLUMNS: [&str; 4] = ["baseline", "multiclass", "binary", "both"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub scheme: Scheme,
    /// FID per column; `None` marks an absent run or missing generations.
    pub cells: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    pub notes: Vec<String>,
}

impl ReportTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| dataset | scheme | baseline | +multi-class | +binary | +both |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let cells: Vec<String> = REPORT_COLUMNS
                .iter()
                .map(|c| match r.cells.get(*c).copied().flatten() {
                    Some(f) => format!("{f:.2}"),
                    None => "absent".into(),
                })
                .collect();
            s.push_str(&format!("| {} | {} | {} |\n", r.dataset, r.scheme, cells.join(" | ")));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("dataset,scheme,{}\n", REPORT_COLUMNS.join(","));
        for r in &self.rows {
            let cells: Vec<String> = REPORT_COLUMNS
                .iter()
                .map(|c| r.cells.get(*c).copied().flatten().map(|f| f.to_string()).unwrap_or_default())
                .collect();
            s.push_str(&format!("{},{},{}\n", r.dataset, r.scheme, cells.join(",")));
        }
        s
    }
}

/// FID of each run's generations against its dataset's test colors (or
/// `real_override`), arranged as dataset × model.
pub fn report(
    manifests: &[PathBuf],
    real_override: Option<&Path>,
    extractor: &dyn FeatureExtractor,
) -> Result<ReportTable> {
    let mut rows: BTreeMap<(String, String), ReportRow> = BTreeMap::new();
    let mut notes = Vec::new();
    for path in manifests {
        let m = RunManifest::load(path)?;
        let key = (m.dataset.name.clone(), m.config.scheme.to_string());
        let row = rows.entry(key).or_insert_with(|| ReportRow {
            dataset: m.dataset.name.clone(),
            scheme: m.config.scheme,
            cells: REPORT_COLUMNS.iter().map(|c| (c.to_string(), None)).collect(),
        });
        let gen = m.run_dir().join(GENERATIONS_DIR);
        let real = real_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| m.dataset.root.join(Split::Test.color_dir()));
        match compute_fid(&real, &gen, extractor) {
            Ok(r) => {
                row.cells.insert(m.label().to_string(), Some(r.fid));
            }
            Err(e) => notes.push(format!("{}: {e}", m.run_id)),
        }
    }
    Ok(ReportTable { rows: rows.into_values().collect(), notes })
}

/// Copies matching generations of two runs into `{content}/{dataset}/{baseline,ours}/`.
pub fn survey_export(baseline: &RunManifest, ours: &RunManifest, content_dir: &Path) -> Result<usize> {
    let dataset = &ours.dataset.name;
    let base_dir = baseline.run_dir().join(GENERATIONS_DIR);
    let ours_dir = ours.run_dir().join(GENERATIONS_DIR);
    let ours_stems: BTreeMap<String, PathBuf> = list_images(&ours_dir)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut copied = 0;
    for b in list_images(&base_dir)? {
        let s = stem(&b);
        let Some(o) = ours_stems.get(&s) else { continue };
        for (model, src) in [("baseline", &b), ("ours", o)] {
            let dst_dir = content_dir.join(dataset).join(model);
            std::fs::create_dir_all(&dst_dir).map_err(|e| Error::io(&dst_dir, e))?;
            let dst = dst_dir.join(format!("{s}.png"));
            std::fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
        }
        copied += 1;
    }
    if copied == 0 {
        return Err(Error::EmptyDir(ours_dir));
    }
    Ok(copied)
}
