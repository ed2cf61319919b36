//! Experiment stages and the per-arm run.
//!
//! Shared artifacts (datasets, the pretrained detector) are cached under the
//! work directory by a hash of everything that determines them, written once
//! through a temporary path and never modified afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dtmars_core::bbox::BBox;
use dtmars_core::detector::{detect_images, Detection, DetectionSet, Detector, DetectorTrainer, Sample, TrainHyper};
use dtmars_core::gan::{translate_images, GanBundle, GanTrainer, StepLog};
use dtmars_core::metrics::{evaluate, DetectionMetrics, RowMetrics};
use dtmars_core::pseudoreal::RealStyle;
use dtmars_core::raster::RgbImage;
use dtmars_core::rowgeom::{centers, fit_line_lsq, fit_line_ransac, offsets, row_mae, OffsetSignal, RansacParams};
use dtmars_core::synth::SynthConfig;
use dtmars_core::IMAGE_SIZE;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{append_jsonl, load_detector, save_detector, save_gan};
use crate::config::{Arm, EvalConfig, ExperimentConfig};
use crate::dataset::{
    generate_dataset, load_images, load_labeled, load_yolo_dataset, write_translated, AuditLog, DatasetManifest,
    LabeledImage, Purpose, MANIFEST_FILE,
};
use crate::error::{PipelineError, Result, Stage, StageExt};

/// Element type of every network the pipeline trains.
pub type Net = f32;

/// Short hex digest of a value's JSON form.
pub fn hash_json<S: Serialize + ?Sized>(v: &S) -> String {
    let bytes = serde_json::to_vec(v).expect("value serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

fn io(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::io(stage, path, e)
}

fn write_text(path: &Path, text: &str, stage: Stage) -> Result<()> {
    fs::write(path, text).map_err(io(stage, path))
}

/// Moves a freshly built directory into its final place.
fn publish(tmp: &Path, dir: &Path, stage: Stage) -> Result<()> {
    if let Some(parent) = dir.parent() {
        fs::create_dir_all(parent).map_err(io(stage, parent))?;
    }
    fs::rename(tmp, dir).map_err(io(stage, dir))
}

fn fresh_dir(path: &Path, stage: Stage) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).map_err(io(stage, path))?;
    }
    fs::create_dir_all(path).map_err(io(stage, path))
}

/// Generates a dataset once per distinct settings and reuses it afterwards.
pub fn cached_dataset(work_dir: &Path, kind: &str, cfg: &SynthConfig, style: Option<&RealStyle>) -> Result<DatasetManifest> {
    let key = hash_json(&(kind, cfg, style));
    let dir = work_dir.join("datasets").join(format!("{kind}-{key}"));
    if dir.join(MANIFEST_FILE).is_file() {
        return load_yolo_dataset(&dir);
    }
    let tmp = work_dir.join("datasets").join(format!(".{kind}-{key}.partial"));
    fresh_dir(&tmp, Stage::Synth)?;
    log::info!("generating {kind} dataset ({} images)", cfg.n_images);
    generate_dataset(cfg, style, &tmp)?;
    publish(&tmp, &dir, Stage::Synth)?;
    load_yolo_dataset(&dir)
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub sim: DatasetManifest,
    /// Unlabeled translator training images; only built for GAN arms.
    pub real_train: Option<DatasetManifest>,
    pub real_test: DatasetManifest,
    pub rows: DatasetManifest,
}

impl Datasets {
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("sim".into(), self.sim.content_hash.clone());
        if let Some(r) = &self.real_train {
            m.insert("real_train_images".into(), r.image_hash.clone());
        }
        m.insert("real_test".into(), self.real_test.content_hash.clone());
        m.insert("rows".into(), self.rows.content_hash.clone());
        m
    }
}

pub fn prepare_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let work = &cfg.paths.work_dir;
    let style = &cfg.real.style;
    let open_or = |p: &Option<PathBuf>, make: &dyn Fn() -> Result<DatasetManifest>| match p {
        Some(p) => load_yolo_dataset(p),
        None => make(),
    };
    let sim = open_or(&cfg.paths.sim_dataset, &|| cached_dataset(work, "sim", &cfg.sim_synth(), None))?;
    let real_train = if cfg.arm.uses_gan() {
        Some(open_or(&cfg.paths.real_dataset, &|| {
            cached_dataset(work, "real-train", &cfg.real_train_synth(), Some(style))
        })?)
    } else {
        None
    };
    let real_test =
        open_or(&cfg.paths.test_dataset, &|| cached_dataset(work, "real-test", &cfg.real_test_synth(), Some(style)))?;
    let row_style = cfg.eval.rows.pseudo_real.then_some(style);
    let rows = open_or(&cfg.paths.row_dataset, &|| cached_dataset(work, "rows", &cfg.row_synth(), row_style))?;
    Ok(Datasets { sim, real_train, real_test, rows })
}

pub fn samples(data: &[LabeledImage]) -> Vec<Sample<'_>> {
    data.iter().map(|d| Sample { image: &d.image, boxes: &d.boxes }).collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains `det` epoch by epoch, logging progress; returns per-epoch losses.
pub fn train_detector_logged(
    det: &mut Detector<Net>,
    data: &[LabeledImage],
    hyper: &TrainHyper,
    stage: Stage,
) -> Result<Vec<EpochLoss>> {
    let s = samples(data);
    if s.is_empty() {
        return Err(PipelineError::Core { stage, source: dtmars_core::Error::EmptyDataset });
    }
    let mut trainer = DetectorTrainer::new(*hyper).stage(stage)?;
    let mut out = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let loss = trainer.train_epoch(det, &s).stage(stage)?;
        log::info!("[{stage}] epoch {}/{} loss {loss:.4}", epoch + 1, hyper.epochs);
        out.push(EpochLoss { epoch, loss });
    }
    Ok(out)
}

/// Detector trained on raw simulation data, cached by its inputs.
pub fn pretrained_detector(cfg: &ExperimentConfig, sim: &DatasetManifest, audit: &AuditLog) -> Result<(Detector<Net>, PathBuf)> {
    let hyper = cfg.pretrain_hyper();
    let init_seed = cfg.seed("detector-init");
    let key = hash_json(&(cfg.detector, hyper, init_seed, &sim.content_hash, &sim.image_hash));
    let dir = cfg.paths.work_dir.join("pretrain").join(key);
    let ckpt = dir.join("detector.ckpt");
    if ckpt.is_file() {
        return Ok((load_detector(&ckpt)?.0, ckpt));
    }
    let data = load_labeled(sim, audit, Purpose::Training)?;
    let mut det = Detector::new(cfg.detector, init_seed);
    let losses = train_detector_logged(&mut det, &data, &hyper, Stage::DetectorPretrain)?;
    let tmp = dir.with_extension("partial");
    fresh_dir(&tmp, Stage::DetectorPretrain)?;
    save_detector(&tmp.join("detector.ckpt"), &det, &hyper, init_seed, &sim.content_hash)?;
    append_jsonl(&tmp.join("loss_log.jsonl"), &losses)?;
    publish(&tmp, &dir, Stage::DetectorPretrain)?;
    Ok((det, ckpt))
}

/// Joint translator training; the detector is updated only when the
/// schedule's detector period is nonzero.
pub fn train_gan_stage(
    cfg: &ExperimentConfig,
    sim: &[LabeledImage],
    real: &[RgbImage],
    detector: &mut Detector<Net>,
) -> Result<(GanBundle<Net>, Vec<StepLog>)> {
    let schedule = cfg.gan.schedule;
    let mut bundle = GanBundle::new(
        cfg.gan.generator,
        cfg.gan.discriminator,
        cfg.gan.weights,
        schedule.pool_capacity,
        cfg.seed("gan-init"),
    );
    bundle.weights.validate().stage(Stage::Gan)?;
    let mut trainer = GanTrainer::new(schedule, cfg.seed("gan-train")).stage(Stage::Gan)?;
    let s = samples(sim);
    let reals: Vec<&RgbImage> = real.iter().collect();
    let mut log = Vec::new();
    for epoch in 0..schedule.epochs {
        let steps = trainer.train_epoch(&mut bundle, detector, &s, &reals).stage(Stage::Gan)?;
        let mean = steps.iter().map(|l| l.losses.total).sum::<f64>() / steps.len().max(1) as f64;
        log::info!("[gan] epoch {}/{} mean generator loss {mean:.4}", epoch + 1, schedule.epochs);
        log.extend(steps);
    }
    Ok((bundle, log))
}

/// Detections for every image of a dataset.
pub fn detect_dataset(det: &Detector<Net>, images: &[RgbImage], eval: &EvalConfig, for_ap: bool) -> Result<Vec<DetectionSet>> {
    let refs: Vec<&RgbImage> = images.iter().collect();
    let params = if for_ap { eval.decode_for_ap() } else { eval.decode() };
    detect_images(det, &refs, &params).stage(Stage::Evaluate)
}

pub fn evaluate_detector(det: &Detector<Net>, test: &DatasetManifest, eval: &EvalConfig, audit: &AuditLog) -> Result<DetectionMetrics> {
    let data = load_labeled(test, audit, Purpose::Evaluation)?;
    let images: Vec<RgbImage> = data.iter().map(|d| d.image.clone()).collect();
    let dets = detect_dataset(det, &images, eval, true)?;
    let gts: Vec<Vec<BBox>> = data.into_iter().map(|d| d.boxes).collect();
    evaluate(&dets, &gts, eval.conf_thresh).stage(Stage::Evaluate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Fitter {
    Lsq,
    Ransac,
}

/// Servo signals of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub frame: String,
    pub truth: OffsetSignal,
    /// `None` when the line could not be fitted.
    pub predicted: Option<OffsetSignal>,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub fitter: Fitter,
    pub records: Vec<RowRecord>,
    /// Over frames with a fitted line; `None` if no frame could be fitted.
    pub metrics: Option<RowMetrics>,
    pub n_failed: usize,
}

/// Ground-truth boxes as confidence-1 detections.
pub fn oracle_detections(boxes: &[Vec<BBox>]) -> Vec<DetectionSet> {
    boxes
        .iter()
        .map(|b| DetectionSet {
            detections: b.iter().map(|&bbox| Detection { bbox, confidence: 1.0 }).collect(),
            image_dims: (IMAGE_SIZE, IMAGE_SIZE),
        })
        .collect()
}

/// Fits one line per frame and compares the offsets with the row truth.
pub fn row_offsets(sets: &[DetectionSet], manifest: &DatasetManifest, fitter: Fitter, ransac: &RansacParams) -> Result<RowReport> {
    if sets.len() != manifest.len() {
        return Err(PipelineError::Core {
            stage: Stage::Rows,
            source: dtmars_core::Error::LengthMismatch(sets.len(), manifest.len()),
        });
    }
    let mut records = Vec::with_capacity(sets.len());
    for (set, e) in sets.iter().zip(&manifest.entries) {
        let gt = e
            .row
            .ok_or_else(|| PipelineError::Validation(format!("frame {} has no ground-truth row", e.stem)))?;
        let pts = centers(set);
        let fit = match fitter {
            Fitter::Lsq => fit_line_lsq(&pts, IMAGE_SIZE),
            Fitter::Ransac => fit_line_ransac(&pts, ransac, IMAGE_SIZE),
        };
        records.push(RowRecord {
            frame: e.stem.clone(),
            truth: OffsetSignal { theta_deg: gt.angle_deg, l_px: gt.offset_px },
            predicted: fit.ok().map(|l| offsets(&l, (IMAGE_SIZE, IMAGE_SIZE))),
            n_points: pts.len(),
        });
    }
    let (pred, truth): (Vec<OffsetSignal>, Vec<OffsetSignal>) =
        records.iter().filter_map(|r| r.predicted.map(|p| (p, r.truth))).unzip();
    let n_failed = records.len() - pred.len();
    let metrics = if pred.is_empty() { None } else { Some(row_mae(&pred, &truth).stage(Stage::Rows)?) };
    Ok(RowReport { fitter, records, metrics, n_failed })
}

/// Line-delimited `(frame, theta_deg, l_px)` records of fitted frames.
pub fn write_offset_signals(path: &Path, report: &RowReport) -> Result<()> {
    #[derive(Serialize)]
    struct Signal<'a> {
        frame: &'a str,
        theta_deg: f64,
        l_px: f64,
    }
    let recs: Vec<Signal<'_>> = report
        .records
        .iter()
        .filter_map(|r| r.predicted.map(|p| Signal { frame: &r.frame, theta_deg: p.theta_deg, l_px: p.l_px }))
        .collect();
    if path.exists() {
        fs::remove_file(path).map_err(io(Stage::Report, path))?;
    }
    append_jsonl(path, &recs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub ransac: Option<RowMetrics>,
    pub lsq: Option<RowMetrics>,
    pub ransac_failed: usize,
    pub lsq_failed: usize,
    pub frames: usize,
}

pub fn row_summary(det: &Detector<Net>, rows: &DatasetManifest, eval: &EvalConfig) -> Result<(RowSummary, RowReport, RowReport)> {
    let images = load_images(rows)?;
    let sets = detect_dataset(det, &images, eval, false)?;
    let r = row_offsets(&sets, rows, Fitter::Ransac, &eval.ransac)?;
    let l = row_offsets(&sets, rows, Fitter::Lsq, &eval.ransac)?;
    let summary = RowSummary {
        ransac: r.metrics,
        lsq: l.metrics,
        ransac_failed: r.n_failed,
        lsq_failed: l.n_failed,
        frames: rows.len(),
    };
    Ok((summary, r, l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub steps: u64,
    pub first_epoch_mean: f64,
    pub last_epoch_mean: f64,
    pub detector_updates: usize,
}

fn gan_summary(log: &[StepLog]) -> GanSummary {
    let mean = |e: usize| {
        let v: Vec<f64> = log.iter().filter(|l| l.epoch == e).map(|l| l.losses.total).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let last = log.last().map_or(0, |l| l.epoch);
    GanSummary {
        steps: log.len() as u64,
        first_epoch_mean: mean(0),
        last_epoch_mean: mean(last),
        detector_updates: log.iter().filter(|l| l.detector.is_some()).count(),
    }
}

/// Deterministic outcome of one arm; written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub arm: Arm,
    pub method: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
    pub dataset_hashes: BTreeMap<String, String>,
    pub metrics: DetectionMetrics,
    pub rows: RowSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gan: Option<GanSummary>,
    /// Digest of the final detector checkpoint.
    pub detector_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub run_dir: PathBuf,
    pub audit: AuditLog,
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.work_dir.join("runs").join(format!("{}-{}", cfg.name, cfg.arm))
}

/// Hash of the settings that determine results; the work directory is
/// excluded so relocated reruns compare equal.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.paths.work_dir = PathBuf::new();
    hash_json(&c)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io(Stage::Checkpoint, path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Runs one arm end to end: data, optional translator training, detector
/// training on raw or translated simulation data, evaluation on held-out
/// pseudo-real images and row offsets.
pub fn run_arm(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let arm = cfg.arm;
    let audit = AuditLog::new();
    let data = prepare_datasets(cfg)?;
    let dir = run_dir(cfg);
    fresh_dir(&dir, Stage::Report)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml(), Stage::Report)?;

    let (mut det, pretrain_path) = pretrained_detector(cfg, &data.sim, &audit)?;
    log::info!("[{arm}] pretrained detector {}", pretrain_path.display());
    let mut gan = None;
    let mut train_hash = data.sim.content_hash.clone();
    if arm.uses_gan() {
        let real_train = data.real_train.as_ref().expect("GAN arms prepare real images");
        let sim = load_labeled(&data.sim, &audit, Purpose::Training)?;
        let real = load_images(real_train)?;
        let (bundle, log) = train_gan_stage(cfg, &sim, &real, &mut det)?;
        save_gan(&dir.join("gan.ckpt"), &bundle, &cfg.gan.schedule, cfg.seed("gan-init"), &data.sim.content_hash)?;
        append_jsonl(&dir.join("gan_log.jsonl"), &log)?;
        gan = Some(gan_summary(&log));

        let refs: Vec<&RgbImage> = sim.iter().map(|s| &s.image).collect();
        let translated = translate_images(&bundle.g_r, &refs).stage(Stage::Translate)?;
        drop(sim);
        let tdir = dir.join("translated");
        let tman = write_translated(&data.sim, &translated, &tdir)?;
        drop(translated);
        let tdata = load_labeled(&tman, &audit, Purpose::Training)?;
        let hyper = cfg.finetune_hyper();
        let losses = train_detector_logged(&mut det, &tdata, &hyper, Stage::DetectorFinetune)?;
        append_jsonl(&dir.join("finetune_log.jsonl"), &losses)?;
        train_hash = tman.content_hash.clone();
    }
    let det_path = dir.join("detector.ckpt");
    save_detector(&det_path, &det, &cfg.finetune_hyper(), cfg.master_seed, &train_hash)?;

    let metrics = evaluate_detector(&det, &data.real_test, &cfg.eval, &audit)?;
    let (rows, ransac, lsq) = row_summary(&det, &data.rows, &cfg.eval)?;
    write_offset_signals(&dir.join("offsets_ransac.jsonl"), &ransac)?;
    write_offset_signals(&dir.join("offsets_lsq.jsonl"), &lsq)?;

    audit.write_jsonl(&dir.join("audit.jsonl"))?;
    let violations = audit.violations();
    if !violations.is_empty() {
        return Err(PipelineError::runtime(
            Stage::Report,
            format!("real-domain labels were read during training: {}", violations[0].path.display()),
        ));
    }

    let mut seeds = BTreeMap::new();
    for s in ["sim", "real-train", "real-test", "rows", "detector-init", "pretrain", "finetune", "gan-init", "gan-train"] {
        seeds.insert(s.to_string(), cfg.seed(s));
    }
    let record = RunRecord {
        name: cfg.name.clone(),
        arm,
        method: arm.display_name().into(),
        master_seed: cfg.master_seed,
        seeds,
        config_hash: config_hash(cfg),
        dataset_hashes: data.hashes(),
        metrics,
        rows,
        gan,
        detector_hash: file_digest(&det_path)?,
    };
    let metrics_json = serde_json::to_string_pretty(&record).expect("record serializes");
    write_text(&dir.join("metrics.json"), &metrics_json, Stage::Report)?;
    let full = serde_json::json!({
        "record": record,
        "run_dir": dir,
        "pretrained_detector": pretrain_path,
        "elapsed_s": started.elapsed().as_secs_f64(),
    });
    write_text(&dir.join("record.json"), &serde_json::to_string_pretty(&full).expect("json"), Stage::Report)?;
    log::info!(
        "[{arm}] P {:.3} R {:.3} mAP50 {:.3} mAP50-95 {:.3} ({:.0}s)",
        record.metrics.precision,
        record.metrics.recall,
        record.metrics.map50,
        record.metrics.map50_95,
        started.elapsed().as_secs_f64()
    );
    Ok(RunOutcome { record, run_dir: dir, audit })
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub records: Vec<RunRecord>,
    pub detection_table: String,
    pub row_table: String,
    pub report_dir: PathBuf,
}

/// Runs `arms` with otherwise identical settings and writes both tables.
pub fn run_comparison(cfg: &ExperimentConfig, arms: &[Arm]) -> Result<Comparison> {
    for &arm in arms {
        cfg.for_arm(arm).validate()?;
    }
    let mut records = Vec::with_capacity(arms.len());
    for &arm in arms {
        records.push(run_arm(&cfg.for_arm(arm))?.record);
    }
    let detection_table = crate::report::detection_table(&records);
    let row_table = crate::report::row_table(&records);
    let report_dir = cfg.paths.work_dir.join("reports").join(&cfg.name);
    fs::create_dir_all(&report_dir).map_err(io(Stage::Report, &report_dir))?;
    write_text(&report_dir.join("detection_table.txt"), &detection_table, Stage::Report)?;
    write_text(&report_dir.join("row_table.txt"), &row_table, Stage::Report)?;
    let path = report_dir.join("records.jsonl");
    if path.exists() {
        fs::remove_file(&path).map_err(io(Stage::Report, &path))?;
    }
    append_jsonl(&path, &records)?;
    Ok(Comparison { records, detection_table, row_table, report_dir })
}
