//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dtmars_core::detector::Detector;
use dtmars_core::gan::translate_images;
use dtmars_core::raster::RgbImage;

use crate::checkpoint::{append_jsonl, load_detector, load_gan, save_detector, save_gan};
use crate::config::{apply_override, desk_preset, Arm, ExperimentConfig};
use crate::dataset::{generate_dataset, load_images, load_labeled, load_yolo_dataset, validate_dataset, write_translated, AuditLog, Purpose};
use crate::error::{PipelineError, Result, Stage};
use crate::pipeline::{
    detect_dataset, evaluate_detector, oracle_detections, row_offsets, run_arm, run_comparison, train_detector_logged,
    train_gan_stage, write_offset_signals, Fitter, RowSummary,
};
use crate::report::{detection_table_rows, row_table_rows};

#[derive(Debug, Parser)]
#[command(name = "dtmars", version, about = "Sim-to-real crop detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Built-in settings used when no config file is given.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Scalar override, e.g. `gan.weights.lambda_cyc=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    Desk,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, Preset::Default) => ExperimentConfig::default(),
            (None, Preset::Desk) => desk_preset(),
        };
        for kv in &self.overrides {
            apply_override(&mut cfg, kv)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Sim,
    RealTrain,
    RealTest,
    Rows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    SimToReal,
    RealToSim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitterChoice {
    Lsq,
    Ransac,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a YOLO-format dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value_t = DatasetKind::Sim)]
        kind: DatasetKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check datasets and/or a config without modifying anything.
    Validate {
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a detector on a labeled simulation dataset.
    TrainDetector {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Start from this checkpoint and use the fine-tuning settings.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the translator pair, optionally updating a detector jointly.
    TrainGan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Labeled simulation dataset.
        #[arg(long)]
        sim: PathBuf,
        /// Real-domain images; labels are never read.
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the jointly updated detector.
        #[arg(long)]
        detector_out: Option<PathBuf>,
        /// Step log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Translate a dataset with a trained generator; labels are copied.
    Translate {
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Direction::SimToReal)]
        direction: Direction,
    },
    /// Write detections for every image as JSON lines.
    Detect {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Row offsets and their errors against ground-truth rows.
    Rows {
        #[command(flatten)]
        config: ConfigArgs,
        /// Detector checkpoint; omit with `--oracle`.
        #[arg(long, required_unless_present = "oracle")]
        detector: Option<PathBuf>,
        /// Fit lines to ground-truth boxes instead of detections.
        #[arg(long, conflicts_with = "detector")]
        oracle: bool,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = FitterChoice::Both)]
        fitter: FitterChoice,
        /// Directory for per-frame offset signals.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection metrics on a labeled dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run one arm, or all four, end to end.
    RunArm {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overrides the config's arm.
        #[arg(long, conflicts_with = "all")]
        arm: Option<Arm>,
        #[arg(long)]
        all: bool,
    },
}

fn cfg_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(e.to_string())
}

fn detector_from(path: &Path) -> Result<Detector<f32>> {
    Ok(load_detector(path)?.0)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, kind, out } => {
            let cfg = config.load()?;
            let (synth, style) = match kind {
                DatasetKind::Sim => (cfg.sim_synth(), None),
                DatasetKind::RealTrain => (cfg.real_train_synth(), Some(&cfg.real.style)),
                DatasetKind::RealTest => (cfg.real_test_synth(), Some(&cfg.real.style)),
                DatasetKind::Rows => (cfg.row_synth(), cfg.eval.rows.pseudo_real.then_some(&cfg.real.style)),
            };
            let m = generate_dataset(&synth, style, &out)?;
            println!("{} images written to {} (labels {})", m.len(), out.display(), m.content_hash);
            Ok(())
        }
        Command::Validate { dataset, config } => {
            let mut findings = 0;
            if config.config.is_some() || dataset.is_empty() {
                config.load()?.validate()?;
                println!("config ok");
            }
            for d in dataset {
                let m = load_yolo_dataset(&d)?;
                let report = validate_dataset(&m);
                for f in &report.findings {
                    println!("{f}");
                }
                println!("{}: {} images, {} findings", d.display(), report.images_checked, report.findings.len());
                findings += report.findings.len();
            }
            if findings > 0 {
                return Err(cfg_err(format!("{findings} dataset findings")));
            }
            Ok(())
        }
        Command::TrainDetector { config, dataset, init, out } => {
            let cfg = config.load()?;
            let m = load_yolo_dataset(&dataset)?;
            let audit = AuditLog::new();
            let data = load_labeled(&m, &audit, Purpose::Training)?;
            let (mut det, hyper, stage) = match &init {
                Some(p) => (detector_from(p)?, cfg.finetune_hyper(), Stage::DetectorFinetune),
                None => (Detector::new(cfg.detector, cfg.seed("detector-init")), cfg.pretrain_hyper(), Stage::DetectorPretrain),
            };
            hyper.validate().map_err(cfg_err)?;
            let losses = train_detector_logged(&mut det, &data, &hyper, stage)?;
            save_detector(&out, &det, &hyper, hyper.seed, &m.content_hash)?;
            println!("final loss {:.4}; checkpoint {}", losses.last().map_or(f64::NAN, |l| l.loss), out.display());
            Ok(())
        }
        Command::TrainGan { config, sim, real, detector, out, detector_out, log } => {
            let cfg = config.load()?;
            cfg.gan.weights.validate().map_err(cfg_err)?;
            cfg.gan.schedule.validate().map_err(cfg_err)?;
            let sm = load_yolo_dataset(&sim)?;
            let rm = load_yolo_dataset(&real)?;
            let audit = AuditLog::new();
            let sim_data = load_labeled(&sm, &audit, Purpose::Training)?;
            let reals = load_images(&rm)?;
            let mut det = detector_from(&detector)?;
            let (bundle, steps) = train_gan_stage(&cfg, &sim_data, &reals, &mut det)?;
            save_gan(&out, &bundle, &cfg.gan.schedule, cfg.seed("gan-init"), &sm.content_hash)?;
            if let Some(p) = detector_out {
                save_detector(&p, &det, &cfg.gan.schedule, cfg.seed("gan-train"), &sm.content_hash)?;
            }
            if let Some(p) = log {
                append_jsonl(&p, &steps)?;
            }
            println!("{} steps; checkpoint {}", steps.len(), out.display());
            Ok(())
        }
        Command::Translate { gan, dataset, out, direction } => {
            let (bundle, _) = load_gan(&gan, 1)?;
            let m = load_yolo_dataset(&dataset)?;
            let images = load_images(&m)?;
            let refs: Vec<&RgbImage> = images.iter().collect();
            let gen = match direction {
                Direction::SimToReal => &bundle.g_r,
                Direction::RealToSim => &bundle.g_s,
            };
            let translated = translate_images(gen, &refs).map_err(|source| PipelineError::Core { stage: Stage::Translate, source })?;
            write_translated(&m, &translated, &out)?;
            println!("{} images translated to {}", translated.len(), out.display());
            Ok(())
        }
        Command::Detect { config, detector, dataset, out } => {
            let cfg = config.load()?;
            let det = detector_from(&detector)?;
            let m = load_yolo_dataset(&dataset)?;
            let sets = detect_dataset(&det, &load_images(&m)?, &cfg.eval, false)?;
            #[derive(serde::Serialize)]
            struct Line<'a> {
                frame: &'a str,
                #[serde(flatten)]
                set: &'a dtmars_core::detector::DetectionSet,
            }
            if out.exists() {
                std::fs::remove_file(&out).map_err(|e| PipelineError::io(Stage::Report, &out, e))?;
            }
            let lines: Vec<Line<'_>> = m.entries.iter().zip(&sets).map(|(e, set)| Line { frame: &e.stem, set }).collect();
            append_jsonl(&out, &lines)?;
            println!("{} frames, {} detections", sets.len(), sets.iter().map(|s| s.detections.len()).sum::<usize>());
            Ok(())
        }
        Command::Rows { config, detector, oracle, dataset, fitter, out } => {
            let cfg = config.load()?;
            cfg.eval.ransac.validate().map_err(cfg_err)?;
            let m = load_yolo_dataset(&dataset)?;
            if let Some(e) = m.entries.iter().find(|e| e.row.is_none()) {
                return Err(cfg_err(format!("frame {} of {} has no ground-truth row", e.stem, dataset.display())));
            }
            let sets = if oracle {
                let data = load_labeled(&m, &AuditLog::new(), Purpose::Evaluation)?;
                oracle_detections(&data.into_iter().map(|d| d.boxes).collect::<Vec<_>>())
            } else {
                let det = detector_from(detector.as_deref().expect("clap requires a detector"))?;
                detect_dataset(&det, &load_images(&m)?, &cfg.eval, false)?
            };
            let mut summary = RowSummary { ransac: None, lsq: None, ransac_failed: 0, lsq_failed: 0, frames: m.len() };
            let wanted: &[Fitter] = match fitter {
                FitterChoice::Lsq => &[Fitter::Lsq],
                FitterChoice::Ransac => &[Fitter::Ransac],
                FitterChoice::Both => &[Fitter::Ransac, Fitter::Lsq],
            };
            for &f in wanted {
                let report = row_offsets(&sets, &m, f, &cfg.eval.ransac)?;
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(Stage::Report, dir, e))?;
                    let name = match f {
                        Fitter::Lsq => "offsets_lsq.jsonl",
                        Fitter::Ransac => "offsets_ransac.jsonl",
                    };
                    write_offset_signals(&dir.join(name), &report)?;
                }
                match f {
                    Fitter::Lsq => (summary.lsq, summary.lsq_failed) = (report.metrics, report.n_failed),
                    Fitter::Ransac => (summary.ransac, summary.ransac_failed) = (report.metrics, report.n_failed),
                }
            }
            let name = if oracle { "ground truth" } else { "detector" };
            print!("{}", row_table_rows(&[(name, &summary)]));
            Ok(())
        }
        Command::Eval { config, detector, dataset, json } => {
            let cfg = config.load()?;
            cfg.eval.decode().validate().map_err(cfg_err)?;
            let det = detector_from(&detector)?;
            let m = load_yolo_dataset(&dataset)?;
            let metrics = evaluate_detector(&det, &m, &cfg.eval, &AuditLog::new())?;
            if json {
                println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
            } else {
                print!("{}", detection_table_rows(&[(&detector.display().to_string(), &metrics)]));
            }
            Ok(())
        }
        Command::RunArm { config, arm, all } => {
            let mut cfg = config.load()?;
            if all {
                let cmp = run_comparison(&cfg, &Arm::ALL)?;
                print!("{}\n{}", cmp.detection_table, cmp.row_table);
                println!("reports in {}", cmp.report_dir.display());
            } else {
                if let Some(a) = arm {
                    cfg = cfg.for_arm(a);
                }
                let out = run_arm(&cfg)?;
                print!("{}", crate::report::detection_table(std::slice::from_ref(&out.record)));
                print!("{}", crate::report::row_table(std::slice::from_ref(&out.record)));
                println!("run directory {}", out.run_dir.display());
            }
            Ok(())
        }
    }
}
