//! Experiment configuration (TOML).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dtmars_core::detector::{DecodeParams, DetectorConfig, OptimizerKind, TrainHyper};
use dtmars_core::gan::{DiscriminatorConfig, GanSchedule, GeneratorConfig, LossWeights};
use dtmars_core::pseudoreal::RealStyle;
use dtmars_core::rng::derive_named;
use dtmars_core::rowgeom::RansacParams;
use dtmars_core::synth::{RowSpec, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// The four transfer methods being compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    SimOnly,
    Cyclegan,
    RetinaStyle,
    DtMars,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::SimOnly, Arm::Cyclegan, Arm::RetinaStyle, Arm::DtMars];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::SimOnly => "sim_only",
            Arm::Cyclegan => "cyclegan",
            Arm::RetinaStyle => "retina_style",
            Arm::DtMars => "dt_mars",
        }
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Arm::SimOnly => "Sim-Only",
            Arm::Cyclegan => "CycleGAN",
            Arm::RetinaStyle => "RetinaGAN-style",
            Arm::DtMars => "DT/MARS-CycleGAN",
        }
    }

    pub fn uses_gan(self) -> bool {
        self != Arm::SimOnly
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown arm `{s}` (expected sim_only, cyclegan, retina_style or dt_mars)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Root for generated datasets, caches and run directories.
    pub work_dir: PathBuf,
    /// Existing datasets to use instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sim_dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub real_dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_dataset: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { work_dir: PathBuf::from("work"), sim_dataset: None, real_dataset: None, test_dataset: None, row_dataset: None }
    }
}

/// Pseudo-real target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealDomainConfig {
    /// Unlabeled images used for translator training.
    pub n_train: usize,
    /// Labeled held-out images used for evaluation only.
    pub n_test: usize,
    pub style: RealStyle,
}

impl Default for RealDomainConfig {
    fn default() -> Self {
        Self { n_train: 2400, n_test: 408, style: RealStyle::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub weights: LossWeights,
    pub schedule: GanSchedule,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            schedule: GanSchedule::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RowEvalConfig {
    /// Row scenes generated for the row-offset evaluation.
    pub n_images: usize,
    pub objects_per_image: (usize, usize),
    /// Off-line displacement of crop centers, px. Zero makes the generating
    /// line exactly recoverable from ground-truth boxes.
    pub jitter_px: f64,
    /// Render row scenes in the pseudo-real style.
    pub pseudo_real: bool,
}

impl Default for RowEvalConfig {
    fn default() -> Self {
        Self { n_images: 50, objects_per_image: (3, 6), jitter_px: 0.0, pseudo_real: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub ransac: RansacParams,
    pub rows: RowEvalConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = DecodeParams::default();
        Self {
            conf_thresh: d.conf_thresh,
            nms_iou: d.nms_iou,
            max_detections: d.max_detections,
            ransac: RansacParams::default(),
            rows: RowEvalConfig::default(),
        }
    }
}

impl EvalConfig {
    /// Decoding used for metrics: every candidate above a near-zero floor,
    /// so AP sees the full confidence range.
    pub fn decode_for_ap(&self) -> DecodeParams {
        DecodeParams { conf_thresh: 1e-3, nms_iou: self.nms_iou, max_detections: self.max_detections }
    }

    /// Decoding at the operating threshold.
    pub fn decode(&self) -> DecodeParams {
        DecodeParams { conf_thresh: self.conf_thresh, nms_iou: self.nms_iou, max_detections: self.max_detections }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub arm: Arm,
    /// Root of every derived seed in the experiment.
    pub master_seed: u64,
    pub paths: Paths,
    /// Simulation training set. Its own `master_seed` is replaced by one
    /// derived from the experiment seed.
    pub synth: SynthConfig,
    pub real: RealDomainConfig,
    pub detector: DetectorConfig,
    /// Detector pretraining on raw simulation data.
    pub detector_hyper: TrainHyper,
    /// Detector fine-tuning on translated simulation data (GAN arms).
    pub finetune: TrainHyper,
    pub gan: GanConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            arm: Arm::DtMars,
            master_seed: 0,
            paths: Paths::default(),
            synth: SynthConfig { n_images: 2400, ..SynthConfig::default() },
            real: RealDomainConfig::default(),
            detector: DetectorConfig::default(),
            detector_hyper: TrainHyper::default(),
            finetune: TrainHyper { epochs: 20, learning_rate: 2e-3, ..TrainHyper::default() },
            gan: GanConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Validation(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Copy configured for `arm`: the detector weight and update period are
    /// set to what the arm means, everything else is kept.
    pub fn for_arm(&self, arm: Arm) -> Self {
        let mut c = self.clone();
        c.arm = arm;
        let lambda_det = if self.gan.weights.lambda_detector > 0.0 {
            self.gan.weights.lambda_detector
        } else {
            LossWeights::default().lambda_detector
        };
        let period = self.gan.schedule.detector_period.max(1);
        match arm {
            Arm::SimOnly => {}
            Arm::Cyclegan => {
                c.gan.weights.lambda_detector = 0.0;
                c.gan.schedule.detector_period = 0;
            }
            Arm::RetinaStyle => {
                c.gan.weights.lambda_detector = lambda_det;
                c.gan.schedule.detector_period = 0;
            }
            Arm::DtMars => {
                c.gan.weights.lambda_detector = lambda_det;
                c.gan.schedule.detector_period = period;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let core = |r: dtmars_core::Result<()>, what: &str| r.map_err(|e| invalid(format!("{what}: {e}")));
        if self.paths.sim_dataset.is_none() {
            core(self.synth.validate(), "synth")?;
        }
        core(self.detector_hyper.validate(), "detector_hyper")?;
        core(self.finetune.validate(), "finetune")?;
        core(self.eval.ransac.validate(), "eval.ransac")?;
        core(self.eval.decode().validate(), "eval")?;
        core(self.real.style.validate(), "real.style")?;
        if self.detector.widths.iter().any(|w| *w == 0) {
            return Err(invalid("detector widths must be positive"));
        }
        if self.paths.test_dataset.is_none() && self.real.n_test == 0 {
            return Err(invalid("evaluation needs real.n_test >= 1 or paths.test_dataset"));
        }
        for (name, p) in [
            ("sim_dataset", &self.paths.sim_dataset),
            ("real_dataset", &self.paths.real_dataset),
            ("test_dataset", &self.paths.test_dataset),
            ("row_dataset", &self.paths.row_dataset),
        ] {
            if let Some(p) = p {
                if !p.join("manifest.json").is_file() && !p.join("images").is_dir() {
                    return Err(invalid(format!("paths.{name} {} is not a dataset directory", p.display())));
                }
            }
        }
        let w = &self.gan.weights;
        let s = &self.gan.schedule;
        match self.arm {
            Arm::SimOnly => {}
            arm => {
                core(w.validate(), "gan.weights")?;
                core(s.validate(), "gan.schedule")?;
                if self.paths.real_dataset.is_none() && self.real.n_train == 0 {
                    return Err(invalid(format!("arm {arm} needs unlabeled real images (real.n_train or paths.real_dataset)")));
                }
                match arm {
                    Arm::Cyclegan if w.lambda_detector != 0.0 || s.detector_period != 0 => {
                        return Err(invalid("arm cyclegan requires lambda_detector = 0 and detector_period = 0"));
                    }
                    Arm::RetinaStyle if w.lambda_detector <= 0.0 || s.detector_period != 0 => {
                        return Err(invalid("arm retina_style requires lambda_detector > 0 and detector_period = 0"));
                    }
                    Arm::DtMars if w.lambda_detector <= 0.0 || s.detector_period == 0 => {
                        return Err(invalid("arm dt_mars requires lambda_detector > 0 and detector_period >= 1"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Effective seed of a named sub-stream of this experiment.
    pub fn seed(&self, stream: &str) -> u64 {
        derive_named(self.master_seed, stream)
    }

    pub fn sim_synth(&self) -> SynthConfig {
        SynthConfig { master_seed: self.seed("sim"), ..self.synth.clone() }
    }

    pub fn real_train_synth(&self) -> SynthConfig {
        SynthConfig { n_images: self.real.n_train, master_seed: self.seed("real-train"), ..self.synth.clone() }
    }

    pub fn real_test_synth(&self) -> SynthConfig {
        SynthConfig { n_images: self.real.n_test, master_seed: self.seed("real-test"), ..self.synth.clone() }
    }

    pub fn row_synth(&self) -> SynthConfig {
        SynthConfig {
            n_images: self.eval.rows.n_images,
            objects_per_image: self.eval.rows.objects_per_image,
            row_mode: true,
            row: RowSpec { jitter_px: self.eval.rows.jitter_px, ..self.synth.row.clone() },
            master_seed: self.seed("rows"),
            ..self.synth.clone()
        }
    }

    pub fn pretrain_hyper(&self) -> TrainHyper {
        TrainHyper { seed: self.seed("pretrain"), ..self.detector_hyper }
    }

    pub fn finetune_hyper(&self) -> TrainHyper {
        TrainHyper { seed: self.seed("finetune"), ..self.finetune }
    }
}

/// Scalar overrides accepted on the command line as `key=value`.
pub fn apply_override(cfg: &mut ExperimentConfig, kv: &str) -> Result<()> {
    let (key, value) = kv.split_once('=').ok_or_else(|| invalid(format!("override `{kv}` is not key=value")))?;
    let mut doc: toml::Value = toml::Value::try_from(&*cfg).map_err(|e| invalid(e.to_string()))?;
    let mut slot = &mut doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts {
        slot = slot
            .get_mut(*part)
            .ok_or_else(|| invalid(format!("unknown config key `{key}`")))?;
    }
    let parsed: toml::Value = match slot {
        toml::Value::String(_) => toml::Value::String(value.to_string()),
        _ => {
            let wrapped = format!("v = {value}");
            let t: toml::Table = wrapped.parse().map_err(|e| invalid(format!("override `{kv}`: {e}")))?;
            t["v"].clone()
        }
    };
    if std::mem::discriminant(slot) != std::mem::discriminant(&parsed)
        && !matches!((&*slot, &parsed), (toml::Value::Float(_), toml::Value::Integer(_)))
    {
        return Err(invalid(format!("override `{kv}` has the wrong type")));
    }
    *slot = match (&*slot, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    *cfg = doc.try_into().map_err(|e: toml::de::Error| invalid(format!("override `{kv}`: {e}")))?;
    Ok(())
}

/// Settings that keep each training stage well under a minute per arm on
/// one CPU core; useful for smoke runs.
pub fn desk_preset() -> ExperimentConfig {
    ExperimentConfig {
        name: "desk".into(),
        synth: SynthConfig { n_images: 300, ..SynthConfig::default() },
        real: RealDomainConfig { n_train: 300, n_test: 100, style: RealStyle::default() },
        detector_hyper: TrainHyper { epochs: 40, batch_size: 16, optimizer: OptimizerKind::Sgd, ..TrainHyper::default() },
        finetune: TrainHyper { epochs: 15, batch_size: 16, learning_rate: 2e-3, ..TrainHyper::default() },
        gan: GanConfig {
            schedule: GanSchedule { epochs: 8, decay_start: 4, ..GanSchedule::default() },
            generator: GeneratorConfig { res_blocks: 1, context_width: 12, color_hidden: 8, ..GeneratorConfig::default() },
            ..GanConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_presets_validate() {
        let base = ExperimentConfig::default();
        for arm in Arm::ALL {
            base.for_arm(arm).validate().unwrap();
        }
    }

    #[test]
    fn inconsistent_arm_rejected() {
        let mut c = ExperimentConfig::default().for_arm(Arm::Cyclegan);
        c.gan.weights.lambda_detector = 10.0;
        assert!(matches!(c.validate(), Err(PipelineError::Validation(_))));
        let mut c = ExperimentConfig::default().for_arm(Arm::DtMars);
        c.gan.schedule.detector_period = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn arm_parse() {
        assert_eq!("retina_style".parse::<Arm>().unwrap(), Arm::RetinaStyle);
        assert!("yolo".parse::<Arm>().is_err());
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        apply_override(&mut c, "gan.weights.lambda_cyc=7").unwrap();
        apply_override(&mut c, "arm=cyclegan").unwrap();
        apply_override(&mut c, "synth.n_images=12").unwrap();
        assert_eq!(c.gan.weights.lambda_cyc, 7.0);
        assert_eq!(c.arm, Arm::Cyclegan);
        assert_eq!(c.synth.n_images, 12);
        assert!(apply_override(&mut c, "nope=1").is_err());
        assert!(apply_override(&mut c, "synth.n_images=abc").is_err());
    }
}
