//! YOLO-format datasets: generation, manifests, loading and validation.
//!
//! Layout: `images/<stem>.png`, `labels/<stem>.txt` (one `0 cx cy w h` line
//! per object, possibly empty) and `manifest.json`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use dtmars_core::bbox::BBox;
use dtmars_core::pseudoreal::{apply_style, RealStyle};
use dtmars_core::raster::{RgbImage, RgbaImage};
use dtmars_core::rng::{derive_named, derive_seed};
use dtmars_core::rowgeom::offsets;
use dtmars_core::sprites::{procedural_asset, procedural_background, CropAsset, GrowthStage, Species};
use dtmars_core::synth::{compose_row_scene, compose_scene, BackgroundSource, Domain, SynthConfig};
use dtmars_core::IMAGE_SIZE;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result, Stage, StageExt};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Side length of procedural background tiles; scenes crop a random window.
const BACKGROUND_TILE: usize = 320;

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| PipelineError::runtime(Stage::Load, format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::from_raw(w as usize, h as usize, img.into_raw()).stage(Stage::Load)
}

pub fn read_rgba_png(path: &Path) -> Result<RgbaImage> {
    let img = image::open(path)
        .map_err(|e| PipelineError::runtime(Stage::Load, format!("{}: {e}", path.display())))?
        .to_rgba8();
    let (w, h) = img.dimensions();
    RgbaImage::from_raw(w as usize, h as usize, img.into_raw()).stage(Stage::Load)
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer(path, &img.data, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| PipelineError::runtime(Stage::Synth, format!("{}: {e}", path.display())))
}

/// Label file contents; coordinates are written with round-trip precision.
pub fn format_labels(boxes: &[BBox]) -> String {
    boxes.iter().map(|b| format!("0 {} {} {} {}\n", b.cx, b.cy, b.w, b.h)).collect()
}

/// Problem found in a label line or dataset layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub file: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.file.display(), l, self.message),
            None => write!(f, "{}: {}", self.file.display(), self.message),
        }
    }
}

/// Parses label text; errors carry 1-based line numbers.
pub fn parse_labels(text: &str) -> std::result::Result<Vec<BBox>, (usize, String)> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err((n, format!("expected 5 fields, found {}", fields.len())));
        }
        let class: u32 = fields[0].parse().map_err(|_| (n, format!("class `{}` is not a non-negative integer", fields[0])))?;
        if class != 0 {
            return Err((n, format!("class {class} out of range (single class 0)")));
        }
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| (n, format!("`{f}` is not a number")))?;
            if !(0.0..=1.0).contains(&v[k]) {
                return Err((n, format!("value {} out of range [0,1]", v[k])));
            }
        }
        let b = BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| (n, e.to_string()))?;
        boxes.push(b);
    }
    Ok(boxes)
}

/// Ground-truth crop row of a row scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowGt {
    pub angle_deg: f64,
    /// Signed offset of the row's mid-row crossing from the image center, px.
    pub offset_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub seed: u64,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<RowGt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub domain: Domain,
    pub master_seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 over every label file, in entry order.
    pub content_hash: String,
    /// SHA-256 over every image file, in entry order.
    pub image_hash: String,
    /// Generator settings, when the dataset was synthesized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<RealStyle>,
}

impl DatasetManifest {
    pub fn image_path(&self, stem: &str) -> PathBuf {
        self.root.join("images").join(format!("{stem}.png"))
    }

    pub fn label_path(&self, stem: &str) -> PathBuf {
        self.root.join("labels").join(format!("{stem}.txt"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| PipelineError::io(Stage::Synth, path, e))
    }

    /// Recomputes both hashes from the files on disk.
    pub fn rehash(&mut self) -> Result<()> {
        let mut labels = Sha256::new();
        let mut images = Sha256::new();
        for e in &self.entries {
            labels.update(e.stem.as_bytes());
            labels.update([0]);
            let lp = self.label_path(&e.stem);
            if lp.is_file() {
                labels.update(fs::read(&lp).map_err(|err| PipelineError::io(Stage::Load, lp, err))?);
            }
            labels.update([0]);
            let ip = self.image_path(&e.stem);
            images.update(fs::read(&ip).map_err(|err| PipelineError::io(Stage::Load, ip, err))?);
        }
        self.content_hash = hex::encode(labels.finalize());
        self.image_hash = hex::encode(images.finalize());
        Ok(())
    }
}

/// Why labels are being read; training must never read real-domain labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Training,
    Evaluation,
    Validation,
    Translation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub path: PathBuf,
    pub domain: Domain,
    pub purpose: Purpose,
}

/// Record of every label file opened through [`load_labeled`].
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    events: Arc<Mutex<Vec<AuditEvent>>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, event: AuditEvent) {
        self.events.lock().expect("audit log lock").push(event);
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().expect("audit log lock").clone()
    }

    /// Label reads that would break the zero-shot guarantee.
    pub fn violations(&self) -> Vec<AuditEvent> {
        self.events().into_iter().filter(|e| e.domain == Domain::Real && e.purpose == Purpose::Training).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in self.events() {
            out.push_str(&serde_json::to_string(&e).expect("audit event serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| PipelineError::io(Stage::Report, path, e))
    }
}

/// An image with its boxes, loaded from disk.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub stem: String,
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
}

/// Loads images and labels. Refuses real-domain labels for training.
pub fn load_labeled(manifest: &DatasetManifest, audit: &AuditLog, purpose: Purpose) -> Result<Vec<LabeledImage>> {
    if manifest.domain == Domain::Real && purpose == Purpose::Training {
        return Err(PipelineError::Validation(format!(
            "refusing to read real-domain labels of {} for training",
            manifest.root.display()
        )));
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let lp = manifest.label_path(&e.stem);
            audit.record(AuditEvent { path: lp.clone(), domain: e.domain, purpose });
            let text = fs::read_to_string(&lp).map_err(|err| PipelineError::io(Stage::Load, &lp, err))?;
            let boxes = parse_labels(&text)
                .map_err(|(line, msg)| PipelineError::Validation(format!("{}:{line}: {msg}", lp.display())))?;
            Ok(LabeledImage { stem: e.stem.clone(), image: read_png(&manifest.image_path(&e.stem))?, boxes })
        })
        .collect()
}

/// Loads images only; label files are not touched.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<RgbImage>> {
    manifest.entries.iter().map(|e| read_png(&manifest.image_path(&e.stem))).collect()
}

/// Opens a dataset directory. Without a manifest, entries are taken from
/// `images/*.png` in name order and the domain is assumed to be `sim`.
pub fn load_yolo_dataset(path: &Path) -> Result<DatasetManifest> {
    let mp = path.join(MANIFEST_FILE);
    if mp.is_file() {
        let text = fs::read_to_string(&mp).map_err(|e| PipelineError::io(Stage::Load, &mp, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", mp.display())))?;
        m.root = path.to_path_buf();
        return Ok(m);
    }
    let dir = path.join("images");
    let mut stems: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| PipelineError::io(Stage::Load, &dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().and_then(|x| x.to_str()) == Some("png")).then(|| p.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    stems.sort();
    let mut m = DatasetManifest {
        root: path.to_path_buf(),
        domain: Domain::Sim,
        master_seed: 0,
        entries: stems.into_iter().map(|stem| ManifestEntry { stem, seed: 0, domain: Domain::Sim, row: None }).collect(),
        content_hash: String::new(),
        image_hash: String::new(),
        synth: None,
        style: None,
    };
    m.rehash()?;
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    pub images_checked: usize,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Read-only consistency check of a dataset against its manifest.
pub fn validate_dataset(manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |file: PathBuf, line: Option<usize>, message: String| report.findings.push(Finding { file, line, message });
    for e in &manifest.entries {
        let ip = manifest.image_path(&e.stem);
        let lp = manifest.label_path(&e.stem);
        match image::image_dimensions(&ip) {
            Ok((w, h)) if (w as usize, h as usize) != (IMAGE_SIZE, IMAGE_SIZE) => {
                push(ip.clone(), None, format!("image is {w}x{h}, expected {IMAGE_SIZE}x{IMAGE_SIZE}"))
            }
            Ok(_) => {}
            Err(err) => push(ip.clone(), None, format!("missing or unreadable image: {err}")),
        }
        match fs::read_to_string(&lp) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if let Err((_, msg)) = parse_labels(line) {
                        push(lp.clone(), Some(i + 1), msg);
                    }
                }
            }
            Err(_) => push(lp.clone(), None, "missing label file for image".into()),
        }
    }
    let known: std::collections::HashSet<&str> = manifest.entries.iter().map(|e| e.stem.as_str()).collect();
    if let Ok(dir) = fs::read_dir(manifest.root.join("labels")) {
        let mut orphans: Vec<PathBuf> = dir
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("txt"))
            .filter(|p| p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| !known.contains(s)))
            .collect();
        orphans.sort();
        for p in orphans {
            push(p, None, "label file without image".into());
        }
    }
    report.images_checked = manifest.entries.len();
    report
}

/// Crop assets selected by `cfg`, procedural or loaded from disk.
pub fn build_assets(cfg: &SynthConfig) -> Result<Vec<CropAsset>> {
    let sel = &cfg.assets;
    let mut assets = Vec::new();
    if let Some(dir) = &sel.directory {
        let dir = Path::new(dir);
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| PipelineError::io(Stage::Synth, dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("png"))
            .collect();
        files.sort();
        for p in files {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mut parts = stem.splitn(3, "__");
            let (Some(sp), Some(st)) = (parts.next(), parts.next()) else {
                return Err(PipelineError::Validation(format!("{}: expected <species>__<stage>__<id>.png", p.display())));
            };
            let species = Species::ALL.into_iter().find(|s| s.as_str() == sp);
            let stage = GrowthStage::ALL.into_iter().find(|s| s.as_str() == st);
            let (Some(species), Some(stage)) = (species, stage) else {
                return Err(PipelineError::Validation(format!("{}: unknown species or growth stage", p.display())));
            };
            let asset = CropAsset::new(stem.clone(), species, stage, read_rgba_png(&p)?)
                .map_err(|e| PipelineError::Validation(format!("{}: {e}", p.display())))?;
            if sel.accepts(&asset) {
                assets.push(asset);
            }
        }
    } else {
        let seed = derive_named(cfg.master_seed, "assets");
        for &species in &sel.species {
            for &stage in &sel.stages {
                for v in 0..sel.variants {
                    assets.push(procedural_asset(species, stage, v, seed));
                }
            }
        }
    }
    if assets.is_empty() {
        return Err(PipelineError::Validation("asset selection is empty".into()));
    }
    Ok(assets)
}

pub fn build_backgrounds(cfg: &SynthConfig) -> Result<Vec<RgbImage>> {
    match &cfg.backgrounds {
        BackgroundSource::Procedural { count } => {
            let seed = derive_named(cfg.master_seed, "backgrounds");
            Ok((0..*count).map(|v| procedural_background(BACKGROUND_TILE, BACKGROUND_TILE, v, seed)).collect())
        }
        BackgroundSource::Directory { path } => {
            let dir = Path::new(path);
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| PipelineError::io(Stage::Synth, dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("png" | "jpg" | "jpeg")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(PipelineError::Validation(format!("no background images in {}", dir.display())));
            }
            files.iter().map(|p| read_png(p)).collect()
        }
    }
}

/// Renders one scene of a dataset; `index` selects the per-image seed.
pub fn render_entry(
    cfg: &SynthConfig,
    style: Option<&RealStyle>,
    assets: &[CropAsset],
    backgrounds: &[RgbImage],
    index: usize,
) -> Result<(RgbImage, Vec<BBox>, u64, Option<RowGt>)> {
    let seed = derive_seed(cfg.master_seed, index as u64);
    let bg = &backgrounds[(derive_named(seed, "background") % backgrounds.len() as u64) as usize];
    let (mut pixels, boxes, row) = if cfg.row_mode {
        let (img, line) = compose_row_scene(bg, assets, cfg, seed).stage(Stage::Synth)?;
        let o = offsets(&line, (IMAGE_SIZE, IMAGE_SIZE));
        (img.pixels, img.boxes, Some(RowGt { angle_deg: o.theta_deg, offset_px: o.l_px }))
    } else {
        let img = compose_scene(bg, assets, cfg, seed).stage(Stage::Synth)?;
        (img.pixels, img.boxes, None)
    };
    if let Some(style) = style {
        pixels = apply_style(&pixels, style, derive_named(seed, "style"));
    }
    Ok((pixels, boxes, seed, row))
}

/// Writes a complete dataset. With `style`, images get the pseudo-real look
/// and the dataset is tagged as real-domain.
pub fn generate_dataset(cfg: &SynthConfig, style: Option<&RealStyle>, out: &Path) -> Result<DatasetManifest> {
    cfg.validate().map_err(|e| PipelineError::Validation(format!("synth: {e}")))?;
    let domain = if style.is_some() { Domain::Real } else { Domain::Sim };
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| PipelineError::io(Stage::Synth, d, e))?;
    }
    let assets = build_assets(cfg)?;
    let backgrounds = build_backgrounds(cfg)?;
    let mut manifest = DatasetManifest {
        root: out.to_path_buf(),
        domain,
        master_seed: cfg.master_seed,
        entries: Vec::with_capacity(cfg.n_images),
        content_hash: String::new(),
        image_hash: String::new(),
        synth: Some(cfg.clone()),
        style: style.copied(),
    };
    for i in 0..cfg.n_images {
        let (pixels, boxes, seed, row) = render_entry(cfg, style, &assets, &backgrounds, i)?;
        let stem = format!("{}_{i:05}", domain.as_str());
        write_png(&manifest.image_path(&stem), &pixels)?;
        let lp = manifest.label_path(&stem);
        let mut f = fs::File::create(&lp).map_err(|e| PipelineError::io(Stage::Synth, &lp, e))?;
        f.write_all(format_labels(&boxes).as_bytes()).map_err(|e| PipelineError::io(Stage::Synth, &lp, e))?;
        manifest.entries.push(ManifestEntry { stem, seed, domain, row });
    }
    manifest.rehash()?;
    manifest.save()?;
    Ok(manifest)
}

/// Writes `images` as a new dataset whose labels are byte copies of `source`'s.
pub fn write_translated(source: &DatasetManifest, images: &[RgbImage], out: &Path) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| PipelineError::io(Stage::Translate, d, e))?;
    }
    let mut m = DatasetManifest { root: out.to_path_buf(), ..source.clone() };
    for (e, img) in source.entries.iter().zip(images) {
        write_png(&m.image_path(&e.stem), img)?;
        let (src, dst) = (source.label_path(&e.stem), m.label_path(&e.stem));
        if src.is_file() {
            fs::copy(&src, &dst).map_err(|err| PipelineError::io(Stage::Translate, &dst, err))?;
        }
    }
    m.rehash()?;
    m.save()?;
    Ok(m)
}
