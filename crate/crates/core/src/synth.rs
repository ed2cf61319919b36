//! Annotated synthetic crop scenes.
//!
//! Crop sprites are rotated, scaled and alpha-composited onto a field
//! background. Each recorded box is the tight extent of the placed sprite's
//! opaque pixels, so annotations are exact by construction.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::raster::{blend, transform_sprite, RgbImage, RgbaImage};
use crate::rng::rng_from;
use crate::rowgeom::RowLine;
use crate::sprites::{CropAsset, GrowthStage, Species};
use crate::{Error, Result, IMAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Sim,
    Real,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Sim => "sim",
            Domain::Real => "real",
        }
    }
}

/// An image with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub pixels: RgbImage,
    pub boxes: Vec<BBox>,
    pub domain: Domain,
    pub seed: u64,
}

/// Where background rasters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundSource {
    /// `count` procedural soil textures.
    Procedural { count: u32 },
    /// Every image file in a directory.
    Directory { path: String },
}

/// Which crop assets a dataset draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSelector {
    pub species: Vec<Species>,
    pub stages: Vec<GrowthStage>,
    /// Procedural variants per `(species, stage)` pair.
    pub variants: u32,
    /// Optional directory of RGBA sprites named `<species>__<stage>__<id>.png`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<String>,
}

impl Default for AssetSelector {
    fn default() -> Self {
        Self {
            species: alloc::vec![Species::SugarBeet, Species::Polygonum, Species::Cirsium],
            stages: alloc::vec![GrowthStage::Seedling, GrowthStage::WellGrown],
            variants: 8,
            directory: None,
        }
    }
}

impl AssetSelector {
    pub fn accepts(&self, asset: &CropAsset) -> bool {
        self.species.contains(&asset.species) && self.stages.contains(&asset.growth_stage)
    }
}

/// Geometry of generated crop rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    /// Row angle from image-vertical, degrees.
    pub angle_deg: (f64, f64),
    /// Signed horizontal offset of the row's mid-row crossing from the image center, px.
    pub offset_px: (f64, f64),
    /// Maximum perpendicular distance of a crop center from the row line, px.
    pub jitter_px: f64,
}

impl Default for RowSpec {
    fn default() -> Self {
        Self { angle_deg: (-15.0, 15.0), offset_px: (-30.0, 30.0), jitter_px: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub backgrounds: BackgroundSource,
    pub assets: AssetSelector,
    pub n_images: usize,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    pub scale_jitter: (f64, f64),
    pub rotation: (f64, f64),
    pub overlap_max_iou: f64,
    pub attempt_budget: usize,
    pub row_mode: bool,
    pub row: RowSpec,
    pub master_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            backgrounds: BackgroundSource::Procedural { count: 24 },
            assets: AssetSelector::default(),
            n_images: 100,
            objects_per_image: (1, 6),
            scale_jitter: (0.8, 1.2),
            rotation: (0.0, 360.0),
            overlap_max_iou: 0.1,
            attempt_budget: 100,
            row_mode: false,
            row: RowSpec::default(),
            master_seed: 0,
        }
    }
}

fn ordered(name: &str, r: (f64, f64)) -> Result<()> {
    if !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1) {
        return Err(Error::Config(alloc::format!("{name} range {:?} must be finite and ordered", r)));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be at least 1".into()));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi || hi == 0 {
            return Err(Error::Config(alloc::format!("objects_per_image {:?} must be non-empty and ordered", (lo, hi))));
        }
        ordered("scale_jitter", self.scale_jitter)?;
        if self.scale_jitter.0 <= 0.0 {
            return Err(Error::Config("scale_jitter must be positive".into()));
        }
        ordered("rotation", self.rotation)?;
        if !(0.0..1.0).contains(&self.overlap_max_iou) {
            return Err(Error::Config(alloc::format!("overlap_max_iou {} not in [0,1)", self.overlap_max_iou)));
        }
        if self.attempt_budget == 0 {
            return Err(Error::Config("attempt_budget must be positive".into()));
        }
        if self.assets.species.is_empty() || self.assets.stages.is_empty() {
            return Err(Error::Config("asset selector matches nothing".into()));
        }
        if let BackgroundSource::Procedural { count: 0 } = self.backgrounds {
            return Err(Error::Config("procedural background count must be positive".into()));
        }
        if self.row_mode {
            if lo < 3 {
                return Err(Error::Config("row scenes need at least 3 objects per image".into()));
            }
            ordered("row.angle_deg", self.row.angle_deg)?;
            ordered("row.offset_px", self.row.offset_px)?;
            if self.row.angle_deg.0 <= -90.0 || self.row.angle_deg.1 >= 90.0 {
                return Err(Error::Config("row angles must lie strictly within (-90, 90)".into()));
            }
            if !(self.row.jitter_px >= 0.0) {
                return Err(Error::Config("row.jitter_px must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// How one asset ended up in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub asset_index: usize,
    pub angle_deg: f64,
    pub scale: f64,
    /// Top-left corner of the transformed sprite in the output frame.
    pub x: f64,
    pub y: f64,
    /// The transformed, tightly cropped sprite that was composited.
    pub sprite: RgbaImage,
}

impl Placement {
    pub fn bbox(&self) -> BBox {
        BBox::from_corners_px(
            self.x,
            self.y,
            self.x + self.sprite.width as f64,
            self.y + self.sprite.height as f64,
            IMAGE_SIZE,
            IMAGE_SIZE,
        )
    }
}

fn sample_range(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.gen_range(r.0..r.1)
    }
}

fn background_window(background: &RgbImage, rng: &mut impl Rng) -> Result<RgbImage> {
    if background.width < IMAGE_SIZE || background.height < IMAGE_SIZE {
        return Err(Error::Shape(alloc::format!(
            "background {}x{} smaller than {IMAGE_SIZE}x{IMAGE_SIZE}",
            background.width, background.height
        )));
    }
    let x0 = rng.gen_range(0..=background.width - IMAGE_SIZE);
    let y0 = rng.gen_range(0..=background.height - IMAGE_SIZE);
    background.crop(x0, y0, IMAGE_SIZE, IMAGE_SIZE)
}

fn sample_sprite(
    assets: &[CropAsset],
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<(usize, f64, f64, RgbaImage)> {
    let idx = rng.gen_range(0..assets.len());
    let scale = sample_range(rng, cfg.scale_jitter);
    let angle = sample_range(rng, cfg.rotation);
    let sprite = transform_sprite(&assets[idx].image, angle, scale)?;
    Ok((idx, angle, scale, sprite))
}

fn overlaps(b: &BBox, placed: &[Placement], max_iou: f64) -> bool {
    placed.iter().any(|p| iou(b, &p.bbox()) > max_iou)
}

/// [`compose_scene`] plus the placement record of every object.
pub fn compose_scene_detailed(
    background: &RgbImage,
    assets: &[CropAsset],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(AnnotatedImage, Vec<Placement>)> {
    if assets.is_empty() {
        return Err(Error::Config("asset list is empty".into()));
    }
    let mut rng = rng_from(seed);
    let mut pixels = background_window(background, &mut rng)?;
    let n = rng.gen_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
    let mut placed: Vec<Placement> = Vec::with_capacity(n);
    for object in 0..n {
        let mut sprite = sample_sprite(assets, cfg, &mut rng)?;
        let mut done = false;
        for attempt in 0..cfg.attempt_budget {
            let (idx, angle, scale, ref img) = sprite;
            if img.width > IMAGE_SIZE || img.height > IMAGE_SIZE {
                if attempt + 1 < cfg.attempt_budget {
                    sprite = sample_sprite(assets, cfg, &mut rng)?;
                }
                continue;
            }
            let x = rng.gen_range(0..=IMAGE_SIZE - img.width) as f64;
            let y = rng.gen_range(0..=IMAGE_SIZE - img.height) as f64;
            let p = Placement { asset_index: idx, angle_deg: angle, scale, x, y, sprite: img.clone() };
            if overlaps(&p.bbox(), &placed, cfg.overlap_max_iou) {
                continue;
            }
            placed.push(p);
            done = true;
            break;
        }
        if !done {
            return Err(Error::Placement { object, attempts: cfg.attempt_budget });
        }
    }
    for p in &placed {
        blend(&mut pixels, &p.sprite, p.x, p.y);
    }
    let boxes = placed.iter().map(Placement::bbox).collect();
    Ok((AnnotatedImage { pixels, boxes, domain: Domain::Sim, seed }, placed))
}

/// Composites a random number of crops onto a 224x224 window of `background`.
///
/// Identical `(background, assets, cfg, seed)` give bit-identical output.
pub fn compose_scene(background: &RgbImage, assets: &[CropAsset], cfg: &SynthConfig, seed: u64) -> Result<AnnotatedImage> {
    compose_scene_detailed(background, assets, cfg, seed).map(|(img, _)| img)
}

/// [`compose_row_scene`] plus placement records.
pub fn compose_row_scene_detailed(
    background: &RgbImage,
    assets: &[CropAsset],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(AnnotatedImage, RowLine, Vec<Placement>)> {
    if !cfg.row_mode {
        return Err(Error::Config("row scenes need row_mode enabled".into()));
    }
    if cfg.objects_per_image.0 < 3 {
        return Err(Error::Config("row scenes need at least 3 objects per image".into()));
    }
    if assets.is_empty() {
        return Err(Error::Config("asset list is empty".into()));
    }
    let mut rng = rng_from(seed);
    let mut pixels = background_window(background, &mut rng)?;
    let size = IMAGE_SIZE as f64;
    let theta = sample_range(&mut rng, cfg.row.angle_deg);
    let x_mid = size * 0.5 + sample_range(&mut rng, cfg.row.offset_px);
    let line = RowLine { theta_deg: theta, x_at_mid: x_mid };
    let (sin, cos) = Float::sin_cos(theta.to_radians());
    let n = rng.gen_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
    let mut placed: Vec<Placement> = Vec::with_capacity(n);
    for object in 0..n {
        let y_on_line = size * (object as f64 + 0.5) / n as f64;
        let base_x = line.x_at(y_on_line, IMAGE_SIZE);
        let mut done = false;
        for _ in 0..cfg.attempt_budget {
            let (idx, angle, scale, img) = sample_sprite(assets, cfg, &mut rng)?;
            let d = if cfg.row.jitter_px > 0.0 { rng.gen_range(-cfg.row.jitter_px..=cfg.row.jitter_px) } else { 0.0 };
            // Unit normal to the row direction (sin, cos).
            let (cx, cy) = (base_x + d * cos, y_on_line - d * sin);
            let (w, h) = (img.width as f64, img.height as f64);
            let (x, y) = (cx - w * 0.5, cy - h * 0.5);
            if x < 0.0 || y < 0.0 || x + w > size || y + h > size {
                continue;
            }
            let p = Placement { asset_index: idx, angle_deg: angle, scale, x, y, sprite: img };
            if overlaps(&p.bbox(), &placed, cfg.overlap_max_iou) {
                continue;
            }
            placed.push(p);
            done = true;
            break;
        }
        if !done {
            return Err(Error::Placement { object, attempts: cfg.attempt_budget });
        }
    }
    for p in &placed {
        blend(&mut pixels, &p.sprite, p.x, p.y);
    }
    let boxes = placed.iter().map(Placement::bbox).collect();
    Ok((AnnotatedImage { pixels, boxes, domain: Domain::Sim, seed }, line, placed))
}

/// Composites crops along a single row line; returns the generating line.
///
/// Crops sit at evenly spaced heights with their box centers displaced from
/// the line by at most `row.jitter_px` along its normal. Sprites are placed
/// at subpixel offsets so centers land exactly where sampled.
pub fn compose_row_scene(
    background: &RgbImage,
    assets: &[CropAsset],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(AnnotatedImage, RowLine)> {
    compose_row_scene_detailed(background, assets, cfg, seed).map(|(a, l, _)| (a, l))
}
