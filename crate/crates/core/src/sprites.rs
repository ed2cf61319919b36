//! Crop assets and field backgrounds.
//!
//! Assets can be loaded from disk by the `dtmars` crate; when none are
//! supplied, the procedural generators here draw leaf rosettes per species
//! and growth stage, and textured soil backgrounds.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{round_u8, RgbImage, RgbaImage};
use crate::rng::{derive_seed, rng_from};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    SugarBeet,
    Polygonum,
    Cirsium,
    Other,
}

impl Species {
    pub const ALL: [Species; 4] = [Species::SugarBeet, Species::Polygonum, Species::Cirsium, Species::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Species::SugarBeet => "sugar_beet",
            Species::Polygonum => "polygonum",
            Species::Cirsium => "cirsium",
            Species::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthStage {
    Seedling,
    WellGrown,
}

impl GrowthStage {
    pub const ALL: [GrowthStage; 2] = [GrowthStage::Seedling, GrowthStage::WellGrown];

    pub fn as_str(self) -> &'static str {
        match self {
            GrowthStage::Seedling => "seedling",
            GrowthStage::WellGrown => "well_grown",
        }
    }
}

/// A crop sprite with a tight transparency mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CropAsset {
    pub id: String,
    pub species: Species,
    pub growth_stage: GrowthStage,
    pub image: RgbaImage,
}

impl CropAsset {
    /// Validates the mask invariants and crops the image to its opaque extent.
    pub fn new(id: String, species: Species, growth_stage: GrowthStage, image: RgbaImage) -> Result<Self> {
        let image = image.tight().map_err(|_| Error::Config(alloc::format!("asset {id} has no opaque pixel")))?;
        Ok(Self { id, species, growth_stage, image })
    }

    /// Checks that the mask has an opaque pixel and touches all four edges.
    pub fn validate(&self) -> Result<()> {
        match self.image.opaque_extent() {
            Some((0, 0, x1, y1)) if x1 + 1 == self.image.width && y1 + 1 == self.image.height => Ok(()),
            Some(_) => Err(Error::Config(alloc::format!("asset {} mask is not tight", self.id))),
            None => Err(Error::Config(alloc::format!("asset {} has no opaque pixel", self.id))),
        }
    }
}

struct LeafStyle {
    leaves: (usize, usize),
    length_frac: (f64, f64),
    width_ratio: f64,
    serration: f64,
    base: [f64; 3],
    vein: [f64; 3],
}

fn style(species: Species) -> LeafStyle {
    match species {
        Species::SugarBeet => LeafStyle {
            leaves: (5, 8),
            length_frac: (0.75, 1.0),
            width_ratio: 0.42,
            serration: 0.0,
            base: [52.0, 142.0, 48.0],
            vein: [150.0, 190.0, 110.0],
        },
        Species::Polygonum => LeafStyle {
            leaves: (4, 7),
            length_frac: (0.7, 1.0),
            width_ratio: 0.2,
            serration: 0.0,
            base: [70.0, 128.0, 40.0],
            vein: [150.0, 70.0, 70.0],
        },
        Species::Cirsium => LeafStyle {
            leaves: (6, 10),
            length_frac: (0.65, 1.0),
            width_ratio: 0.3,
            serration: 0.35,
            base: [88.0, 150.0, 92.0],
            vein: [200.0, 215.0, 190.0],
        },
        Species::Other => LeafStyle {
            leaves: (5, 7),
            length_frac: (0.8, 1.0),
            width_ratio: 0.55,
            serration: 0.05,
            base: [70.0, 120.0, 95.0],
            vein: [160.0, 180.0, 160.0],
        },
    }
}

/// Procedural rosette sprite for one `(species, stage, variant)`.
pub fn procedural_asset(species: Species, stage: GrowthStage, variant: u32, seed: u64) -> CropAsset {
    let key = ((species as u64) << 40) | ((stage as u64) << 32) | variant as u64;
    let mut rng = rng_from(derive_seed(seed, key));
    let st = style(species);
    let radius: f64 = match stage {
        GrowthStage::Seedling => rng.gen_range(9.0..14.0),
        GrowthStage::WellGrown => rng.gen_range(20.0..30.0),
    };
    let n_leaves = rng.gen_range(st.leaves.0..=st.leaves.1);
    let n_leaves = match stage {
        GrowthStage::Seedling => n_leaves.div_ceil(2).max(2),
        GrowthStage::WellGrown => n_leaves,
    };
    let phase = rng.gen_range(0.0..2.0 * PI);
    struct Leaf {
        dir: f64,
        len: f64,
        half_w: f64,
        shade: f64,
    }
    let leaves: Vec<Leaf> = (0..n_leaves)
        .map(|i| {
            let dir = phase + 2.0 * PI * i as f64 / n_leaves as f64 + rng.gen_range(-0.3..0.3);
            let len = radius * rng.gen_range(st.length_frac.0..st.length_frac.1);
            Leaf { dir, len, half_w: len * st.width_ratio * rng.gen_range(0.85..1.15), shade: rng.gen_range(0.8..1.15) }
        })
        .collect();
    let size = (2.0 * radius).ceil() as usize + 3;
    let c = size as f64 * 0.5;
    let mut img = RgbaImage::new(size, size);
    let teeth = rng.gen_range(5.0..8.0);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            let mut best: Option<(f64, f64, f64)> = None; // (depth, |lateral|/half, shade)
            for leaf in &leaves {
                let (s, co) = Float::sin_cos(leaf.dir);
                let t = dx * co + dy * s;
                let lat = -dx * s + dy * co;
                if t <= 0.0 || t >= leaf.len {
                    continue;
                }
                let u = t / leaf.len;
                let mut hw = leaf.half_w * Float::powf(Float::sin(PI * u), 0.8);
                if st.serration > 0.0 {
                    hw *= 1.0 - st.serration * (0.5 + 0.5 * Float::sin(teeth * 2.0 * PI * u));
                }
                if Float::abs(lat) < hw {
                    let rel = Float::abs(lat) / hw;
                    let depth = u;
                    if best.is_none_or(|b| depth < b.0) {
                        best = Some((depth, rel, leaf.shade));
                    }
                }
            }
            let center_disc = dx * dx + dy * dy <= (radius * 0.12).max(1.5).powi(2);
            if let Some((depth, rel, shade)) = best {
                let edge_dark = 1.0 - 0.25 * rel * rel;
                let tip_light = 0.9 + 0.2 * depth;
                let mut px = [0.0; 3];
                for ch in 0..3 {
                    px[ch] = st.base[ch] * shade * edge_dark * tip_light;
                }
                if rel < 0.12 {
                    for ch in 0..3 {
                        px[ch] = 0.5 * px[ch] + 0.5 * st.vein[ch];
                    }
                }
                let n = rng.gen_range(-6.0..6.0);
                img.put(x, y, [round_u8(px[0] + n), round_u8(px[1] + n), round_u8(px[2] + n), 255]);
            } else if center_disc {
                img.put(x, y, [round_u8(st.base[0] * 0.8), round_u8(st.base[1] * 0.8), round_u8(st.base[2] * 0.8), 255]);
            }
        }
    }
    let id = alloc::format!("{}-{}-{variant}", species.as_str(), stage.as_str());
    CropAsset::new(id, species, stage, img).expect("procedural rosette always has a center disc")
}

/// Smooth lattice noise in `[0, 1]` with cell size `cell` px.
fn value_noise(w: usize, h: usize, cell: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = y as f64 / cell;
        let (iy, fy) = (gy as usize, smooth(gy - Float::floor(gy)));
        for x in 0..w {
            let gx = x as f64 / cell;
            let (ix, fx) = (gx as usize, smooth(gx - Float::floor(gx)));
            let v00 = grid[iy * gw + ix];
            let v10 = grid[iy * gw + ix + 1];
            let v01 = grid[(iy + 1) * gw + ix];
            let v11 = grid[(iy + 1) * gw + ix + 1];
            let top = v00 + (v10 - v00) * fx;
            let bot = v01 + (v11 - v01) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Procedural soil background.
pub fn procedural_background(width: usize, height: usize, variant: u32, seed: u64) -> RgbImage {
    let mut rng = rng_from(derive_seed(seed, 0xB6 << 32 | variant as u64));
    let palettes: [[f64; 3]; 5] = [
        [118.0, 88.0, 62.0],
        [96.0, 74.0, 56.0],
        [140.0, 112.0, 82.0],
        [84.0, 70.0, 60.0],
        [128.0, 100.0, 70.0],
    ];
    let base = palettes[rng.gen_range(0..palettes.len())];
    let tint: [f64; 3] = core::array::from_fn(|_| rng.gen_range(0.9..1.1));
    let coarse = value_noise(width, height, rng.gen_range(24.0..48.0), &mut rng);
    let fine = value_noise(width, height, rng.gen_range(3.0..6.0), &mut rng);
    let mut img = RgbImage::new(width, height);
    for i in 0..width * height {
        let n = 0.75 + 0.35 * coarse[i] + 0.25 * (fine[i] - 0.5);
        let jitter = rng.gen_range(-5.0..5.0);
        let px: [u8; 3] = core::array::from_fn(|c| round_u8(base[c] * tint[c] * n + jitter));
        img.data[i * 3..i * 3 + 3].copy_from_slice(&px);
    }
    // Stones and clods.
    let blobs = rng.gen_range(6..20);
    for _ in 0..blobs {
        let (bx, by) = (rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
        let r = rng.gen_range(1.5..5.0);
        let stone = rng.gen_bool(0.5);
        let shade = if stone { rng.gen_range(1.25..1.6) } else { rng.gen_range(0.55..0.8) };
        let (x0, x1) = ((bx - r).max(0.0) as usize, ((bx + r).ceil() as usize).min(width));
        let (y0, y1) = ((by - r).max(0.0) as usize, ((by + r).ceil() as usize).min(height));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - bx, y as f64 + 0.5 - by);
                if dx * dx + dy * dy <= r * r {
                    let p = img.get(x, y);
                    let q: [u8; 3] = core::array::from_fn(|c| {
                        let v = p[c] as f64 * shade;
                        round_u8(if stone { v * 0.6 + 0.4 * 150.0 } else { v })
                    });
                    img.put(x, y, q);
                }
            }
        }
    }
    // Straw residue.
    let straws = rng.gen_range(0..8);
    for _ in 0..straws {
        let (mut x, mut y) = (rng.gen_range(0.0..width as f64), rng.gen_range(0.0..height as f64));
        let ang = rng.gen_range(0.0..PI);
        let len = rng.gen_range(6.0..18.0);
        let (s, c) = Float::sin_cos(ang);
        let mut t = 0.0;
        while t < len {
            if x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height {
                img.put(x as usize, y as usize, [190, 170, 120]);
            }
            x += c;
            y += s;
            t += 1.0;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_assets_are_tight_and_deterministic() {
        for sp in Species::ALL {
            for st in GrowthStage::ALL {
                let a = procedural_asset(sp, st, 3, 11);
                a.validate().unwrap();
                assert_eq!(a, procedural_asset(sp, st, 3, 11));
            }
        }
        let seed = procedural_asset(Species::SugarBeet, GrowthStage::Seedling, 0, 1);
        let grown = procedural_asset(Species::SugarBeet, GrowthStage::WellGrown, 0, 1);
        assert!(seed.image.width < grown.image.width);
    }

    #[test]
    fn backgrounds_vary_by_variant() {
        let a = procedural_background(64, 48, 0, 5);
        let b = procedural_background(64, 48, 1, 5);
        assert_eq!((a.width, a.height), (64, 48));
        assert_ne!(a, b);
        assert_eq!(a, procedural_background(64, 48, 0, 5));
    }

    #[test]
    fn non_tight_asset_rejected() {
        let mut img = RgbaImage::new(4, 4);
        img.put(1, 1, [0, 255, 0, 255]);
        let a = CropAsset { id: "x".into(), species: Species::Other, growth_stage: GrowthStage::Seedling, image: img.clone() };
        assert!(a.validate().is_err());
        let fixed = CropAsset::new("x".into(), Species::Other, GrowthStage::Seedling, img).unwrap();
        fixed.validate().unwrap();
        assert!(CropAsset::new("y".into(), Species::Other, GrowthStage::Seedling, RgbaImage::new(2, 2)).is_err());
    }
}
