//! Pseudo-real domain: a fixed "camera look" applied to independently
//! generated scenes, standing in for real field imagery.
//!
//! The look is a consistent style (color cast, desaturation, tone curve,
//! blur, sensor noise, vignetting, uneven illumination) with mild per-image
//! jitter, so it behaves like one unseen target domain.

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::{round_u8, RgbImage};
use crate::rng::{derive_named, rng_from};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealStyle {
    /// Per-channel multiplicative cast.
    pub channel_gain: [f64; 3],
    /// Per-channel additive offset, in [0,1] units.
    pub channel_offset: [f64; 3],
    /// 1 keeps saturation, 0 is grayscale.
    pub saturation: f64,
    pub contrast: f64,
    pub gamma: f64,
    /// Gaussian blur sigma in px.
    pub blur_sigma: f64,
    /// Additive Gaussian noise std, in [0,1] units.
    pub noise_std: f64,
    /// Corner darkening strength.
    pub vignette: f64,
    /// Peak relative change of a linear illumination ramp.
    pub illumination: f64,
    /// Relative per-image jitter of gain, saturation, contrast and gamma.
    pub jitter: f64,
}

impl Default for RealStyle {
    fn default() -> Self {
        Self {
            channel_gain: [1.25, 1.0, 0.62],
            channel_offset: [0.04, 0.02, 0.06],
            saturation: 0.45,
            contrast: 0.75,
            gamma: 0.8,
            blur_sigma: 1.0,
            noise_std: 0.03,
            vignette: 0.35,
            illumination: 0.25,
            jitter: 0.08,
        }
    }
}

impl RealStyle {
    pub fn validate(&self) -> Result<()> {
        let ok = self.channel_gain.iter().all(|g| *g > 0.0)
            && self.saturation >= 0.0
            && self.contrast > 0.0
            && self.gamma > 0.0
            && self.blur_sigma >= 0.0
            && self.noise_std >= 0.0
            && (0.0..1.0).contains(&self.vignette)
            && (0.0..1.0).contains(&self.illumination)
            && (0.0..0.5).contains(&self.jitter);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid pseudo-real style parameters".into()))
        }
    }
}

fn gaussian_kernel(sigma: f64) -> alloc::vec::Vec<f64> {
    let r = Float::ceil(3.0 * sigma) as isize;
    let k: alloc::vec::Vec<f64> = (-r..=r).map(|i| Float::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge clamping over a planar `[3][h][w]` buffer.
fn blur(buf: &mut [f64], w: usize, h: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = alloc::vec![0.0; w * h];
    for plane in buf.chunks_mut(w * h) {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    s += kv * plane[y * w + sx];
                }
                tmp[y * w + x] = s;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    s += kv * tmp[sy * w + x];
                }
                plane[y * w + x] = s;
            }
        }
    }
}

/// Applies the style to `img`; deterministic in `seed`.
pub fn apply_style(img: &RgbImage, style: &RealStyle, seed: u64) -> RgbImage {
    let mut rng = rng_from(derive_named(seed, "pseudo-real"));
    let (w, h) = (img.width, img.height);
    let mut j = |v: f64| v * (1.0 + rng.gen_range(-style.jitter..=style.jitter));
    let gain = style.channel_gain.map(&mut j);
    let saturation = j(style.saturation);
    let contrast = j(style.contrast);
    let gamma = j(style.gamma);
    let angle: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
    let (dx, dy) = (Float::cos(angle), Float::sin(angle));

    let plane = w * h;
    let mut buf = alloc::vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(x, y);
            for c in 0..3 {
                buf[c * plane + y * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    blur(&mut buf, w, h, style.blur_sigma);

    let noise = Normal::new(0.0, style.noise_std.max(1e-12)).expect("finite std");
    let mut out = RgbImage::new(w, h);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let rmax2 = cx * cx + cy * cy;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rgb = [buf[i], buf[plane + i], buf[2 * plane + i]];
            let luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            let (ux, uy) = (x as f64 - cx, y as f64 - cy);
            let ramp = 1.0 + style.illumination * (ux * dx + uy * dy) / cx.max(cy);
            let vig = 1.0 - style.vignette * (ux * ux + uy * uy) / rmax2;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let mut v = luma + saturation * (rgb[c] - luma);
                v = v * gain[c] + style.channel_offset[c];
                v = 0.5 + contrast * (v - 0.5);
                v = Float::powf(v.clamp(0.0, 1.0), gamma);
                v = v * ramp * vig;
                if style.noise_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                px[c] = round_u8(v * 255.0);
            }
            out.put(x, y, px);
        }
    }
    out
}
