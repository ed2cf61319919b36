//! 8-bit RGB / RGBA rasters and the resampling used for compositing.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::{Euclid, Float};

use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbaImage {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGBA, straight (not premultiplied) alpha.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(alloc::format!("{}x{} RGB needs {} bytes, got {}", width, height, width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Copies the `w x h` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(alloc::format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Self::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            out.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }
}

impl RgbaImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 4] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 4 {
            return Err(Error::Shape(alloc::format!("{}x{} RGBA needs {} bytes, got {}", width, height, width * height * 4, data.len())));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn alpha(&self, x: usize, y: usize) -> u8 {
        self.data[(y * self.width + x) * 4 + 3]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 4]) {
        let i = (y * self.width + x) * 4;
        self.data[i..i + 4].copy_from_slice(&px);
    }

    /// Inclusive pixel extent `(x0, y0, x1, y1)` of pixels with alpha > 0.
    pub fn opaque_extent(&self) -> Option<(usize, usize, usize, usize)> {
        let mut ext: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.alpha(x, y) > 0 {
                    ext = Some(match ext {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        ext
    }

    /// Crops to the opaque extent; errors if fully transparent.
    pub fn tight(&self) -> Result<Self> {
        let (x0, y0, x1, y1) = self
            .opaque_extent()
            .ok_or_else(|| Error::Degenerate("sprite has no opaque pixel".into()))?;
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        if (x0, y0, w, h) == (0, 0, self.width, self.height) {
            return Ok(self.clone());
        }
        let mut out = Self::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 4;
            out.data[y * w * 4..(y + 1) * w * 4].copy_from_slice(&self.data[src..src + w * 4]);
        }
        Ok(out)
    }

    /// Premultiplied RGBA at integer coordinates; transparent outside.
    #[inline]
    fn premul(&self, x: isize, y: isize) -> [f64; 4] {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            return [0.0; 4];
        }
        let i = (y as usize * self.width + x as usize) * 4;
        let a = self.data[i + 3] as f64 / 255.0;
        [self.data[i] as f64 * a, self.data[i + 1] as f64 * a, self.data[i + 2] as f64 * a, a]
    }

    /// Bilinear sample in premultiplied space at continuous pixel-index
    /// coordinates (pixel `(i, j)` sits at `(i, j)`).
    fn sample(&self, u: f64, v: f64) -> [f64; 4] {
        let (x0, y0) = (Float::floor(u), Float::floor(v));
        let (fx, fy) = (u - x0, v - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        if fx == 0.0 && fy == 0.0 {
            return self.premul(x0, y0);
        }
        let p00 = self.premul(x0, y0);
        let p10 = self.premul(x0 + 1, y0);
        let p01 = self.premul(x0, y0 + 1);
        let p11 = self.premul(x0 + 1, y0 + 1);
        let mut out = [0.0; 4];
        for c in 0..4 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bot = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bot - top) * fy;
        }
        out
    }
}

/// Converts premultiplied float RGBA back to straight 8-bit.
fn unpremul(p: [f64; 4]) -> [u8; 4] {
    let a8 = round_u8(p[3] * 255.0);
    if a8 == 0 {
        return [0; 4];
    }
    let a = p[3];
    [round_u8(p[0] / a), round_u8(p[1] / a), round_u8(p[2] / a), a8]
}

#[inline]
pub fn round_u8(v: f64) -> u8 {
    let r = Float::round(v);
    if r <= 0.0 {
        0
    } else if r >= 255.0 {
        255
    } else {
        r as u8
    }
}

/// Scales hue (as a fraction of the color wheel, wrapping), saturation and
/// value of every pixel by the given factors.
pub fn scale_hsv(img: &RgbImage, gains: [f64; 3]) -> RgbImage {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let [r, g, b] = [px[0], px[1], px[2]].map(|v| v as f64 / 255.0);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let d = max - min;
        let h = if d == 0.0 {
            0.0
        } else if max == r {
            Euclid::rem_euclid(&((g - b) / d), &6.0) / 6.0
        } else if max == g {
            ((b - r) / d + 2.0) / 6.0
        } else {
            ((r - g) / d + 4.0) / 6.0
        };
        let s = if max == 0.0 { 0.0 } else { d / max };
        let h = Euclid::rem_euclid(&(h * gains[0]), &1.0);
        let s = (s * gains[1]).clamp(0.0, 1.0);
        let v = (max * gains[2]).clamp(0.0, 1.0);
        let c = v * s;
        let hp = h * 6.0;
        let x = c * (1.0 - (Euclid::rem_euclid(&hp, &2.0) - 1.0).abs());
        let (r1, g1, b1) = match hp as u32 {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = v - c;
        px[0] = round_u8((r1 + m) * 255.0);
        px[1] = round_u8((g1 + m) * 255.0);
        px[2] = round_u8((b1 + m) * 255.0);
    }
    out
}

/// Rotates (counter-clockwise, degrees) and scales a sprite about its
/// center, then crops to the opaque extent.
///
/// With `angle_deg == 0` and `scale == 1` the result equals `src.tight()`.
pub fn transform_sprite(src: &RgbaImage, angle_deg: f64, scale: f64) -> Result<RgbaImage> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(alloc::format!("sprite scale must be positive, got {scale}")));
    }
    if angle_deg == 0.0 && scale == 1.0 {
        return src.tight();
    }
    let theta = angle_deg.to_radians();
    let (s, c) = (Float::sin(theta), Float::cos(theta));
    let (sw, sh) = (src.width as f64 * scale, src.height as f64 * scale);
    let out_w = Float::ceil(Float::abs(sw * c) + Float::abs(sh * s) - 1e-9).max(1.0) as usize;
    let out_h = Float::ceil(Float::abs(sw * s) + Float::abs(sh * c) - 1e-9).max(1.0) as usize;
    let (ocx, ocy) = (out_w as f64 * 0.5, out_h as f64 * 0.5);
    let (scx, scy) = (src.width as f64 * 0.5, src.height as f64 * 0.5);
    let mut out = RgbaImage::new(out_w, out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            // Output pixel center relative to canvas center; image y points down,
            // so a counter-clockwise on-screen rotation negates the angle.
            let dx = x as f64 + 0.5 - ocx;
            let dy = y as f64 + 0.5 - ocy;
            let rx = (c * dx - s * dy) / scale;
            let ry = (s * dx + c * dy) / scale;
            let p = src.sample(rx + scx - 0.5, ry + scy - 0.5);
            out.put(x, y, unpremul(p));
        }
    }
    out.tight()
}

/// Alpha-blends `sprite` onto `dst` with its top-left corner at `(ox, oy)`.
///
/// Fractional offsets resample the sprite bilinearly; integer offsets copy
/// it exactly. Parts falling outside `dst` are clipped.
pub fn blend(dst: &mut RgbImage, sprite: &RgbaImage, ox: f64, oy: f64) {
    let x_start = Float::floor(ox).max(0.0) as usize;
    let y_start = Float::floor(oy).max(0.0) as usize;
    let x_end = (Float::ceil(ox + sprite.width as f64).max(0.0) as usize).min(dst.width);
    let y_end = (Float::ceil(oy + sprite.height as f64).max(0.0) as usize).min(dst.height);
    for y in y_start..y_end {
        for x in x_start..x_end {
            let p = sprite.sample(x as f64 - ox, y as f64 - oy);
            let a = p[3];
            if a <= 0.0 {
                continue;
            }
            let bg = dst.get(x, y);
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = round_u8(p[c] + bg[c] as f64 * (1.0 - a));
            }
            dst.put(x, y, px);
        }
    }
}

/// Packs images into an `[N, 3, H, W]` tensor scaled to `[-1, 1]`.
pub fn images_to_tensor<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (w, h) = (first.width, first.height);
    let plane = w * h;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.width != w || img.height != h {
            return Err(Error::Shape(alloc::format!("batch mixes {}x{} and {}x{}", w, h, img.width, img.height)));
        }
        let base = n * 3 * plane;
        for (i, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = T::lit(px[c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

/// Inverse of [`images_to_tensor`], clamping to the valid range.
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Vec<RgbImage> {
    let (n, c, h, w) = t.dims4();
    assert_eq!(c, 3, "expected RGB tensor");
    let plane = h * w;
    (0..n)
        .map(|b| {
            let mut img = RgbImage::new(w, h);
            let base = b * 3 * plane;
            for i in 0..plane {
                for ch in 0..3 {
                    let v = t.data()[base + ch * plane + i].as_f64();
                    img.data[i * 3 + ch] = round_u8((v + 1.0) * 127.5);
                }
            }
            img
        })
        .collect()
}
