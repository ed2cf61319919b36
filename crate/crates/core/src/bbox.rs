//! Normalized box geometry.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::{Error, Result};

/// Axis-aligned box in `[cx, cy, w, h]` form, as fractions of image width
/// and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Checks the box invariants: center inside the frame, positive size
    /// no larger than the frame.
    pub fn validate(&self) -> Result<()> {
        let ok_unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !ok_unit(self.cx) || !ok_unit(self.cy) {
            return Err(Error::Config(alloc::format!("box center out of [0,1]: {self:?}")));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::Config(alloc::format!("box size out of (0,1]: {self:?}")));
        }
        Ok(())
    }

    /// Box from pixel corners `[x0, x1) x [y0, y1)` in a `width x height` frame.
    pub fn from_corners_px(x0: f64, y0: f64, x1: f64, y1: f64, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self { cx: (x0 + x1) * 0.5 / w, cy: (y0 + y1) * 0.5 / h, w: (x1 - x0) / w, h: (y1 - y0) / h }
    }

    /// `(x0, y0, x1, y1)` in pixels.
    pub fn corners_px(&self, width: usize, height: usize) -> (f64, f64, f64, f64) {
        let (w, h) = (width as f64, height as f64);
        (
            (self.cx - self.w * 0.5) * w,
            (self.cy - self.h * 0.5) * h,
            (self.cx + self.w * 0.5) * w,
            (self.cy + self.h * 0.5) * h,
        )
    }

    /// Center in pixels.
    pub fn center_px(&self, width: usize, height: usize) -> (f64, f64) {
        (self.cx * width as f64, self.cy * height as f64)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// Intersection over union. Degenerate (zero-area) boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_cxcywh(a.as_array(), b.as_array())
}

/// IoU of two `[cx, cy, w, h]` boxes.
pub fn iou_cxcywh<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    let half = T::lit(0.5);
    let iw = ((a[0] + a[2] * half).min(b[0] + b[2] * half) - (a[0] - a[2] * half).max(b[0] - b[2] * half))
        .max(T::zero());
    let ih = ((a[1] + a[3] * half).min(b[1] + b[3] * half) - (a[1] - a[3] * half).max(b[1] - b[3] * half))
        .max(T::zero());
    let inter = iw * ih;
    let area = |c: [T; 4]| ((c[0] + c[2] * half) - (c[0] - c[2] * half)) * ((c[1] + c[3] * half) - (c[1] - c[3] * half));
    let union = area(a) + area(b) - inter;
    if union <= T::zero() || inter <= T::zero() {
        return T::zero();
    }
    inter / union
}

/// IoU of `a` against fixed `b`, with `d IoU / d a` over `[cx, cy, w, h]`.
///
/// At the non-differentiable points (touching edges, coincident edges) the
/// one-sided derivative that keeps the current ordering is returned.
pub fn iou_grad<T: Real>(a: [T; 4], b: [T; 4]) -> (T, [T; 4]) {
    let half = T::lit(0.5);
    let zero = T::zero();
    let (ax0, ax1) = (a[0] - a[2] * half, a[0] + a[2] * half);
    let (ay0, ay1) = (a[1] - a[3] * half, a[1] + a[3] * half);
    let (bx0, bx1) = (b[0] - b[2] * half, b[0] + b[2] * half);
    let (by0, by1) = (b[1] - b[3] * half, b[1] + b[3] * half);
    let iw = ax1.min(bx1) - ax0.max(bx0);
    let ih = ay1.min(by1) - ay0.max(by0);
    if iw <= zero || ih <= zero {
        return (zero, [zero; 4]);
    }
    let inter = iw * ih;
    let (aw, ah) = (ax1 - ax0, ay1 - ay0);
    let union = aw * ah + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= zero {
        return (zero, [zero; 4]);
    }
    // d inter / d (ax0, ax1, ay0, ay1)
    let di_ax0 = if ax0 > bx0 { -ih } else { zero };
    let di_ax1 = if ax1 < bx1 { ih } else { zero };
    let di_ay0 = if ay0 > by0 { -iw } else { zero };
    let di_ay1 = if ay1 < by1 { iw } else { zero };
    let d_inter = [
        di_ax0 + di_ax1,
        di_ay0 + di_ay1,
        (di_ax1 - di_ax0) * half,
        (di_ay1 - di_ay0) * half,
    ];
    let d_area = [zero, zero, ah, aw];
    let u2 = union * union;
    let mut g = [zero; 4];
    for i in 0..4 {
        g[i] = (d_inter[i] * (union + inter) - inter * d_area[i]) / u2;
    }
    (inter / union, g)
}
