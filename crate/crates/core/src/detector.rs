//! Reference single-class crop detector.
//!
//! A small strided conv backbone feeds an anchor-free `S x S` grid head
//! (`S = 14` on 224 px input). Each cell predicts objectness and one box
//! `(cx, cy, w, h)`; the center is confined to its own cell. The decoded
//! grid is the [`DenseOutput`], which is both differentiable (used by the
//! consistency loss) and the source of discrete detections via [`decode`].

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bbox::{iou, iou_grad, BBox};
use crate::nn::{clip_grad_norm, cosine_lr, Adam, Conv, Module, ParamSet, Sgd};
use crate::raster::{images_to_tensor, scale_hsv, RgbImage};
use crate::rng::{derive_named, rng_from};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result, IMAGE_SIZE};

/// Values per grid cell: objectness, cx, cy, w, h.
pub const CELL_CHANNELS: usize = 5;
/// Total stride of the backbone.
pub const STRIDE: usize = 16;
/// Grid side on 224 px input.
pub const GRID: usize = IMAGE_SIZE / STRIDE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Detections of one image, sorted by descending confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
    /// `(height, width)` in px.
    pub image_dims: (usize, usize),
}

/// Decoded grid output of one image, channel-major `[5][S][S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput<T> {
    pub grid: usize,
    pub values: Vec<T>,
}

impl<T: Real> DenseOutput<T> {
    pub fn zeros(grid: usize) -> Self {
        Self { grid, values: vec![T::zero(); CELL_CHANNELS * grid * grid] }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    #[inline]
    pub fn get(&self, channel: usize, cell: usize) -> T {
        self.values[channel * self.cells() + cell]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, cell: usize, v: T) {
        let c = self.cells();
        self.values[channel * c + cell] = v;
    }

    pub fn objectness(&self, cell: usize) -> T {
        self.get(0, cell)
    }

    /// `[cx, cy, w, h]` predicted by `cell`.
    pub fn cell_box(&self, cell: usize) -> [T; 4] {
        [self.get(1, cell), self.get(2, cell), self.get(3, cell), self.get(4, cell)]
    }

    pub fn set_cell(&mut self, cell: usize, obj: T, b: [T; 4]) {
        self.set(0, cell, obj);
        for (i, &v) in b.iter().enumerate() {
            self.set(i + 1, cell, v);
        }
    }

    /// Splits an `[N, 5, S, S]` tensor into per-image outputs.
    pub fn from_batch(t: &Tensor<T>) -> Vec<Self> {
        let (n, c, s, _) = t.dims4();
        assert_eq!(c, CELL_CHANNELS);
        let per = c * s * s;
        (0..n).map(|i| Self { grid: s, values: t.data()[i * per..(i + 1) * per].to_vec() }).collect()
    }

    pub fn to_batch(outputs: &[Self]) -> Tensor<T> {
        let s = outputs[0].grid;
        let data = outputs.iter().flat_map(|o| o.values.iter().copied()).collect();
        Tensor::from_vec(&[outputs.len(), CELL_CHANNELS, s, s], data)
    }

    pub fn all_in_unit_range(&self) -> bool {
        self.values.iter().all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one())
    }
}

/// Backbone widths of the reference detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub widths: [usize; 3],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64] }
    }
}

#[derive(Debug, Clone)]
pub struct Detector<T> {
    pub config: DetectorConfig,
    params: ParamSet<T>,
    layers: Vec<Conv>,
}

const LEAK: f64 = 0.1;

impl<T: Real> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Self {
        let mut rng = rng_from(derive_named(seed, "detector-init"));
        let mut ps = ParamSet::new();
        let [c1, c2, c3] = config.widths;
        let layers = vec![
            Conv::new(&mut ps, "stem", 3, c1, 4, 4, 0, 1.0, &mut rng),
            Conv::new(&mut ps, "down1", c1, c2, 3, 2, 1, 1.0, &mut rng),
            Conv::new(&mut ps, "block1", c2, c2, 3, 1, 1, 1.0, &mut rng),
            Conv::new(&mut ps, "down2", c2, c3, 3, 2, 1, 1.0, &mut rng),
            Conv::new(&mut ps, "block2", c3, c3, 3, 1, 1, 1.0, &mut rng),
            Conv::new(&mut ps, "head", c3, CELL_CHANNELS, 1, 1, 0, 0.1, &mut rng),
        ];
        // Priors: low objectness, boxes of ~15% of the frame.
        let head_bias = layers[5].bias;
        let b = ps.tensors_mut()[head_bias].data_mut();
        b[0] = T::lit(-4.0);
        b[3] = T::lit(-1.7);
        b[4] = T::lit(-1.7);
        Self { config, params: ps, layers }
    }

    pub fn grid(&self) -> usize {
        GRID
    }
}

impl<T: Real> Module<T> for Detector<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let mut h = x;
        let (hidden, head) = self.layers.split_at(self.layers.len() - 1);
        for layer in hidden {
            h = layer.apply(g, p, h);
            h = g.leaky_relu(h, T::lit(LEAK));
        }
        let raw = head[0].apply(g, p, h);
        g.grid_decode(raw)
    }
}

fn check_input<T: Real>(x: &Tensor<T>) -> Result<()> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != IMAGE_SIZE || shape[3] != IMAGE_SIZE {
        return Err(Error::Shape(alloc::format!("detector expects [N, 3, {IMAGE_SIZE}, {IMAGE_SIZE}], got {shape:?}")));
    }
    Ok(())
}

/// Dense grid output for a batch tensor in `[-1, 1]`.
pub fn forward_dense_batch<T: Real, M: Module<T> + ?Sized>(model: &M, x: &Tensor<T>) -> Result<Vec<DenseOutput<T>>> {
    check_input(x)?;
    Ok(DenseOutput::from_batch(&model.infer(x)))
}

/// Dense grid output for one image.
pub fn forward_dense<T: Real, M: Module<T> + ?Sized>(model: &M, image: &RgbImage) -> Result<DenseOutput<T>> {
    let x = images_to_tensor::<T>(&[image])?;
    Ok(forward_dense_batch(model, &x)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { conf_thresh: 0.25, nms_iou: 0.5, max_detections: 50 }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_thresh) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("conf_thresh and nms_iou must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression. Input order breaks confidence ties.
pub fn nms(mut candidates: Vec<Detection>, nms_iou: f64, max_detections: usize) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap_or(core::cmp::Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        if kept.len() >= max_detections {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &c.bbox) <= nms_iou) {
            kept.push(c);
        }
    }
    kept
}

/// Thresholds objectness, converts cells to boxes and applies NMS.
pub fn decode<T: Real>(dense: &DenseOutput<T>, params: &DecodeParams) -> DetectionSet {
    let mut candidates = Vec::new();
    for cell in 0..dense.cells() {
        let conf = dense.objectness(cell).as_f64();
        if !(conf >= params.conf_thresh) || conf <= 0.0 {
            continue;
        }
        let [cx, cy, w, h] = dense.cell_box(cell).map(|v| v.as_f64());
        let bbox = BBox { cx: cx.clamp(0.0, 1.0), cy: cy.clamp(0.0, 1.0), w: w.clamp(1e-6, 1.0), h: h.clamp(1e-6, 1.0) };
        candidates.push(Detection { bbox, confidence: conf.min(1.0) });
    }
    DetectionSet {
        detections: nms(candidates, params.nms_iou, params.max_detections),
        image_dims: (IMAGE_SIZE, IMAGE_SIZE),
    }
}

/// Index of the cell containing `v * grid`; centers exactly on a boundary go
/// to the lower cell.
fn cell_coord(v: f64, grid: usize) -> usize {
    let c = Float::ceil(v * grid as f64) as isize - 1;
    c.clamp(0, grid as isize - 1) as usize
}

/// Responsible cell per GT box. A GT whose cell is already claimed by an
/// earlier GT gets `None` (the cell stays positive for objectness).
pub fn assign_cells(gt: &[BBox], grid: usize) -> Vec<Option<usize>> {
    let mut taken = vec![false; grid * grid];
    gt.iter()
        .map(|b| {
            let cell = cell_coord(b.cy, grid) * grid + cell_coord(b.cx, grid);
            if taken[cell] {
                None
            } else {
                taken[cell] = true;
                Some(cell)
            }
        })
        .collect()
}

const BCE_EPS: f64 = 1e-7;

/// Binary cross-entropy on a probability, with its derivative.
fn bce<T: Real>(p: T, target: bool) -> (T, T) {
    let eps = T::lit(BCE_EPS);
    if target {
        let q = p.max(eps);
        (-q.ln(), if p > eps { -T::one() / p } else { T::zero() })
    } else {
        let q = (T::one() - p).max(eps);
        (-q.ln(), if T::one() - p > eps { T::one() / (T::one() - p) } else { T::zero() })
    }
}

/// Loss of one image and its gradient w.r.t. every dense value.
///
/// `(sum over assigned cells of (1 - IoU) + sum over all cells of objectness
/// BCE) / max(1, assigned cells)`.
pub fn detection_loss_grad<T: Real>(dense: &DenseOutput<T>, gt: &[BBox]) -> (T, DenseOutput<T>) {
    let grid = dense.grid;
    let cells = dense.cells();
    let mut grad = DenseOutput::zeros(grid);
    let mut positive = vec![false; cells];
    let assigned = assign_cells(gt, grid);
    let mut total = T::zero();
    let mut n_assigned = 0usize;
    for (b, cell) in gt.iter().zip(&assigned) {
        let cell_of_center = cell_coord(b.cy, grid) * grid + cell_coord(b.cx, grid);
        positive[cell_of_center] = true;
        if let Some(cell) = *cell {
            n_assigned += 1;
            let target = [b.cx, b.cy, b.w, b.h].map(T::lit);
            let (v, g) = iou_grad(dense.cell_box(cell), target);
            total += T::one() - v;
            for (i, gi) in g.iter().enumerate() {
                grad.set(i + 1, cell, -*gi);
            }
        }
    }
    for (cell, &pos) in positive.iter().enumerate() {
        let (l, g) = bce(dense.objectness(cell), pos);
        total += l;
        grad.set(0, cell, g);
    }
    let norm = T::one() / T::lit(n_assigned.max(1) as f64);
    for v in grad.values.iter_mut() {
        *v *= norm;
    }
    (total * norm, grad)
}

pub fn detection_loss<T: Real>(dense: &DenseOutput<T>, gt: &[BBox]) -> T {
    detection_loss_grad(dense, gt).0
}

/// Batch-mean detection loss as a tape node over an `[N, 5, S, S]` dense tensor.
pub fn detection_loss_node<T: Real>(g: &mut Graph<T>, dense: Var, targets: &[&[BBox]]) -> Var {
    let outputs = DenseOutput::from_batch(g.value(dense));
    assert_eq!(outputs.len(), targets.len(), "one target list per image");
    let inv_n = T::one() / T::lit(outputs.len() as f64);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, gt) in outputs.iter().zip(targets) {
        let (l, gr) = detection_loss_grad(out, gt);
        total += l;
        grads.push(DenseOutput { grid: gr.grid, values: gr.values.iter().map(|&v| v * inv_n).collect() });
    }
    let grad = DenseOutput::to_batch(&grads);
    g.reduce(total * inv_n, vec![(dense, grad)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub optimizer: OptimizerKind,
    /// Random horizontal/vertical flips.
    pub flip_augment: bool,
    /// Maximum relative hue, saturation and value change; zeros disable.
    pub hsv_augment: [f64; 3],
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-2,
            weight_decay: 5e-4,
            scheduler: Scheduler::Cosine,
            optimizer: OptimizerKind::Sgd,
            flip_augment: true,
            hsv_augment: [0.015, 0.7, 0.4],
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if !self.hsv_augment.iter().all(|g| (0.0..1.0).contains(g)) {
            return Err(Error::Config("hsv_augment gains must lie in [0,1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.scheduler {
            Scheduler::Cosine => cosine_lr(self.learning_rate, 0.01, epoch, self.epochs),
            Scheduler::Constant => self.learning_rate,
        }
    }
}

/// One training image with its boxes.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a RgbImage,
    pub boxes: &'a [BBox],
}

pub(crate) fn flip_boxes(boxes: &[BBox], horizontal: bool, vertical: bool) -> Vec<BBox> {
    boxes
        .iter()
        .map(|b| BBox {
            cx: if horizontal { 1.0 - b.cx } else { b.cx },
            cy: if vertical { 1.0 - b.cy } else { b.cy },
            ..*b
        })
        .collect()
}

pub(crate) fn flip_image(img: &RgbImage, horizontal: bool, vertical: bool) -> RgbImage {
    let mut out = RgbImage::new(img.width, img.height);
    for y in 0..img.height {
        let sy = if vertical { img.height - 1 - y } else { y };
        for x in 0..img.width {
            let sx = if horizontal { img.width - 1 - x } else { x };
            out.put(x, y, img.get(sx, sy));
        }
    }
    out
}

enum Optim<T> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

/// Gradient clipping bound applied to every detector update.
const MAX_GRAD_NORM: f64 = 10.0;

/// Stateful epoch-by-epoch trainer.
pub struct DetectorTrainer<T> {
    pub hyper: TrainHyper,
    optim: Optim<T>,
    epoch: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl<T: Real> DetectorTrainer<T> {
    pub fn new(hyper: TrainHyper) -> Result<Self> {
        hyper.validate()?;
        let optim = match hyper.optimizer {
            OptimizerKind::Sgd => Optim::Sgd(Sgd::new(0.937, true, hyper.weight_decay)),
            OptimizerKind::Adam => Optim::Adam(Adam::new(0.9, 0.999, hyper.weight_decay)),
        };
        Ok(Self { hyper, optim, epoch: 0, rng: rng_from(derive_named(hyper.seed, "detector-train")) })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on a batch tensor; returns the batch loss.
    pub fn step_tensor(&mut self, model: &mut Detector<T>, x: &Tensor<T>, boxes: &[&[BBox]], lr: f64) -> Result<f64> {
        check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (dense, p) = model.apply(&mut g, xv, true);
        let loss = detection_loss_node(&mut g, dense, boxes);
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { step: self.epoch, what: alloc::format!("detection loss {value}") });
        }
        let mut grads = g.backward(loss);
        let mut grads = model.params().collect_grads(&mut grads, &p);
        clip_grad_norm(&mut grads, MAX_GRAD_NORM);
        match &mut self.optim {
            Optim::Sgd(o) => o.step(model.params_mut(), &grads, lr),
            Optim::Adam(o) => o.step(model.params_mut(), &grads, lr),
        }
        Ok(value)
    }

    /// Runs one epoch over `data` in a seeded random order; returns the mean batch loss.
    pub fn train_epoch(&mut self, model: &mut Detector<T>, data: &[Sample<'_>]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let lr = self.hyper.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.hyper.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut boxes = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (fh, fv) = if self.hyper.flip_augment {
                    use rand::Rng;
                    (self.rng.gen_bool(0.5), self.rng.gen_bool(0.5))
                } else {
                    (false, false)
                };
                let mut img = flip_image(data[i].image, fh, fv);
                if self.hyper.hsv_augment.iter().any(|g| *g > 0.0) {
                    use rand::Rng;
                    let gains = self.hyper.hsv_augment.map(|g| 1.0 + g * self.rng.gen_range(-1.0..=1.0));
                    img = scale_hsv(&img, gains);
                }
                images.push(img);
                boxes.push(flip_boxes(data[i].boxes, fh, fv));
            }
            let refs: Vec<&RgbImage> = images.iter().collect();
            let x = images_to_tensor::<T>(&refs)?;
            let box_refs: Vec<&[BBox]> = boxes.iter().map(Vec::as_slice).collect();
            total += self.step_tensor(model, &x, &box_refs, lr)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }
}

/// Trains for `hyper.epochs` epochs; returns the per-epoch mean loss.
pub fn train_detector<T: Real>(model: &mut Detector<T>, data: &[Sample<'_>], hyper: &TrainHyper) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trainer = DetectorTrainer::new(*hyper)?;
    (0..hyper.epochs).map(|_| trainer.train_epoch(model, data)).collect()
}

/// Detections for a batch of images.
pub fn detect_images<T: Real, M: Module<T> + ?Sized>(
    model: &M,
    images: &[&RgbImage],
    params: &DecodeParams,
) -> Result<Vec<DetectionSet>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let x = images_to_tensor::<T>(chunk)?;
        for dense in forward_dense_batch(model, &x)? {
            out.push(decode(&dense, params));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perfect_dense(gt: &[BBox], grid: usize) -> DenseOutput<f64> {
        let mut d = DenseOutput::zeros(grid);
        for (b, cell) in gt.iter().zip(assign_cells(gt, grid)) {
            d.set_cell(cell.unwrap(), 1.0, [b.cx, b.cy, b.w, b.h]);
        }
        d
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = [BBox::new(0.3, 0.4, 0.1, 0.2).unwrap(), BBox::new(0.7, 0.7, 0.2, 0.2).unwrap()];
        let d = perfect_dense(&gt, GRID);
        assert!(detection_loss(&d, &gt).abs() < 1e-6);
        assert_eq!(detection_loss(&DenseOutput::<f64>::zeros(GRID), &[]), 0.0);
    }

    #[test]
    fn half_cell_shift_matches_hand_computation() {
        // GT inside cell (row 5, col 5), one cell wide (16 px).
        let s = GRID as f64;
        let gt = BBox::new(5.25 / s, 5.5 / s, 1.0 / s, 1.0 / s).unwrap();
        let mut d = DenseOutput::<f64>::zeros(GRID);
        let cell = 5 * GRID + 5;
        // Same size, shifted right by half a cell; objectness 0.8.
        d.set_cell(cell, 0.8, [5.75 / s, 5.5 / s, 1.0 / s, 1.0 / s]);
        // Overlap 0.5 x 1 cell, union 1.5 cells -> IoU 1/3.
        let expected = (1.0 - 1.0 / 3.0) + (-(0.8f64).ln());
        assert!((detection_loss(&d, &[gt]) - expected).abs() < 1e-12);
    }

    #[test]
    fn boundary_centers_go_to_lower_cell() {
        assert_eq!(cell_coord(3.0 / 14.0, 14), 2);
        assert_eq!(cell_coord(0.0, 14), 0);
        assert_eq!(cell_coord(1.0, 14), 13);
        assert_eq!(cell_coord(3.5 / 14.0, 14), 3);
    }

    #[test]
    fn colliding_gt_keeps_first() {
        let a = BBox::new(0.51, 0.51, 0.1, 0.1).unwrap();
        let b = BBox::new(0.52, 0.52, 0.2, 0.2).unwrap();
        let asg = assign_cells(&[a, b], GRID);
        assert!(asg[0].is_some() && asg[1].is_none());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = 4;
        for _ in 0..20 {
            let gt: Vec<BBox> = (0..rng.gen_range(0..3))
                .map(|_| BBox::new(rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)).unwrap())
                .collect();
            let mut d = DenseOutput::<f64>::zeros(grid);
            for v in d.values.iter_mut() {
                *v = rng.gen_range(0.05..0.95);
            }
            let (_, g) = detection_loss_grad(&d, &gt);
            for i in 0..d.values.len() {
                let eps = 1e-6;
                let mut p = d.clone();
                p.values[i] += eps;
                let mut m = d.clone();
                m.values[i] -= eps;
                let fd = (detection_loss(&p, &gt) - detection_loss(&m, &gt)) / (2.0 * eps);
                let a = g.values[i];
                let scale = a.abs().max(fd.abs()).max(1e-4);
                assert!((a - fd).abs() / scale < 1e-3, "index {i}: analytic {a}, numeric {fd}");
            }
        }
    }

    #[test]
    fn decode_thresholds_and_suppresses() {
        let mut d = DenseOutput::<f64>::zeros(GRID);
        assert!(decode(&d, &DecodeParams::default()).detections.is_empty());
        d.set_cell(10, 0.9, [0.4, 0.05, 0.1, 0.1]);
        let one = decode(&d, &DecodeParams { conf_thresh: 0.5, ..Default::default() });
        assert_eq!(one.detections.len(), 1);
        assert_eq!(one.detections[0].confidence, 0.9);
    }

    #[test]
    fn decode_sorted_and_capped() {
        let mut d = DenseOutput::<f64>::zeros(GRID);
        for cell in 0..d.cells() {
            let (r, c) = (cell / GRID, cell % GRID);
            d.set_cell(cell, 0.3 + 0.6 * (cell as f64 / 196.0), [(c as f64 + 0.5) / 14.0, (r as f64 + 0.5) / 14.0, 0.05, 0.05]);
        }
        let out = decode(&d, &DecodeParams::default());
        assert_eq!(out.detections.len(), 50);
        assert!(out.detections.windows(2).all(|w| w[0].confidence >= w[1].confidence));
    }

    #[test]
    fn detector_forward_shape_and_range() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 1);
        let img = crate::sprites::procedural_background(224, 224, 0, 1);
        let out: DenseOutput<f32> = forward_dense(&det, &img).unwrap();
        assert_eq!(out.grid, GRID);
        assert!(out.all_in_unit_range());
        let again: DenseOutput<f32> = forward_dense(&det, &img).unwrap();
        assert_eq!(out, again);
        let small = crate::sprites::procedural_background(100, 100, 0, 1);
        assert!(matches!(forward_dense::<f32, _>(&det, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn hyper_defaults() {
        let h = TrainHyper::default();
        assert_eq!((h.epochs, h.batch_size, h.learning_rate, h.weight_decay, h.scheduler), (100, 64, 1e-2, 5e-4, Scheduler::Cosine));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut det = Detector::<f32>::new(DetectorConfig::default(), 3);
        let before = det.params().clone();
        let img = crate::sprites::procedural_background(224, 224, 0, 1);
        let sample = Sample { image: &img, boxes: &[] };
        let hist = train_detector(&mut det, &[sample], &TrainHyper { epochs: 0, ..Default::default() }).unwrap();
        assert!(hist.is_empty());
        assert_eq!(det.params(), &before);
        assert!(matches!(train_detector(&mut det, &[], &TrainHyper::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn flips_preserve_box_alignment() {
        let b = [BBox::new(0.2, 0.3, 0.1, 0.2).unwrap()];
        let f = flip_boxes(&b, true, true);
        assert!((f[0].cx - 0.8).abs() < 1e-12 && (f[0].cy - 0.7).abs() < 1e-12);
    }
}
