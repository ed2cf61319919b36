//! Sim/real translator pair trained with adversarial, cycle, identity and
//! detector-consistency losses.
//!
//! Generators are residual around their input: `tanh(atanh(0.99 x) + delta)`,
//! where `delta` sums a full-resolution per-pixel color path and a
//! low-resolution context path. Discriminators are small patch critics.
//! The adversarial objective is least squares with real label 1, fake label 0.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::detector::{detection_loss_node, Detector, DetectorTrainer, Sample, TrainHyper};
use crate::nn::{clip_grad_norm, Adam, Conv, Module, ParamSet};
use crate::raster::{images_to_tensor, tensor_to_images, RgbImage};
use crate::rng::{derive_named, rng_from};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

const IN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Hidden channels of the per-pixel color path.
    pub color_hidden: usize,
    /// Channels of the context path at 56 px (doubled at 28 px).
    pub context_width: usize,
    pub res_blocks: usize,
    /// Add the predicted change to the input instead of producing the image outright.
    pub global_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { color_hidden: 8, context_width: 16, res_blocks: 2, global_skip: false }
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    params: ParamSet<T>,
    color: [Conv; 2],
    enc: [Conv; 2],
    res: Vec<[Conv; 2]>,
    dec: [Conv; 2],
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut ps = ParamSet::new();
        let (h, c) = (config.color_hidden, config.context_width);
        // Small output layers start a skip generator near the identity.
        let out_gain = if config.global_skip { 0.1 } else { 1.0 };
        let color = [
            Conv::new(&mut ps, "color1", 3, h, 1, 1, 0, 1.0, &mut rng),
            Conv::new(&mut ps, "color2", h, 3, 1, 1, 0, out_gain, &mut rng),
        ];
        let enc = [
            Conv::new(&mut ps, "enc1", 3, c, 3, 1, 1, 1.0, &mut rng),
            Conv::new(&mut ps, "enc2", c, 2 * c, 3, 2, 1, 1.0, &mut rng),
        ];
        let res = (0..config.res_blocks)
            .map(|i| {
                [
                    Conv::new(&mut ps, &alloc::format!("res{i}.a"), 2 * c, 2 * c, 3, 1, 1, 1.0, &mut rng),
                    Conv::new(&mut ps, &alloc::format!("res{i}.b"), 2 * c, 2 * c, 3, 1, 1, 1.0, &mut rng),
                ]
            })
            .collect();
        let dec = [
            Conv::new(&mut ps, "dec1", 2 * c, c, 3, 1, 1, 1.0, &mut rng),
            Conv::new(&mut ps, "dec2", c, 3, 3, 1, 1, out_gain, &mut rng),
        ];
        Self { config, params: ps, color, enc, res, dec }
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let eps = T::lit(IN_EPS);

        let h = self.color[0].apply(g, p, x);
        let h = g.leaky_relu(h, T::lit(0.2));
        let color = self.color[1].apply(g, p, h);

        let mut h = g.avg_pool(x, 4);
        for conv in &self.enc {
            h = conv.apply(g, p, h);
            h = g.instance_norm(h, eps);
            h = g.relu(h);
        }
        for [a, b] in &self.res {
            let r = a.apply(g, p, h);
            let r = g.instance_norm(r, eps);
            let r = g.relu(r);
            let r = b.apply(g, p, r);
            let r = g.instance_norm(r, eps);
            h = g.add(h, r);
        }
        let h = g.upsample(h, 2);
        let h = self.dec[0].apply(g, p, h);
        let h = g.instance_norm(h, eps);
        let h = g.relu(h);
        let h = self.dec[1].apply(g, p, h);
        let context = g.upsample(h, 4);

        let mut pre = g.add(color, context);
        if self.config.global_skip {
            let base = g.atanh_scaled(x, T::lit(0.99));
            pre = g.add(base, pre);
        }
        g.tanh(pre)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub widths: [usize; 2],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { widths: [16, 32] }
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    params: ParamSet<T>,
    layers: [Conv; 3],
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut ps = ParamSet::new();
        let [a, b] = config.widths;
        let layers = [
            Conv::new(&mut ps, "d1", 3, a, 4, 4, 0, 1.0, &mut rng),
            Conv::new(&mut ps, "d2", a, b, 4, 2, 1, 1.0, &mut rng),
            Conv::new(&mut ps, "d3", b, 1, 3, 1, 1, 1.0, &mut rng),
        ];
        Self { config, params: ps, layers }
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let slope = T::lit(0.2);
        let h = self.layers[0].apply(g, p, x);
        let h = g.leaky_relu(h, slope);
        let h = self.layers[1].apply(g, p, h);
        let h = g.instance_norm(h, T::lit(IN_EPS));
        let h = g.leaky_relu(h, slope);
        self.layers[2].apply(g, p, h)
    }
}

/// Parameter-free generator returning its input.
#[derive(Debug, Clone, Default)]
pub struct IdentityTranslator<T> {
    params: ParamSet<T>,
}

impl<T: Real> IdentityTranslator<T> {
    pub fn new() -> Self {
        Self { params: ParamSet::new() }
    }
}

impl<T: Real> Module<T> for IdentityTranslator<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn forward(&self, _g: &mut Graph<T>, _p: &[Var], x: Var) -> Var {
        x
    }
}

/// Replay buffer of generated images shown to a discriminator.
#[derive(Debug, Clone)]
pub struct ImagePool<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
}

impl<T: Real> ImagePool<T> {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, images: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Returns a batch mixing fresh images with stored ones: while filling,
    /// every image is stored and returned; once full, each image is swapped
    /// for a random stored one with probability 1/2.
    pub fn query(&mut self, batch: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
        if self.capacity == 0 {
            return batch.clone();
        }
        let n = batch.shape()[0];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let img = batch.slice_outer(i, 1);
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.gen_bool(0.5) {
                let j = rng.gen_range(0..self.capacity);
                out.push(core::mem::replace(&mut self.images[j], img));
            } else {
                out.push(img);
            }
        }
        let refs: Vec<&Tensor<T>> = out.iter().collect();
        Tensor::stack_outer(&refs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_gan: f64,
    pub lambda_cyc: f64,
    pub lambda_identity: f64,
    pub lambda_detector: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_gan: 1.0, lambda_cyc: 5.0, lambda_identity: 2.0, lambda_detector: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_gan, self.lambda_cyc, self.lambda_identity, self.lambda_detector];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan_s: f64,
    pub gan_r: f64,
    pub cyc: f64,
    pub identity: f64,
    pub dt_mars: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(w: &LossWeights, gan_s: f64, gan_r: f64, cyc: f64, identity: f64, dt_mars: f64) -> Self {
        let total = w.lambda_gan * (gan_s + gan_r)
            + w.lambda_cyc * cyc
            + w.lambda_identity * identity
            + w.lambda_detector * dt_mars;
        Self { gan_s, gan_r, cyc, identity, dt_mars, total }
    }

    pub fn all_finite(&self) -> bool {
        [self.gan_s, self.gan_r, self.cyc, self.identity, self.dt_mars, self.total].iter().all(|v| v.is_finite())
    }
}

/// Networks taking part in the generator objective.
#[derive(Clone, Copy)]
pub struct Nets<'a, T: Real> {
    pub g_r: &'a dyn Module<T>,
    pub g_s: &'a dyn Module<T>,
    pub d_r: &'a dyn Module<T>,
    pub d_s: &'a dyn Module<T>,
    pub detector: &'a dyn Module<T>,
}

/// Tape nodes of one generator-objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub fake_r: Var,
    pub fake_s: Var,
    pub gan_s: Var,
    pub gan_r: Var,
    pub cyc: Var,
    pub identity: Var,
    pub dt_mars: Var,
    /// Weighted sum of the terms with non-zero weight.
    pub total: Var,
}

/// `G_s(G_r(x_s))` vs `x_s` plus `G_r(G_s(x_r))` vs `x_r`, each a mean L1.
pub fn cycle_term<T: Real>(g: &mut Graph<T>, rec: (Var, Var), x: (Var, Var)) -> Var {
    let a = g.l1_mean(rec.0, x.0);
    let b = g.l1_mean(rec.1, x.1);
    g.add(a, b)
}

/// Per-image `(1/S^2) * sum over cells and channels |a - b|`, batch-averaged.
pub fn dense_l1<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let (n, _, s, s2) = g.value(a).dims4();
    g.abs_diff_sum(a, b, T::one() / T::lit((n * s * s2) as f64))
}

/// Fakes produced in the first half of a generator step.
#[derive(Debug, Clone, Copy)]
pub struct Fakes {
    pub x_s: Var,
    pub x_r: Var,
    pub fake_r: Var,
    pub fake_s: Var,
}

/// Binds both generators (trainable or frozen) and translates the batches.
pub fn generate<T: Real>(
    g: &mut Graph<T>,
    g_r: &dyn Module<T>,
    g_s: &dyn Module<T>,
    x_s: Var,
    x_r: Var,
    trainable: bool,
) -> (Fakes, Vec<Var>, Vec<Var>) {
    let pr = g_r.params().bind(g, trainable);
    let ps = g_s.params().bind(g, trainable);
    let fake_r = g_r.forward(g, &pr, x_s);
    let fake_s = g_s.forward(g, &ps, x_r);
    (Fakes { x_s, x_r, fake_r, fake_s }, pr, ps)
}

/// Completes the generator objective on already-produced fakes.
///
/// Discriminator and detector parameters enter as constants, so gradients
/// reach only the generators (and the input images if they require them).
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Real>(
    g: &mut Graph<T>,
    nets: Nets<'_, T>,
    weights: &LossWeights,
    f: Fakes,
    pr: &[Var],
    ps: &[Var],
) -> GeneratorTerms {
    let (dr, _) = nets.d_r.apply(g, f.fake_r, false);
    let gan_r = g.mse_const(dr, T::one());
    let (ds, _) = nets.d_s.apply(g, f.fake_s, false);
    let gan_s = g.mse_const(ds, T::one());

    let rec_s = nets.g_s.forward(g, ps, f.fake_r);
    let rec_r = nets.g_r.forward(g, pr, f.fake_s);
    let cyc = cycle_term(g, (rec_s, rec_r), (f.x_s, f.x_r));

    let id_s = nets.g_s.forward(g, ps, f.x_s);
    let id_r = nets.g_r.forward(g, pr, f.x_r);
    let a = g.l1_mean(id_s, f.x_s);
    let b = g.l1_mean(id_r, f.x_r);
    let identity = g.add(a, b);

    let (det_s, _) = nets.detector.apply(g, f.x_s, false);
    let (det_fake_r, _) = nets.detector.apply(g, f.fake_r, false);
    let (det_r, _) = nets.detector.apply(g, f.x_r, false);
    let (det_fake_s, _) = nets.detector.apply(g, f.fake_s, false);
    let a = dense_l1(g, det_fake_r, det_s);
    let b = dense_l1(g, det_fake_s, det_r);
    let dt_mars = g.add(a, b);

    let weighted = [
        (weights.lambda_gan, gan_s),
        (weights.lambda_gan, gan_r),
        (weights.lambda_cyc, cyc),
        (weights.lambda_identity, identity),
        (weights.lambda_detector, dt_mars),
    ];
    let mut total: Option<Var> = None;
    for (w, term) in weighted {
        if w == 0.0 {
            continue;
        }
        let t = g.scale(term, T::lit(w));
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero())));
    GeneratorTerms {
        fake_r: f.fake_r,
        fake_s: f.fake_s,
        gan_s,
        gan_r,
        cyc,
        identity,
        dt_mars,
        total,
    }
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// All loss terms on one batch pair, without updating anything.
pub fn total_loss<T: Real>(nets: Nets<'_, T>, weights: &LossWeights, sim: &Tensor<T>, real: &Tensor<T>) -> LossBreakdown {
    let mut g = Graph::new();
    let x_s = g.constant(sim.clone());
    let x_r = g.constant(real.clone());
    let (f, pr, ps) = generate(&mut g, nets.g_r, nets.g_s, x_s, x_r, false);
    let t = generator_objective(&mut g, nets, weights, f, &pr, &ps);
    LossBreakdown::from_terms(
        weights,
        scalar(&g, t.gan_s),
        scalar(&g, t.gan_r),
        scalar(&g, t.cyc),
        scalar(&g, t.identity),
        scalar(&g, t.dt_mars),
    )
}

/// Least-squares adversarial terms for one direction:
/// `(mse(D(G(source)), 1), 0.5 * [mse(D(target), 1) + mse(D(G(source)), 0)])`.
pub fn adversarial_loss<T: Real>(
    gen: &dyn Module<T>,
    disc: &dyn Module<T>,
    source: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, f64)> {
    if source.is_empty() || source.shape() != target.shape() {
        return Err(Error::Shape("adversarial_loss needs non-empty batches of equal shape".into()));
    }
    let fake = gen.infer(source);
    let generator_term = {
        let mut g = Graph::new();
        let x = g.constant(fake.clone());
        let (d, _) = disc.apply(&mut g, x, false);
        let l = g.mse_const(d, T::one());
        scalar(&g, l)
    };
    let mut g = Graph::new();
    let (_, l) = discriminator_objective(&mut g, disc, target, &fake, false);
    let discriminator_term = scalar(&g, l);
    for (what, v) in [("generator adversarial term", generator_term), ("discriminator term", discriminator_term)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { step: 0, what: what.into() });
        }
    }
    Ok((generator_term, discriminator_term))
}

fn discriminator_objective<T: Real>(
    g: &mut Graph<T>,
    disc: &dyn Module<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    trainable: bool,
) -> (Vec<Var>, Var) {
    let xr = g.constant(real.clone());
    let xf = g.constant(fake.clone());
    let p = disc.params().bind(g, trainable);
    let dr = disc.forward(g, &p, xr);
    let df = disc.forward(g, &p, xf);
    let a = g.mse_const(dr, T::one());
    let b = g.mse_const(df, T::zero());
    let s = g.add(a, b);
    let l = g.scale(s, T::lit(0.5));
    (p, l)
}

/// Mean L1 of both round trips.
pub fn cycle_loss<T: Real>(g_r: &dyn Module<T>, g_s: &dyn Module<T>, sim: &Tensor<T>, real: &Tensor<T>) -> f64 {
    let rec_s = g_s.infer(&g_r.infer(sim));
    let rec_r = g_r.infer(&g_s.infer(real));
    mean_abs_diff(&rec_s, sim) + mean_abs_diff(&rec_r, real)
}

/// Mean L1 of `G_s(x_s) - x_s` plus `G_r(x_r) - x_r`.
pub fn identity_loss<T: Real>(g_r: &dyn Module<T>, g_s: &dyn Module<T>, sim: &Tensor<T>, real: &Tensor<T>) -> f64 {
    mean_abs_diff(&g_s.infer(sim), sim) + mean_abs_diff(&g_r.infer(real), real)
}

/// Dense-output L1 between detector views of each batch and its translation.
pub fn dtmars_loss<T: Real>(
    g_r: &dyn Module<T>,
    g_s: &dyn Module<T>,
    detector: &dyn Module<T>,
    sim: &Tensor<T>,
    real: &Tensor<T>,
) -> f64 {
    let term = |gen: &dyn Module<T>, x: &Tensor<T>| {
        let a = detector.infer(&gen.infer(x));
        let b = detector.infer(x);
        let (n, _, s, s2) = a.dims4();
        a.data().iter().zip(b.data()).map(|(p, q)| (*p - *q).abs().as_f64()).sum::<f64>() / (n * s * s2) as f64
    };
    term(g_r, sim) + term(g_s, real)
}

fn mean_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(p, q)| (*p - *q).abs().as_f64()).sum::<f64>() / a.len() as f64
}

/// Optimizer settings and detector coupling of the joint training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Epoch index after which the learning rate decays linearly to 0.
    pub decay_start: usize,
    /// Update the detector every `detector_period` batches; 0 freezes it.
    pub detector_period: usize,
    pub detector_lr: f64,
    /// Joint detector updates also see the untranslated sim batch.
    pub detector_sees_sim: bool,
    pub pool_capacity: usize,
    pub max_grad_norm: f64,
}

impl Default for GanSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            decay_start: 5,
            detector_period: 1,
            detector_lr: 1e-3,
            detector_sees_sim: true,
            pool_capacity: 50,
            max_grad_norm: 10.0,
        }
    }
}

impl GanSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.detector_lr > 0.0) {
            return Err(Error::Config("GAN batch_size, lr and detector_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start || self.epochs <= self.decay_start {
            return self.lr;
        }
        let span = (self.epochs - self.decay_start) as f64;
        self.lr * (1.0 - (epoch - self.decay_start) as f64 / span)
    }
}

/// Generators, discriminators, replay pools and loss weights.
#[derive(Debug, Clone)]
pub struct GanBundle<T> {
    pub g_r: Generator<T>,
    pub g_s: Generator<T>,
    pub d_r: Discriminator<T>,
    pub d_s: Discriminator<T>,
    pub pool_r: ImagePool<T>,
    pub pool_s: ImagePool<T>,
    pub weights: LossWeights,
    pub step: u64,
}

impl<T: Real> GanBundle<T> {
    pub fn new(gc: GeneratorConfig, dc: DiscriminatorConfig, weights: LossWeights, pool_capacity: usize, seed: u64) -> Self {
        Self {
            g_r: Generator::new(gc, derive_named(seed, "g_r")),
            g_s: Generator::new(gc, derive_named(seed, "g_s")),
            d_r: Discriminator::new(dc, derive_named(seed, "d_r")),
            d_s: Discriminator::new(dc, derive_named(seed, "d_s")),
            pool_r: ImagePool::new(pool_capacity),
            pool_s: ImagePool::new(pool_capacity),
            weights,
            step: 0,
        }
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub d_r: f64,
    pub d_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<f64>,
}

/// Optimizer state of the joint training stage.
pub struct GanTrainer<T> {
    pub schedule: GanSchedule,
    opt_g: Adam<T>,
    opt_gs: Adam<T>,
    opt_dr: Adam<T>,
    opt_ds: Adam<T>,
    det: DetectorTrainer<T>,
    epoch: usize,
    rng: ChaCha8Rng,
}

fn finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { step: step as usize, what: alloc::format!("{what} = {v}") })
    }
}

impl<T: Real> GanTrainer<T> {
    pub fn new(schedule: GanSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let adam = || Adam::new(schedule.beta1, schedule.beta2, 0.0);
        let det_hyper = TrainHyper {
            epochs: 1,
            batch_size: schedule.batch_size,
            learning_rate: schedule.detector_lr,
            weight_decay: 5e-4,
            flip_augment: false,
            hsv_augment: [0.0; 3],
            seed: derive_named(seed, "joint-detector"),
            ..TrainHyper::default()
        };
        Ok(Self {
            schedule,
            opt_g: adam(),
            opt_gs: adam(),
            opt_dr: adam(),
            opt_ds: adam(),
            det: DetectorTrainer::new(det_hyper)?,
            epoch: 0,
            rng: rng_from(derive_named(seed, "gan-train")),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One joint step on a sim/real batch pair.
    ///
    /// Order: translate; update both discriminators on pooled fakes; update
    /// both generators against the refreshed discriminators; then, on every
    /// `detector_period`-th step, update the detector on the translated sim
    /// batch (plus the sim batch itself if `detector_sees_sim`) with its
    /// ground-truth boxes.
    pub fn step(
        &mut self,
        bundle: &mut GanBundle<T>,
        detector: &mut Detector<T>,
        sim: &Tensor<T>,
        sim_boxes: &[&[crate::bbox::BBox]],
        real: &Tensor<T>,
        lr: f64,
    ) -> Result<StepLog> {
        let step = bundle.step;
        let mut g = Graph::new();
        let x_s = g.constant(sim.clone());
        let x_r = g.constant(real.clone());
        let (fakes, pr, ps) = generate(&mut g, &bundle.g_r, &bundle.g_s, x_s, x_r, true);
        let fake_r = g.value(fakes.fake_r).clone();
        let fake_s = g.value(fakes.fake_s).clone();

        let pooled_r = bundle.pool_r.query(&fake_r, &mut self.rng);
        let pooled_s = bundle.pool_s.query(&fake_s, &mut self.rng);
        let max_norm = self.schedule.max_grad_norm;
        let d_update = |disc: &mut Discriminator<T>, opt: &mut Adam<T>, real: &Tensor<T>, fake: &Tensor<T>| {
            let mut dg = Graph::new();
            let (p, l) = discriminator_objective(&mut dg, disc, real, fake, true);
            let v = scalar(&dg, l);
            let mut grads = dg.backward(l);
            let mut grads = disc.params().collect_grads(&mut grads, &p);
            clip_grad_norm(&mut grads, max_norm);
            opt.step(disc.params_mut(), &grads, lr);
            v
        };
        let d_r = finite(step, "D_r loss", d_update(&mut bundle.d_r, &mut self.opt_dr, real, &pooled_r))?;
        let d_s = finite(step, "D_s loss", d_update(&mut bundle.d_s, &mut self.opt_ds, sim, &pooled_s))?;

        let nets = Nets { g_r: &bundle.g_r, g_s: &bundle.g_s, d_r: &bundle.d_r, d_s: &bundle.d_s, detector: &*detector };
        let terms = generator_objective(&mut g, nets, &bundle.weights, fakes, &pr, &ps);
        let losses = LossBreakdown::from_terms(
            &bundle.weights,
            scalar(&g, terms.gan_s),
            scalar(&g, terms.gan_r),
            scalar(&g, terms.cyc),
            scalar(&g, terms.identity),
            scalar(&g, terms.dt_mars),
        );
        if !losses.all_finite() {
            return Err(Error::NonFinite { step: step as usize, what: alloc::format!("generator losses {losses:?}") });
        }
        let mut grads = g.backward(terms.total);
        let mut gr = bundle.g_r.params().collect_grads(&mut grads, &pr);
        let mut gs = bundle.g_s.params().collect_grads(&mut grads, &ps);
        clip_grad_norm(&mut gr, max_norm);
        clip_grad_norm(&mut gs, max_norm);
        self.opt_g.step(bundle.g_r.params_mut(), &gr, lr);
        self.opt_gs.step(bundle.g_s.params_mut(), &gs, lr);

        let period = self.schedule.detector_period;
        let detector_loss = if period > 0 && (step + 1) % period as u64 == 0 {
            let v = if self.schedule.detector_sees_sim {
                let both = Tensor::stack_outer(&[sim, &fake_r]);
                let boxes: Vec<&[crate::bbox::BBox]> = sim_boxes.iter().chain(sim_boxes).copied().collect();
                self.det.step_tensor(detector, &both, &boxes, self.schedule.detector_lr)?
            } else {
                self.det.step_tensor(detector, &fake_r, sim_boxes, self.schedule.detector_lr)?
            };
            Some(finite(step, "detector loss", v)?)
        } else {
            None
        };
        bundle.step += 1;
        Ok(StepLog { step, epoch: self.epoch, losses, d_r, d_s, detector: detector_loss })
    }

    /// One pass over `sim` (shuffled), pairing each batch with a randomly
    /// ordered real batch.
    pub fn train_epoch(
        &mut self,
        bundle: &mut GanBundle<T>,
        detector: &mut Detector<T>,
        sim: &[Sample<'_>],
        real: &[&RgbImage],
    ) -> Result<Vec<StepLog>> {
        if sim.is_empty() || real.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let lr = self.schedule.lr_at(self.epoch);
        let mut sim_order: Vec<usize> = (0..sim.len()).collect();
        sim_order.shuffle(&mut self.rng);
        let mut real_order: Vec<usize> = (0..real.len()).collect();
        real_order.shuffle(&mut self.rng);
        let mut logs = Vec::new();
        for (b, chunk) in sim_order.chunks(self.schedule.batch_size).enumerate() {
            let imgs: Vec<&RgbImage> = chunk.iter().map(|&i| sim[i].image).collect();
            let boxes: Vec<&[crate::bbox::BBox]> = chunk.iter().map(|&i| sim[i].boxes).collect();
            let reals: Vec<&RgbImage> = (0..chunk.len())
                .map(|k| real[real_order[(b * self.schedule.batch_size + k) % real.len()]])
                .collect();
            let xs = images_to_tensor::<T>(&imgs)?;
            let xr = images_to_tensor::<T>(&reals)?;
            logs.push(self.step(bundle, detector, &xs, &boxes, &xr, lr)?);
        }
        self.epoch += 1;
        Ok(logs)
    }
}

/// Joint training for `schedule.epochs` epochs; returns the step log.
pub fn train_dtmars<T: Real>(
    bundle: &mut GanBundle<T>,
    detector: &mut Detector<T>,
    sim: &[Sample<'_>],
    real: &[&RgbImage],
    schedule: &GanSchedule,
    seed: u64,
) -> Result<Vec<StepLog>> {
    bundle.weights.validate()?;
    let mut trainer = GanTrainer::new(*schedule, seed)?;
    let mut log = Vec::new();
    for _ in 0..schedule.epochs {
        log.extend(trainer.train_epoch(bundle, detector, sim, real)?);
    }
    Ok(log)
}

/// Translates images with a frozen generator.
pub fn translate_images<T: Real>(gen: &dyn Module<T>, images: &[&RgbImage]) -> Result<Vec<RgbImage>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(8) {
        let x = images_to_tensor::<T>(chunk)?;
        out.extend(tensor_to_images(&gen.infer(&x)));
    }
    Ok(out)
}

/// Detection loss of a detector on translated sim images; used to check
/// that joint updates help on the translated domain.
pub fn translated_detection_loss<T: Real>(
    gen: &dyn Module<T>,
    detector: &Detector<T>,
    sim: &Tensor<T>,
    boxes: &[&[crate::bbox::BBox]],
) -> f64 {
    let fake = gen.infer(sim);
    let mut g = Graph::new();
    let x = g.constant(fake);
    let (d, _) = detector.apply(&mut g, x, false);
    let l = detection_loss_node(&mut g, d, boxes);
    scalar(&g, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    fn random_batch(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        let data = (0..n * 3 * size * size).map(|_| rng.gen_range(-0.9..0.9)).collect();
        Tensor::from_vec(&[n, 3, size, size], data)
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let x = random_batch(2, 32, 1).cast::<f32>();
        for global_skip in [false, true] {
            let gen = Generator::<f32>::new(GeneratorConfig { global_skip, ..Default::default() }, 1);
            let y = gen.infer(&x);
            assert_eq!(y.shape(), x.shape());
            assert!(y.data().iter().all(|v| v.is_finite() && v.abs() < 1.0));
        }
    }

    #[test]
    fn discriminator_patch_output() {
        let d = Discriminator::<f32>::new(DiscriminatorConfig::default(), 1);
        let y = d.infer(&random_batch(1, 224, 2).cast::<f32>());
        assert_eq!(y.shape(), &[1, 1, 28, 28]);
    }

    #[test]
    fn identity_generators_zero_terms() {
        let id = IdentityTranslator::<f64>::new();
        let det = Detector::<f64>::new(DetectorConfig::default(), 1);
        let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 1);
        let (s, r) = (random_batch(1, 32, 3), random_batch(1, 32, 4));
        assert_eq!(cycle_loss(&id, &id, &s, &r), 0.0);
        assert_eq!(identity_loss(&id, &id, &s, &r), 0.0);
        assert_eq!(dtmars_loss(&id, &id, &det, &s, &r), 0.0);
        let nets = Nets { g_r: &id, g_s: &id, d_r: &d, d_s: &d, detector: &det };
        let b = total_loss(nets, &LossWeights::default(), &s, &r);
        assert_eq!((b.cyc, b.identity, b.dt_mars), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pool_is_bounded_and_passthrough_while_filling() {
        let mut pool = ImagePool::<f32>::new(3);
        let mut rng = rng_from(0);
        let x = random_batch(2, 8, 5).cast::<f32>();
        assert_eq!(pool.query(&x, &mut rng), x);
        for i in 0..10 {
            let y = random_batch(2, 8, 10 + i).cast::<f32>();
            let out = pool.query(&y, &mut rng);
            assert_eq!(out.shape(), y.shape());
            assert!(pool.len() <= 3);
        }
    }

    #[test]
    fn schedule_linear_decay() {
        let s = GanSchedule { epochs: 10, decay_start: 5, lr: 1.0, ..Default::default() };
        assert_eq!(s.lr_at(4), 1.0);
        assert_eq!(s.lr_at(5), 1.0);
        assert!((s.lr_at(9) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_gan, w.lambda_cyc, w.lambda_identity, w.lambda_detector), (1.0, 5.0, 2.0, 10.0));
        assert!(LossWeights { lambda_cyc: -1.0, ..w }.validate().is_err());
    }
}
