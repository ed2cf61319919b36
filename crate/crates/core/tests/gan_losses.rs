use dtmars_core::autograd::{Graph, Var};
use dtmars_core::detector::Detector;
use dtmars_core::gan::{
    adversarial_loss, cycle_loss, dtmars_loss, generate, generator_objective, identity_loss, total_loss, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig, IdentityTranslator, LossWeights, Nets,
};
use dtmars_core::nn::{Module, ParamSet};
use dtmars_core::rng::rng_from;
use dtmars_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Adds a constant to every pixel.
struct Shift {
    c: f64,
    params: ParamSet<f64>,
}

impl Shift {
    fn new(c: f64) -> Self {
        Self { c, params: ParamSet::new() }
    }
}

impl Module<f64> for Shift {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }
    fn forward(&self, g: &mut Graph<f64>, _p: &[Var], x: Var) -> Var {
        g.add_scalar(x, self.c)
    }
}

/// Adds a fixed image.
struct AddImage {
    delta: Tensor<f64>,
    params: ParamSet<f64>,
}

impl Module<f64> for AddImage {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }
    fn forward(&self, g: &mut Graph<f64>, _p: &[Var], x: Var) -> Var {
        let d = g.constant(self.delta.clone());
        g.add(x, d)
    }
}

/// Outputs a constant patch map, like a discriminator that cannot tell.
struct ConstantCritic {
    value: f64,
    params: ParamSet<f64>,
}

impl Module<f64> for ConstantCritic {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }
    fn forward(&self, g: &mut Graph<f64>, _p: &[Var], x: Var) -> Var {
        let (n, _, h, w) = g.value(x).dims4();
        g.constant(Tensor::full(&[n, 1, h / 8, w / 8], self.value))
    }
}

/// Linear detector: 8x8 average pooling then a fixed 1x1 map to 5 channels.
struct LinearDetector {
    weights: [[f64; 3]; 5],
    params: ParamSet<f64>,
}

impl Module<f64> for LinearDetector {
    fn params(&self) -> &ParamSet<f64> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }
    fn forward(&self, g: &mut Graph<f64>, _p: &[Var], x: Var) -> Var {
        let pooled = g.avg_pool(x, 8);
        let w = g.constant(Tensor::from_vec(&[5, 3, 1, 1], self.weights.iter().flatten().copied().collect()));
        g.conv2d(pooled, w, None, 1, 0)
    }
}

fn random_batch(n: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_from(seed);
    let len = n * 3 * size * size;
    Tensor::from_vec(&[n, 3, size, size], (0..len).map(|_| rng.gen_range(-0.9..0.9)).collect())
}

fn id() -> IdentityTranslator<f64> {
    IdentityTranslator::new()
}

#[test]
fn constant_half_critic_closed_form() {
    let critic = ConstantCritic { value: 0.5, params: ParamSet::new() };
    let x = random_batch(2, 32, 1);
    let y = random_batch(2, 32, 2);
    let (gen_term, disc_term) = adversarial_loss(&Generator::new(GeneratorConfig::default(), 3), &critic, &x, &y).unwrap();
    // (0.5 - 1)^2 for the generator; 0.5 * ((0.5 - 1)^2 + (0.5 - 0)^2) for the critic.
    assert!((gen_term - 0.25).abs() < 1e-12);
    assert!((disc_term - 0.25).abs() < 1e-12);
}

#[test]
fn perfect_critic_has_zero_discriminator_term() {
    // Fakes are pushed to -5, reals stay in [-0.9, 0.9]; the critic thresholds the mean.
    struct Thresh(ParamSet<f64>);
    impl Module<f64> for Thresh {
        fn params(&self) -> &ParamSet<f64> {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamSet<f64> {
            &mut self.0
        }
        fn forward(&self, g: &mut Graph<f64>, _p: &[Var], x: Var) -> Var {
            let (n, _, h, w) = g.value(x).dims4();
            let v = g.value(x).data().iter().sum::<f64>() / g.value(x).len() as f64;
            g.constant(Tensor::full(&[n, 1, h / 8, w / 8], if v > -2.0 { 1.0 } else { 0.0 }))
        }
    }
    let (_, d) = adversarial_loss(&Shift::new(-5.0), &Thresh(ParamSet::new()), &random_batch(1, 16, 4), &random_batch(1, 16, 5))
        .unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn adversarial_rejects_mismatched_batches() {
    let g = Generator::<f64>::new(GeneratorConfig::default(), 0);
    let d = Discriminator::<f64>::new(DiscriminatorConfig::default(), 0);
    assert!(adversarial_loss(&g, &d, &random_batch(1, 16, 0), &random_batch(2, 16, 0)).is_err());
}

#[test]
fn round_trip_offset_is_its_magnitude() {
    let x = random_batch(2, 16, 6);
    let y = random_batch(2, 16, 7);
    // Both round trips add 0.1 to every pixel.
    let l = cycle_loss(&Shift::new(0.1), &id(), &x, &y);
    assert!((l - 0.2).abs() < 1e-12, "{l}");
    let l = cycle_loss(&Shift::new(0.06), &Shift::new(0.04), &x, &y);
    assert!((l - 0.2).abs() < 1e-12);
    let l = cycle_loss(&Shift::new(0.1), &Shift::new(-0.1), &x, &y);
    assert!(l < 1e-12);
}

#[test]
fn cycle_loss_mirror_symmetry() {
    let (x, y) = (random_batch(1, 16, 8), random_batch(1, 16, 9));
    let (a, b) = (Shift::new(0.03), Shift::new(0.11));
    assert!((cycle_loss(&a, &b, &x, &y) - cycle_loss(&b, &a, &y, &x)).abs() < 1e-12);
}

#[test]
fn identity_offset_contribution() {
    let (x, y) = (random_batch(2, 16, 10), random_batch(2, 16, 11));
    assert!((identity_loss(&id(), &Shift::new(0.2), &x, &y) - 0.2).abs() < 1e-12);
    let black = Tensor::full(&[1, 3, 16, 16], -1.0);
    let keep_black = AddImage { delta: Tensor::zeros(&[1, 3, 16, 16]), params: ParamSet::new() };
    assert_eq!(identity_loss(&keep_black, &keep_black, &black, &black), 0.0);
}

#[test]
fn brightness_shift_on_linear_detector() {
    let weights = [[0.5, 0.25, 0.0], [0.1, 0.0, -0.2], [0.0, 0.3, 0.0], [-0.4, 0.0, 0.1], [0.2, 0.2, 0.2]];
    let det = LinearDetector { weights, params: ParamSet::new() };
    let (x, y) = (random_batch(2, 32, 12), random_batch(2, 32, 13));
    let beta = 0.05;
    // Each output channel moves by beta * (sum of its weights) in every cell.
    let expected: f64 = weights.iter().map(|w| (beta * w.iter().sum::<f64>()).abs()).sum();
    let l = dtmars_loss(&Shift::new(beta), &id(), &det, &x, &y);
    assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
}

#[test]
fn locality_probe_on_linear_detector() {
    let weights = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]];
    let det = LinearDetector { weights, params: ParamSet::new() };
    // Perturb only the red channel of the bottom-right 8x8 block of a 32 px image.
    let mut delta = Tensor::zeros(&[1, 3, 32, 32]);
    for yy in 24..32 {
        for xx in 24..32 {
            delta.data_mut()[yy * 32 + xx] = if (xx + yy) % 2 == 0 { 0.3 } else { -0.1 };
        }
    }
    let block_mean = (32.0 * 0.3 + 32.0 * -0.1) / 64.0;
    let gen = AddImage { delta, params: ParamSet::new() };
    let x = random_batch(1, 32, 14);
    let before = det.infer(&x);
    let after = det.infer(&gen.infer(&x));
    for c in 0..5 {
        for cell in 0..16 {
            let (a, b) = (before.data()[c * 16 + cell], after.data()[c * 16 + cell]);
            if cell == 15 {
                assert!((b - a - weights[c][0] * block_mean).abs() < 1e-12);
            } else {
                assert_eq!(a, b, "channel {c} cell {cell} outside the perturbed field changed");
            }
        }
    }
    // Only the changed cell contributes, averaged over the 4x4 grid.
    let expected = weights.iter().map(|w| (w[0] * block_mean).abs()).sum::<f64>() / 16.0;
    let l = dtmars_loss(&gen, &id(), &det, &x, &x);
    assert!((l - expected).abs() < 1e-12);
}

#[test]
fn reference_detector_locality() {
    let det = Detector::<f32>::new(Default::default(), 5);
    let mut rng = rng_from(15);
    let x: Tensor<f32> = Tensor::from_vec(&[1, 3, 224, 224], (0..3 * 224 * 224).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let mut y = x.clone();
    for c in 0..3 {
        for yy in 0..16 {
            for xx in 0..16 {
                y.data_mut()[c * 224 * 224 + yy * 224 + xx] *= -1.0;
            }
        }
    }
    let (a, b) = (det.infer(&x), det.infer(&y));
    let s = 14;
    let mut changed = 0;
    for c in 0..5 {
        for row in 0..s {
            for col in 0..s {
                let i = c * s * s + row * s + col;
                if a.data()[i] != b.data()[i] {
                    changed += 1;
                    // Receptive field of the backbone is 76 px.
                    assert!(row < 4 && col < 4, "cell ({row},{col}) changed");
                }
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn adversarial_only_weights() {
    let (x, y) = (random_batch(1, 32, 16), random_batch(1, 32, 17));
    let g_r = Generator::<f64>::new(GeneratorConfig { res_blocks: 1, context_width: 4, color_hidden: 4, ..Default::default() }, 1);
    let g_s = Generator::<f64>::new(GeneratorConfig { res_blocks: 1, context_width: 4, color_hidden: 4, ..Default::default() }, 2);
    let d_r = Discriminator::<f64>::new(DiscriminatorConfig { widths: [4, 4] }, 3);
    let d_s = Discriminator::<f64>::new(DiscriminatorConfig { widths: [4, 4] }, 4);
    let det = Detector::<f64>::new(Default::default(), 5);
    let nets = Nets { g_r: &g_r, g_s: &g_s, d_r: &d_r, d_s: &d_s, detector: &det };
    let w = LossWeights { lambda_gan: 1.0, lambda_cyc: 0.0, lambda_identity: 0.0, lambda_detector: 0.0 };
    let b = total_loss(nets, &w, &x, &y);
    assert!((b.total - (b.gan_s + b.gan_r)).abs() < 1e-12);
    assert!(b.cyc > 0.0 && b.identity > 0.0 && b.dt_mars > 0.0);
    let (gr, _) = adversarial_loss(&g_r, &d_r, &x, &y).unwrap();
    let (gs, _) = adversarial_loss(&g_s, &d_s, &y, &x).unwrap();
    assert!((b.gan_r - gr).abs() < 1e-12 && (b.gan_s - gs).abs() < 1e-12);
    assert!((b.cyc - cycle_loss(&g_r, &g_s, &x, &y)).abs() < 1e-12);
    assert!((b.identity - identity_loss(&g_r, &g_s, &x, &y)).abs() < 1e-12);
    assert!((b.dt_mars - dtmars_loss(&g_r, &g_s, &det, &x, &y)).abs() < 1e-12);
}

#[test]
fn frozen_critics_and_detector_get_no_gradient() {
    let (x, y) = (random_batch(1, 32, 18), random_batch(1, 32, 19));
    let cfg = GeneratorConfig { res_blocks: 1, context_width: 4, color_hidden: 4, ..Default::default() };
    let (g_r, g_s) = (Generator::<f64>::new(cfg, 1), Generator::<f64>::new(cfg, 2));
    let d = Discriminator::<f64>::new(DiscriminatorConfig { widths: [4, 4] }, 3);
    let det = Detector::<f64>::new(Default::default(), 5);
    let mut g = Graph::new();
    let (xs, xr) = (g.constant(x), g.constant(y));
    let (f, pr, ps) = generate(&mut g, &g_r, &g_s, xs, xr, true);
    let nets = Nets { g_r: &g_r, g_s: &g_s, d_r: &d, d_s: &d, detector: &det };
    let t = generator_objective(&mut g, nets, &LossWeights::default(), f, &pr, &ps);
    let grads = g.backward(t.total);
    assert!(pr.iter().chain(&ps).all(|v| g.requires_grad(*v)));
    assert!(pr.iter().chain(&ps).any(|v| grads.get(*v).is_some()));
    // Critics and detector enter the generator objective as constants.
    let (_, dp) = d.apply(&mut g, xs, false);
    assert!(dp.iter().all(|v| !g.requires_grad(*v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terms_nonnegative_and_total_decomposes(seed in 0u64..1000, lg in 0.0..3.0f64, lc in 0.0..10.0f64, li in 0.0..5.0f64, ld in 0.0..20.0f64) {
        let (x, y) = (random_batch(1, 16, seed), random_batch(1, 16, seed + 1));
        let cfg = GeneratorConfig { res_blocks: 1, context_width: 4, color_hidden: 4, ..Default::default() };
        let (g_r, g_s) = (Generator::<f64>::new(cfg, seed), Generator::<f64>::new(cfg, seed + 7));
        let d = Discriminator::<f64>::new(DiscriminatorConfig { widths: [4, 4] }, seed);
        let det = Detector::<f64>::new(Default::default(), seed);
        let w = LossWeights { lambda_gan: lg, lambda_cyc: lc, lambda_identity: li, lambda_detector: ld };
        let b = total_loss(Nets { g_r: &g_r, g_s: &g_s, d_r: &d, d_s: &d, detector: &det }, &w, &x, &y);
        for v in [b.gan_s, b.gan_r, b.cyc, b.identity, b.dt_mars] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        let sum = lg * (b.gan_s + b.gan_r) + lc * b.cyc + li * b.identity + ld * b.dt_mars;
        prop_assert!((b.total - sum).abs() <= 1e-6);
    }
}
